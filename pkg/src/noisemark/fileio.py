"""PNG and message-file helpers. Stored images are always lossless PNG."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .codec import BitMessage
from .metrics import from_uint8, to_uint8


def save_png(image: torch.Tensor, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")
    return path


def load_png(path) -> torch.Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"))
    return from_uint8(arr)


def save_message(message: BitMessage, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(message.to_string() + "\n")
    return path


def load_message(path) -> BitMessage:
    return BitMessage.from_string(Path(path).read_text())
