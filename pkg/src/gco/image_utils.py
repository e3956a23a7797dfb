import logging
import os
import tempfile
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image, ImageDraw

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, torch.Tensor]


def to_numpy(img: ArrayLike) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        return img.detach().cpu().numpy()
    return np.asarray(img)


def to_uint8(img: ArrayLike) -> np.ndarray:
    """(3,H,W) or (H,W) float in [0,1] -> HWC / HW uint8"""
    arr = to_numpy(img).astype(np.float64)
    if arr.ndim == 3:
        arr = np.transpose(arr, (1, 2, 0))
    return np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """HWC / HW uint8 -> (3,H,W) / (H,W) float32 in [0,1]"""
    out = arr.astype(np.float32) / 255.0
    if out.ndim == 3:
        out = np.transpose(out, (2, 0, 1))
    return np.ascontiguousarray(out)


def quantize(img: ArrayLike) -> np.ndarray:
    """Round to the 8-bit grid so an in-memory image matches its PNG."""
    return from_uint8(to_uint8(img))


def save_png(img: ArrayLike, path: Union[str, Path]) -> Path:
    """
    Save an image as an 8-bit PNG, replacing the target atomically.

    Args:
        img: (3,H,W) RGB or (H,W) grayscale with values in [0,1]
        path: destination

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = to_uint8(img)
    fd, tmp = tempfile.mkstemp(suffix=".png", dir=path.parent)
    os.close(fd)
    try:
        Image.fromarray(arr).save(tmp, format="PNG")
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return path


def write_atomic(path: Union[str, Path], data: bytes) -> Path:
    """Write bytes through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return path


def load_png(path: Union[str, Path], grayscale: bool = False) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im.convert("L" if grayscale else "RGB"))
    return from_uint8(arr)


def make_grid(images: Sequence[ArrayLike], ncols: Optional[int] = None, pad: int = 2,
              labels: Optional[Sequence[str]] = None) -> Image.Image:
    """
    Tile images into a comparison grid.

    Args:
        images: (3,H,W) or (H,W) images; smaller tiles are padded to the largest size, top-left aligned
        ncols: columns per row (one row when omitted)
        labels: text drawn under each cell

    Returns:
        PIL.Image
    """
    if not images:
        raise ValueError("make_grid needs at least one image")
    tiles: List[np.ndarray] = []
    for img in images:
        arr = to_uint8(img)
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        tiles.append(arr)
    ncols = ncols or len(tiles)
    nrows = (len(tiles) + ncols - 1) // ncols
    th = max(t.shape[0] for t in tiles)
    tw = max(t.shape[1] for t in tiles)
    label_h = 10 if labels else 0
    grid = np.full((nrows * (th + pad + label_h) + pad, ncols * (tw + pad) + pad, 3), 255, np.uint8)
    for i, tile in enumerate(tiles):
        r, c = divmod(i, ncols)
        y = pad + r * (th + pad + label_h)
        x = pad + c * (tw + pad)
        grid[y:y + tile.shape[0], x:x + tile.shape[1]] = tile
    canvas = Image.fromarray(grid)
    if labels:
        draw = ImageDraw.Draw(canvas)
        for i, label in enumerate(labels):
            r, c = divmod(i, ncols)
            draw.text((pad + c * (tw + pad), pad + r * (th + pad + label_h) + th), label, fill=(0, 0, 0))
    return canvas


def save_grid(images: Sequence[ArrayLike], path: Union[str, Path], **kwargs) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    make_grid(images, **kwargs).save(path, format="PNG")
    logger.info(f"grid saved: {path}")
    return path
