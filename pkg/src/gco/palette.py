"""
Fixed colours and face geometry of the synthetic corpus.

The renderer, the face finder and the attribute classifier all read from here.
Palette entries within a group are at least 0.3 apart in RGB (values in [0, 1]).
"""

import colorsys
from typing import Dict, Sequence, Tuple

import numpy as np

from .errors import UnreadableRegionError

RGB = Tuple[float, float, float]

HAIR_COLORS: Dict[str, RGB] = {
    "black": (0.08, 0.08, 0.08),
    "brown": (0.45, 0.25, 0.10),
    "blond": (0.95, 0.85, 0.45),
    "red": (0.80, 0.15, 0.05),
}
SKIN_TONES: Dict[str, RGB] = {
    "light": (0.96, 0.84, 0.74),
    "tan": (0.78, 0.57, 0.40),
    "dark": (0.42, 0.27, 0.17),
}
LIP_COLORS: Dict[str, RGB] = {
    "natural": (0.62, 0.32, 0.36),
    "red": (0.85, 0.05, 0.15),
}
EYEBROW_COLOR: RGB = (0.10, 0.07, 0.05)
BACKGROUND_PLAIN: RGB = (0.70, 0.80, 0.95)
BACKGROUND_GRADIENT: Tuple[RGB, RGB] = ((0.35, 0.45, 0.70), (0.75, 0.82, 0.98))

# nearest-palette distance above which a sample is "unreadable"
MATCH_THRESHOLD = 0.25
SKIN_MATCH_THRESHOLD = 0.2
# garment colours keep this distance from every skin tone
GARMENT_SKIN_MARGIN = 0.35

# face geometry (pixels, 64x64 showcase)
HEAD_RADIUS = 7
HAIR_CAP_RADIUS = HEAD_RADIUS + 1.5
HAIR_CAP_BOTTOM = -5          # cap covers rows y <= cy - 5
EYEBROW_ROWS_THIN = (-3,)
EYEBROW_ROWS_THICK = (-4, -3, -2)
EYEBROW_SPANS = ((-5, -2), (2, 5))
LIP_ROWS = (3, 4)
LIP_SPAN = (-3, 3)
STRAND_ROWS = 7               # strands run over rows cy .. cy + 6
FACE_BOX_BEFORE = 9
FACE_BOX_AFTER = 10
MIN_FACE_BOX = 12

NUM_LIMBS = 14


def to_u8(color: RGB) -> Tuple[int, int, int]:
    return tuple(int(round(c * 255.0)) for c in color)


def face_bbox(cx: int, cy: int) -> Tuple[int, int, int, int]:
    """(x0, y0, x1, y1) with exclusive x1/y1 around a head centred at (cx, cy)."""
    return (cx - FACE_BOX_BEFORE, cy - FACE_BOX_BEFORE, cx + FACE_BOX_AFTER, cy + FACE_BOX_AFTER)


def face_center(bbox: Sequence[int]) -> Tuple[int, int]:
    x0, y0, x1, y1 = (int(v) for v in bbox)
    return (x0 + x1 - 1) // 2, (y0 + y1 - 1) // 2


def limb_colors() -> np.ndarray:
    """(14, 3) evenly spaced fully saturated hues."""
    return np.array([colorsys.hsv_to_rgb(i / NUM_LIMBS, 1.0, 1.0) for i in range(NUM_LIMBS)])


def nearest(color: Sequence[float], palette: Dict[str, RGB]) -> Tuple[str, float]:
    """Name and distance of the closest palette entry."""
    c = np.asarray(color, dtype=np.float64)
    best, best_d = None, np.inf
    for name, ref in palette.items():
        d = float(np.linalg.norm(c - np.asarray(ref)))
        if d < best_d:
            best, best_d = name, d
    return best, best_d


def read_palette(color: Sequence[float], palette: Dict[str, RGB], what: str) -> str:
    name, d = nearest(color, palette)
    if d > MATCH_THRESHOLD:
        raise UnreadableRegionError(f"unreadable region: {what} colour {np.round(color, 3).tolist()} "
                                    f"is {d:.3f} from the nearest palette entry")
    return name


def skin_distance(img_hwc: np.ndarray) -> np.ndarray:
    """Per-pixel distance to the nearest skin tone for an (H, W, 3) float image."""
    refs = np.asarray(list(SKIN_TONES.values()))
    d = np.linalg.norm(img_hwc[:, :, None, :] - refs[None, None], axis=-1)
    return d.min(axis=-1)
