"""
Procedural toy fashion corpus with exact ground truth.

Each sample is a 64x64 stick-figure "model" wearing a patterned garment, with a
face whose attributes are drawn by fixed rules so they can be read back exactly.
"""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Protocol, Sequence, Tuple, Union

import cv2
import numpy as np
import torch
from torch.utils.data import Dataset
from tqdm import tqdm

from . import palette
from .errors import GcoError, SchemaMismatchError, UnreadableRegionError
from .image_utils import from_uint8, load_png, quantize, save_png, write_atomic
from .ms_acm import ATTRIBUTE_VOCAB, AttributeRecord, PromptPair, enhance_face, prompts_for

logger = logging.getLogger(__name__)

RESOLUTION = 64
MANIFEST_SCHEMA = 1
MANIFEST_NAME = "manifest.jsonl"

# mild skew so corpus bias can be shown and then corrected with overrides
DEFAULT_PRIORS: Dict[str, Tuple[float, ...]] = {
    "hair_color": (0.4, 0.3, 0.2, 0.1),
    "hair_style": (0.45, 0.3, 0.25),
    "eyebrow": (0.4, 0.6),
    "lip_color": (0.7, 0.3),
    "skin_tone": (0.5, 0.3, 0.2),
    "background": (0.6, 0.4),
    "garment_kind": (0.6, 0.4),
    "sleeve": (0.5, 0.5),
}

KEYPOINT_NAMES = (
    "head", "neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist",
    "mid_hip", "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
)
LIMBS: Tuple[Tuple[str, str], ...] = (
    ("neck", "l_shoulder"), ("neck", "r_shoulder"), ("neck", "mid_hip"),
    ("mid_hip", "l_hip"), ("mid_hip", "r_hip"),
    ("l_shoulder", "l_elbow"), ("l_elbow", "l_wrist"),
    ("r_shoulder", "r_elbow"), ("r_elbow", "r_wrist"),
    ("l_hip", "l_knee"), ("l_knee", "l_ankle"),
    ("r_hip", "r_knee"), ("r_knee", "r_ankle"),
    ("neck", "head"),
)
# shoulder line, spine and hip line
TORSO_LIMBS = (0, 1, 2, 3, 4)
LIMB_THICKNESS = 2
BODY_THICKNESS = 3
SLEEVE_THICKNESS = 5

Keypoints = Dict[str, Tuple[int, int]]


@dataclass
class SampleRecord:
    """
    One corpus item. Images are float32 CHW in [0, 1] on the 8-bit grid,
    `mask` is a float32 (H, W) array of 0/1.
    """
    sample_id: str
    seed: int
    image: np.ndarray
    garment: np.ndarray
    mask: np.ndarray
    pose: np.ndarray
    face: np.ndarray
    face_bbox: Tuple[int, int, int, int]
    keypoints: Keypoints
    attrs: AttributeRecord
    prompts: PromptPair
    garment_pattern: str = "stripes"

    def manifest_entry(self, paths: Mapping[str, str]) -> dict:
        return {
            "schema": MANIFEST_SCHEMA,
            "id": self.sample_id,
            "seed": int(self.seed),
            **paths,
            "face_bbox": [int(v) for v in self.face_bbox],
            "keypoints": {k: [int(x), int(y)] for k, (x, y) in self.keypoints.items()},
            "attrs": self.attrs.to_dict(),
            "prompts": self.prompts.to_dict(),
            "garment_pattern": self.garment_pattern,
        }


# ------------------------------------------------------------------ drawing

def _pt(p) -> Tuple[int, int]:
    return int(round(p[0])), int(round(p[1]))


def _offset(origin, length: float, angle_deg: float, side: int):
    """Point `length` away from origin, `angle_deg` off straight down, towards `side` (-1 left, +1 right)."""
    a = math.radians(angle_deg)
    return origin[0] + side * length * math.sin(a), origin[1] + length * math.cos(a)


def _sample_skeleton(rng: np.random.Generator) -> Keypoints:
    cx = int(rng.integers(15, 50))
    sy = int(rng.integers(20, 24))
    s = float(rng.uniform(0.9, 1.05))
    hip_y = sy + 17 * s
    pts = {
        "head": (cx, sy - palette.HEAD_RADIUS - 1),
        "neck": (cx, sy),
        "l_shoulder": (cx - 6 * s, sy),
        "r_shoulder": (cx + 6 * s, sy),
        "mid_hip": (cx, hip_y),
        "l_hip": (cx - 4 * s, hip_y),
        "r_hip": (cx + 4 * s, hip_y),
    }
    for side, name in ((-1, "l"), (1, "r")):
        upper = float(rng.uniform(5.0, 35.0))
        fore = float(rng.uniform(0.0, 40.0))
        thigh = float(rng.uniform(0.0, 20.0))
        shin = float(rng.uniform(-5.0, 15.0))
        pts[f"{name}_elbow"] = _offset(pts[f"{name}_shoulder"], 9 * s, upper, side)
        pts[f"{name}_wrist"] = _offset(pts[f"{name}_elbow"], 8 * s, fore, side)
        pts[f"{name}_knee"] = _offset(pts[f"{name}_hip"], 10 * s, thigh, side)
        pts[f"{name}_ankle"] = _offset(pts[f"{name}_knee"], 10 * s, shin, side)
    hi = RESOLUTION - 1
    return {k: (min(max(_pt(pts[k])[0], 0), hi), min(max(_pt(pts[k])[1], 0), hi)) for k in KEYPOINT_NAMES}


def _background(kind: str) -> np.ndarray:
    canvas = np.empty((RESOLUTION, RESOLUTION, 3), np.uint8)
    if kind == "plain":
        canvas[:] = palette.to_u8(palette.BACKGROUND_PLAIN)
        return canvas
    top, bottom = (np.asarray(c) for c in palette.BACKGROUND_GRADIENT)
    ramp = np.linspace(0.0, 1.0, RESOLUTION)[:, None]
    rows = top[None] * (1.0 - ramp) + bottom[None] * ramp
    canvas[:] = np.round(rows * 255.0).astype(np.uint8)[:, None, :]
    return canvas


def _garment_colors(rng: np.random.Generator) -> Tuple[Tuple[int, int, int], Tuple[int, int, int]]:
    skins = np.asarray(list(palette.SKIN_TONES.values()))
    picked = []
    while len(picked) < 2:
        c = rng.uniform(0.05, 0.95, 3)
        if np.linalg.norm(skins - c, axis=1).min() < palette.GARMENT_SKIN_MARGIN:
            continue
        if picked and np.linalg.norm(np.asarray(picked[0]) - c) < 0.3:
            continue
        picked.append(tuple(float(v) for v in c))
    return palette.to_u8(picked[0]), palette.to_u8(picked[1])


def _garment_mask(kp: Keypoints, attrs: AttributeRecord) -> np.ndarray:
    mask = np.zeros((RESOLUTION, RESOLUTION), np.uint8)
    (lsx, sy), (rsx, _) = kp["l_shoulder"], kp["r_shoulder"]
    (lhx, hy), (rhx, _) = kp["l_hip"], kp["r_hip"]
    poly = [(lsx - 2, sy - 1), (rsx + 2, sy - 1), (rhx + 2, hy)]
    if attrs.garment_kind == "dress":
        hem = min(hy + 12, RESOLUTION - 1)
        poly += [(rhx + 7, hem), (lhx - 7, hem)]
    poly += [(lhx - 2, hy)]
    cv2.fillPoly(mask, [np.array(poly, np.int32)], 1, lineType=cv2.LINE_8)
    for side in ("l", "r"):
        cv2.line(mask, kp[f"{side}_shoulder"], kp[f"{side}_elbow"], 1, SLEEVE_THICKNESS, cv2.LINE_8)
        if attrs.sleeve == "long":
            cv2.line(mask, kp[f"{side}_elbow"], kp[f"{side}_wrist"], 1, SLEEVE_THICKNESS, cv2.LINE_8)
    return mask.astype(bool)


def _pattern(kind: str, phase: int) -> np.ndarray:
    yy, xx = np.mgrid[0:RESOLUTION, 0:RESOLUTION]
    if kind == "stripes":
        return ((yy + phase) // 2) % 2 == 0
    return ((yy + phase) % 4 == 1) & ((xx + phase) % 4 == 1)


def _head_masks(cx: int, cy: int, attrs: AttributeRecord) -> Dict[str, np.ndarray]:
    yy, xx = np.mgrid[0:RESOLUTION, 0:RESOLUTION]
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    head = d2 <= palette.HEAD_RADIUS ** 2
    hair = (d2 <= palette.HAIR_CAP_RADIUS ** 2) & (yy <= cy + palette.HAIR_CAP_BOTTOM)

    rows = palette.EYEBROW_ROWS_THICK if attrs.eyebrow == "thick" else palette.EYEBROW_ROWS_THIN
    brows = np.zeros_like(head)
    for dy in rows:
        for x0, x1 in palette.EYEBROW_SPANS:
            brows[cy + dy, cx + x0:cx + x1 + 1] = True

    lips = np.zeros_like(head)
    for dy in palette.LIP_ROWS:
        lips[cy + dy, cx + palette.LIP_SPAN[0]:cx + palette.LIP_SPAN[1] + 1] = True

    if attrs.hair_style != "short":
        base = palette.HEAD_RADIUS + 1
        for k in range(palette.STRAND_ROWS):
            off = base + ((k // 2) % 2 if attrs.hair_style == "wavy" else 0)
            hair[cy + k, cx - off] = True
            hair[cy + k, cx + off] = True
    return {"head": head, "hair": hair, "brows": brows, "lips": lips}


def render_pose_map(keypoints: Keypoints, size: int = RESOLUTION) -> np.ndarray:
    """Colour-coded skeleton on black, (3, size, size) float32."""
    canvas = np.zeros((size, size, 3), np.uint8)
    colors = palette.limb_colors()
    for (a, b), color in zip(LIMBS, colors):
        cv2.line(canvas, keypoints[a], keypoints[b], palette.to_u8(color), LIMB_THICKNESS, cv2.LINE_8)
    return from_uint8(canvas)


def sample_attributes(rng: np.random.Generator,
                      priors: Optional[Mapping[str, Sequence[float]]] = None) -> AttributeRecord:
    priors = {**DEFAULT_PRIORS, **(priors or {})}
    values = {}
    for name, vocab in ATTRIBUTE_VOCAB.items():
        p = np.asarray(priors[name], dtype=np.float64)
        values[name] = vocab[int(rng.choice(len(vocab), p=p / p.sum()))]
    return AttributeRecord(**values)


def generate_sample(seed: int, overrides: Optional[Mapping[str, str]] = None,
                    sample_id: Optional[str] = None,
                    priors: Optional[Mapping[str, Sequence[float]]] = None) -> SampleRecord:
    """
    Render one sample from a seed.

    Args:
        seed: random seed; equal seeds give identical records
        overrides: attribute overrides (e.g. {"lip_color": "red"}); layout draws are unchanged
        sample_id: record id (derived from the seed when omitted)
        priors: per-attribute prior probabilities

    Returns:
        SampleRecord
    """
    rng = np.random.default_rng(seed)
    attrs = sample_attributes(rng, priors)
    if overrides:
        attrs = attrs.with_overrides(**overrides)
    kp = _sample_skeleton(rng)
    base_color, accent_color = _garment_colors(rng)
    pattern_kind = "stripes" if rng.random() < 0.5 else "dots"
    phase = int(rng.integers(0, 4))

    canvas = _background(attrs.background)
    skin = palette.to_u8(palette.SKIN_TONES[attrs.skin_tone])
    for side in ("l", "r"):
        cv2.line(canvas, kp[f"{side}_hip"], kp[f"{side}_knee"], skin, BODY_THICKNESS, cv2.LINE_8)
        cv2.line(canvas, kp[f"{side}_knee"], kp[f"{side}_ankle"], skin, BODY_THICKNESS, cv2.LINE_8)
    for side in ("l", "r"):
        cv2.line(canvas, kp[f"{side}_shoulder"], kp[f"{side}_elbow"], skin, BODY_THICKNESS, cv2.LINE_8)
        cv2.line(canvas, kp[f"{side}_elbow"], kp[f"{side}_wrist"], skin, BODY_THICKNESS, cv2.LINE_8)

    garment_mask = _garment_mask(kp, attrs)
    canvas[garment_mask] = base_color
    canvas[garment_mask & _pattern(pattern_kind, phase)] = accent_color

    cx, cy = kp["head"]
    parts = _head_masks(cx, cy, attrs)
    canvas[parts["head"]] = skin
    canvas[parts["hair"]] = palette.to_u8(palette.HAIR_COLORS[attrs.hair_color])
    canvas[parts["brows"]] = palette.to_u8(palette.EYEBROW_COLOR)
    canvas[parts["lips"]] = palette.to_u8(palette.LIP_COLORS[attrs.lip_color])
    garment_mask &= ~(parts["head"] | parts["hair"])

    image = from_uint8(canvas)
    mask = garment_mask.astype(np.float32)
    bbox = palette.face_bbox(cx, cy)
    return SampleRecord(
        sample_id=sample_id or f"s{seed}",
        seed=int(seed),
        image=image,
        garment=image * mask[None],
        mask=mask,
        pose=render_pose_map(kp),
        face=quantize(enhance_face(image, bbox)),
        face_bbox=bbox,
        keypoints=kp,
        attrs=attrs,
        prompts=prompts_for(attrs),
        garment_pattern=pattern_kind,
    )


# ------------------------------------------------------------ attribute oracle

def _mean_color(hwc: np.ndarray, points: Sequence[Tuple[int, int]]) -> np.ndarray:
    return np.mean([hwc[y, x] for x, y in points], axis=0)


def _near(hwc: np.ndarray, x: int, y: int, color) -> bool:
    return float(np.linalg.norm(hwc[y, x] - np.asarray(color))) < palette.MATCH_THRESHOLD


def classify_face_attributes(img, bbox: Sequence[int]) -> Dict[str, str]:
    """
    Read the five face attributes back from a render.

    Skin, hair and lip colours are matched against their palettes at fixed
    sampling points; eyebrow thickness is the number of dark rows over the
    brow span; hair style comes from the strand columns beside the head.
    Raises UnreadableRegionError when a colour is off-palette or the box is
    too small.
    """
    arr = np.asarray(img.detach().cpu() if isinstance(img, torch.Tensor) else img, dtype=np.float64)
    hwc = np.transpose(arr, (1, 2, 0))
    h, w = hwc.shape[:2]
    x0, y0, x1, y1 = (int(v) for v in bbox)
    if min(x1 - x0, y1 - y0) < palette.MIN_FACE_BOX:
        raise UnreadableRegionError(f"unreadable region: face box {tuple(bbox)} too small to sample")
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        raise UnreadableRegionError(f"unreadable region: face box {tuple(bbox)} outside the image")
    cx, cy = palette.face_center(bbox)

    skin = palette.read_palette(_mean_color(hwc, [(cx - 4, cy + 1), (cx + 4, cy + 1), (cx, cy)]),
                                palette.SKIN_TONES, "skin")
    hair_color = palette.read_palette(_mean_color(hwc, [(cx - 3, cy - 6), (cx, cy - 6), (cx + 3, cy - 6)]),
                                      palette.HAIR_COLORS, "hair")
    lip_points = [(cx + dx, cy + dy) for dy in palette.LIP_ROWS for dx in (-1, 0, 1)]
    lips = palette.read_palette(_mean_color(hwc, lip_points), palette.LIP_COLORS, "lips")

    brow_rows = sum(
        1 for dy in palette.EYEBROW_ROWS_THICK
        if _near(hwc, cx - 3, cy + dy, palette.EYEBROW_COLOR) and _near(hwc, cx + 3, cy + dy, palette.EYEBROW_COLOR)
    )
    if brow_rows == 0:
        raise UnreadableRegionError("unreadable region: no eyebrow strokes found")
    eyebrow = "thick" if brow_rows >= 2 else "thin"

    hair_rgb = palette.HAIR_COLORS[hair_color]
    inner = outer = 0
    for k in range(palette.STRAND_ROWS):
        for sign in (-1, 1):
            inner += _near(hwc, cx + sign * (palette.HEAD_RADIUS + 1), cy + k, hair_rgb)
            outer += _near(hwc, cx + sign * (palette.HEAD_RADIUS + 2), cy + k, hair_rgb)
    if inner + outer < 4:
        style = "short"
    elif outer >= 3:
        style = "wavy"
    else:
        style = "straight"

    return {"hair_color": hair_color, "hair_style": style, "eyebrow": eyebrow,
            "lip_color": lips, "skin_tone": skin}


# ---------------------------------------------------------------- datasets

_IMAGE_KEYS = ("image", "garment", "mask", "pose", "face")
_IMAGE_DIRS = {"image": "images", "garment": "garments", "mask": "masks", "pose": "poses", "face": "faces"}


def num_workers(requested: Optional[int] = None) -> int:
    """Worker count capped by GCO_NUM_THREADS."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("GCO_NUM_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def sample_seeds(n: int, seed: int) -> List[int]:
    """Independent per-sample seeds spawned from the root seed."""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(n)]


def _write_record(record: SampleRecord, out_dir: Path) -> dict:
    paths = {}
    for key in _IMAGE_KEYS:
        rel = Path(_IMAGE_DIRS[key]) / f"{record.sample_id}.png"
        save_png(getattr(record, key), out_dir / rel)
        paths[key] = rel.as_posix()
    return record.manifest_entry(paths)


def generate_dataset(n: int, seed: int, out_dir: Union[str, Path],
                     priors: Optional[Mapping[str, Sequence[float]]] = None,
                     workers: Optional[int] = None) -> Path:
    """
    Write n samples as PNG files plus a JSONL manifest.

    Args:
        n: number of samples (at least 1)
        seed: root seed
        out_dir: output directory
        workers: parallel workers (capped by GCO_NUM_THREADS)

    Returns:
        Path of the manifest
    """
    if n < 1:
        raise GcoError(f"dataset size must be >= 1, got {n}")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for sub in _IMAGE_DIRS.values():
            (out_dir / sub).mkdir(exist_ok=True)
    except OSError as e:
        raise GcoError(f"cannot write dataset to {out_dir}: {e}") from e

    seeds = sample_seeds(n, seed)

    def build(i: int) -> dict:
        record = generate_sample(seeds[i], sample_id=f"{i:05d}", priors=priors)
        return _write_record(record, out_dir)

    n_workers = num_workers(workers)
    logger.info(f"generating {n} samples into {out_dir} with {n_workers} worker(s)")
    try:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            entries = list(tqdm(pool.map(build, range(n)), total=n, desc="  Samples", ncols=80))
    except OSError as e:
        raise GcoError(f"cannot write dataset to {out_dir}: {e}") from e

    manifest = out_dir / MANIFEST_NAME
    lines = "".join(json.dumps(entry, sort_keys=True) + "\n" for entry in entries)
    write_atomic(manifest, lines.encode("utf-8"))
    logger.info(f"manifest written: {manifest} ({n} records)")
    return manifest


def _record_from_entry(entry: dict, root: Path) -> SampleRecord:
    if entry.get("schema") != MANIFEST_SCHEMA:
        raise SchemaMismatchError(f"manifest schema {entry.get('schema')!r}, expected {MANIFEST_SCHEMA}")
    images = {key: load_png(root / entry[key], grayscale=(key == "mask")) for key in _IMAGE_KEYS}
    attrs = AttributeRecord.from_dict(entry["attrs"])
    return SampleRecord(
        sample_id=entry["id"],
        seed=int(entry["seed"]),
        face_bbox=tuple(entry["face_bbox"]),
        keypoints={k: tuple(v) for k, v in entry["keypoints"].items()},
        attrs=attrs,
        prompts=PromptPair(**entry["prompts"]),
        garment_pattern=entry.get("garment_pattern", "stripes"),
        **images,
    )


def load_manifest(path: Union[str, Path], limit: Optional[int] = None) -> List[SampleRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise GcoError(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(_record_from_entry(json.loads(line), path.parent))
            if limit is not None and len(records) >= limit:
                break
    logger.info(f"loaded {len(records)} records from {path}")
    return records


class RecordSource(Protocol):
    """Anything that can yield SampleRecords (manifest, in-memory generator, future photo loaders)."""

    def __len__(self) -> int: ...

    def __iter__(self) -> Iterator[SampleRecord]: ...


@dataclass
class GeneratedSource:
    """Records generated on the fly from a root seed."""
    n: int
    seed: int
    priors: Optional[Dict[str, Tuple[float, ...]]] = None
    _seeds: List[int] = field(init=False, repr=False)

    def __post_init__(self):
        self._seeds = sample_seeds(self.n, self.seed)

    def __len__(self) -> int:
        return self.n

    def __iter__(self) -> Iterator[SampleRecord]:
        for i, s in enumerate(self._seeds):
            yield generate_sample(s, sample_id=f"{i:05d}", priors=self.priors)


class SampleDataset(Dataset):
    """torch Dataset over SampleRecords; items are dicts of float32 tensors."""

    def __init__(self, source: Union[RecordSource, Sequence[SampleRecord]]):
        self.records: List[SampleRecord] = list(source)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, idx: int) -> Dict[str, torch.Tensor]:
        r = self.records[idx]
        return {key: torch.from_numpy(np.ascontiguousarray(getattr(r, key))) for key in _IMAGE_KEYS}

    def stacked(self, key: str) -> torch.Tensor:
        return torch.stack([torch.from_numpy(np.ascontiguousarray(getattr(r, key))) for r in self.records])
