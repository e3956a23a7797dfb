"""
Multi-scale appearance customization.

Coarse showcase prompt + fine-grained face prompt, stitching, a closed
word-level tokenizer, the small text encoder trained with the outpainter,
and the face-enhancer chain (square crop -> bicubic upsample -> unsharp mask).
"""

import logging
import re
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
import torch.nn as nn

from . import palette
from .denoiser_net import MultiHeadAttention
from .errors import AttributeValueError, ShapeError, UnreadableRegionError

logger = logging.getLogger(__name__)

# 属性ごとの閉じた語彙
FACE_VOCAB: Dict[str, Tuple[str, ...]] = {
    "hair_color": ("black", "brown", "blond", "red"),
    "hair_style": ("straight", "wavy", "short"),
    "eyebrow": ("thick", "thin"),
    "lip_color": ("natural", "red"),
    "skin_tone": ("light", "tan", "dark"),
}
SCENE_VOCAB: Dict[str, Tuple[str, ...]] = {
    "background": ("plain", "gradient"),
    "garment_kind": ("top", "dress"),
    "sleeve": ("long", "short"),
}
ATTRIBUTE_VOCAB = {**FACE_VOCAB, **SCENE_VOCAB}
FACE_FIELDS = tuple(FACE_VOCAB)

EMPTY_PROMPT = ""
SEPARATOR = ", "
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

SHOWCASE_TEMPLATE = "a model wearing a {sleeve}-sleeve {garment_kind} on a {background} background"
FACE_TEMPLATE = "{hair_style} {hair_color} hair, {eyebrow} eyebrows, {lip_color} lips, {skin_tone} skin"


@dataclass(frozen=True)
class AttributeRecord:
    hair_color: str = "black"
    hair_style: str = "straight"
    eyebrow: str = "thin"
    lip_color: str = "natural"
    skin_tone: str = "light"
    background: str = "plain"
    garment_kind: str = "top"
    sleeve: str = "long"

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value not in ATTRIBUTE_VOCAB[f.name]:
                raise AttributeValueError(
                    f"{f.name}={value!r} not in {ATTRIBUTE_VOCAB[f.name]}")

    def to_dict(self) -> Dict[str, str]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, str]) -> "AttributeRecord":
        unknown = set(data) - set(ATTRIBUTE_VOCAB)
        if unknown:
            raise AttributeValueError(f"unknown attribute fields: {sorted(unknown)}")
        return cls(**data)

    def with_overrides(self, **overrides) -> "AttributeRecord":
        return AttributeRecord.from_dict({**self.to_dict(), **overrides})


def describe_showcase(attrs: AttributeRecord) -> str:
    """Coarse prompt T_c for the whole showcase."""
    return SHOWCASE_TEMPLATE.format(**attrs.to_dict())


def describe_face(attrs: AttributeRecord) -> str:
    """Fine-grained prompt T_f from the face attributes."""
    return FACE_TEMPLATE.format(**attrs.to_dict())


@dataclass(frozen=True)
class PromptPair:
    coarse: str
    fine: str
    stitched: str

    def to_dict(self) -> Dict[str, str]:
        return asdict(self)


def stitch_prompts(coarse: str, fine: str) -> PromptPair:
    """coarse + ", " + fine; an empty component is dropped with its separator."""
    parts = [p for p in (coarse, fine) if p != EMPTY_PROMPT]
    return PromptPair(coarse, fine, SEPARATOR.join(parts))


def prompts_for(attrs: AttributeRecord) -> PromptPair:
    return stitch_prompts(describe_showcase(attrs), describe_face(attrs))


def apply_prompt_dropout(pair: PromptPair, rng: np.random.Generator,
                         fine_drop: float = 0.1, full_drop: float = 0.1,
                         keep_coarse: bool = True, keep_fine: bool = True) -> str:
    """
    Training-time prompt for classifier-free guidance.

    T_f is replaced by ∅ with probability `fine_drop`; independently the whole
    prompt becomes ∅ with probability `full_drop`. keep_coarse/keep_fine=False
    remove a component permanently (ablations). Both draws are always taken so
    the stream stays aligned across settings.
    """
    drop_fine = rng.random() < fine_drop
    drop_all = rng.random() < full_drop
    if drop_all:
        return EMPTY_PROMPT
    coarse = pair.coarse if keep_coarse else EMPTY_PROMPT
    fine = pair.fine if keep_fine and not drop_fine else EMPTY_PROMPT
    return stitch_prompts(coarse, fine).stitched


# ---------------------------------------------------------------- tokenizer

_TOKEN_RE = re.compile(r"[a-z]+(?:-[a-z]+)?|,")


def _template_words() -> List[str]:
    words: List[str] = []
    for template in (SHOWCASE_TEMPLATE, FACE_TEMPLATE):
        for chunk in re.split(r"(\{[a-z_]+\})", template):
            if chunk.startswith("{"):
                continue
            words += _TOKEN_RE.findall(chunk)
    for sleeve in SCENE_VOCAB["sleeve"]:
        words.append(f"{sleeve}-sleeve")
    for name, values in ATTRIBUTE_VOCAB.items():
        if name != "sleeve":
            words += list(values)
    return words


def build_vocabulary() -> List[str]:
    """Closed vocabulary: special tokens then template words in first-seen order."""
    vocab = [PAD_TOKEN, UNK_TOKEN]
    for word in _template_words():
        if word not in vocab:
            vocab.append(word)
    return vocab


VOCABULARY = build_vocabulary()
_INDEX = {w: i for i, w in enumerate(VOCABULARY)}
PAD_ID = _INDEX[PAD_TOKEN]
UNK_ID = _INDEX[UNK_TOKEN]


def tokenize(prompt: str) -> List[int]:
    words = _TOKEN_RE.findall(prompt.lower())
    unknown = [w for w in words if w not in _INDEX]
    if unknown:
        logger.warning(f"unknown prompt words mapped to {UNK_TOKEN}: {unknown}")
    return [_INDEX.get(w, UNK_ID) for w in words]


def detokenize(ids: Iterable[int]) -> str:
    words = [VOCABULARY[i] for i in ids if i != PAD_ID]
    return " ".join(words).replace(" ,", ",")


# ------------------------------------------------------------- text encoder

@dataclass(frozen=True)
class TextEncoderConfig:
    context_dim: int = 64
    layers: int = 2
    heads: int = 4
    max_len: int = 32
    vocab_size: int = len(VOCABULARY)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TextEmbedding:
    """Token ids (padded to max_len), their embeddings and the padding mask."""
    tokens: torch.Tensor
    embeddings: torch.Tensor
    pad_mask: torch.Tensor
    truncated: bool = False


class _EncoderLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, None, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = nn.Sequential(nn.Linear(dim, 2 * dim), nn.SiLU(), nn.Linear(2 * dim, dim))

    def forward(self, x, pad_mask):
        x = x + self.attn(self.norm1(x), None, pad_mask)
        return x + self.ff(self.norm2(x))


class TextEncoder(nn.Module):
    """Token lookup + learned positions + a small pre-norm self-attention stack."""

    def __init__(self, config: TextEncoderConfig):
        super().__init__()
        self.config = config
        self.token_emb = nn.Embedding(config.vocab_size, config.context_dim)
        self.pos_emb = nn.Parameter(torch.randn(config.max_len, config.context_dim) * 0.02)
        self.layers = nn.ModuleList(_EncoderLayer(config.context_dim, config.heads)
                                    for _ in range(config.layers))
        self.norm = nn.LayerNorm(config.context_dim)

    def token_ids(self, prompts: Sequence[str]) -> Tuple[torch.Tensor, List[bool]]:
        max_len = self.config.max_len
        rows, truncated = [], []
        for p in prompts:
            ids = tokenize(p)
            if len(ids) > max_len:
                logger.warning(f"prompt truncated from {len(ids)} to {max_len} tokens: {p!r}")
                ids = ids[:max_len]
                truncated.append(True)
            else:
                truncated.append(False)
            rows.append(ids + [PAD_ID] * (max_len - len(ids)))
        return torch.tensor(rows, dtype=torch.long), truncated

    def forward(self, tokens: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        pad_mask = tokens == PAD_ID
        x = self.token_emb(tokens) + self.pos_emb[: tokens.shape[1]]
        for layer in self.layers:
            x = layer(x, pad_mask)
        return self.norm(x), pad_mask

    def encode_batch(self, prompts: Sequence[str]) -> TextEmbedding:
        device = self.pos_emb.device
        tokens, truncated = self.token_ids(prompts)
        tokens = tokens.to(device)
        emb, mask = self(tokens)
        return TextEmbedding(tokens, emb, mask, any(truncated))


def init_text_encoder(config: TextEncoderConfig, seed: int = 0) -> TextEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TextEncoder(config)


@torch.no_grad()
def encode_text(prompt: str, encoder: TextEncoder) -> TextEmbedding:
    """Single prompt -> (max_len, context_dim) embedding; the empty prompt is all padding."""
    batch = encoder.encode_batch([prompt])
    return TextEmbedding(batch.tokens[0], batch.embeddings[0], batch.pad_mask[0], batch.truncated)


# ------------------------------------------------------------ face enhancer

FACE_RESOLUTION = 32


def square_crop_box(bbox: Sequence[int], height: int, width: int) -> Tuple[int, int, int, int]:
    """
    Grow the shorter side of (x0, y0, x1, y1) around its centre into a square,
    then shift it back inside the image.
    """
    x0, y0, x1, y1 = (int(v) for v in bbox)
    if x1 <= x0 or y1 <= y0:
        raise ShapeError(f"degenerate face bbox {tuple(bbox)}")
    if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
        raise ShapeError(f"face bbox {tuple(bbox)} outside a {width}x{height} image")
    side = min(max(x1 - x0, y1 - y0), height, width)
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    nx0 = int(round(cx - side / 2.0))
    ny0 = int(round(cy - side / 2.0))
    nx0 = min(max(nx0, 0), width - side)
    ny0 = min(max(ny0, 0), height - side)
    return nx0, ny0, nx0 + side, ny0 + side


def restore_face(crop: np.ndarray, size: int = FACE_RESOLUTION, amount: float = 0.5,
                 sigma: float = 1.0) -> np.ndarray:
    """Restoration stub: bicubic resize to size×size then unsharp mask. CHW float in, CHW out."""
    hwc = np.ascontiguousarray(np.transpose(crop, (1, 2, 0)).astype(np.float32))
    up = cv2.resize(hwc, (size, size), interpolation=cv2.INTER_CUBIC)
    blurred = cv2.GaussianBlur(up, (0, 0), sigma)
    sharp = np.clip(up + amount * (up - blurred), 0.0, 1.0)
    return np.transpose(sharp, (2, 0, 1)).astype(np.float32)


def enhance_face(img: np.ndarray, face_bbox: Sequence[int], size: int = FACE_RESOLUTION) -> np.ndarray:
    """
    Crop the face to a square and restore it to `size`.

    Args:
        img: (3,H,W) image in [0,1]
        face_bbox: (x0, y0, x1, y1) with exclusive x1/y1
        size: output resolution

    Returns:
        (3,size,size) face image
    """
    img = np.asarray(img, dtype=np.float32)
    x0, y0, x1, y1 = square_crop_box(face_bbox, img.shape[1], img.shape[2])
    return restore_face(img[:, y0:y1, x0:x1], size)


def detect_face_bbox(img: np.ndarray, min_area: int = 40) -> Tuple[int, int, int, int]:
    """
    Rule-based face finder for corpus renders.

    Skin-coloured pixels are grouped into 4-connected components; the topmost
    component of at least `min_area` pixels is the head disc. Its column
    centroid and bottom row give the head centre.
    """
    hwc = np.transpose(np.asarray(img, dtype=np.float64), (1, 2, 0))
    skin = (palette.skin_distance(hwc) < palette.SKIN_MATCH_THRESHOLD).astype(np.uint8)
    n, _, stats, centroids = cv2.connectedComponentsWithStats(skin, connectivity=4)
    candidates = [i for i in range(1, n) if stats[i, cv2.CC_STAT_AREA] >= min_area]
    if not candidates:
        raise UnreadableRegionError("unreadable region: no skin-coloured component large enough for a face")
    head = min(candidates, key=lambda i: (stats[i, cv2.CC_STAT_TOP], -stats[i, cv2.CC_STAT_AREA]))
    cx = int(round(centroids[head][0]))
    bottom = int(stats[head, cv2.CC_STAT_TOP] + stats[head, cv2.CC_STAT_HEIGHT] - 1)
    bbox = palette.face_bbox(cx, bottom - palette.HEAD_RADIUS)
    logger.debug(f"face found at {bbox}")
    return bbox
