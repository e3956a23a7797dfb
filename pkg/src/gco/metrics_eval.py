"""
Evaluation metrics: region-masked SSIM, a random-feature perceptual distance,
attribute adherence through the corpus oracle, and the fused-vs-adapter
efficiency audit.
"""

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .denoiser_net import UNetDenoiser, count_params
from .errors import LayoutError, ShapeError, UnreadableRegionError
from .ms_acm import FACE_FIELDS, FACE_RESOLUTION, AttributeRecord, enhance_face
from .outpaint_stage import ADAPTER, FUSED, OutpaintCheckpoint, aligned_channels
from .synth_data import classify_face_attributes

logger = logging.getLogger(__name__)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_SIGMA = 1.5
RF_SEED = 20240917
RF_LAYERS = ((3, 16, 1), (16, 32, 2), (32, 64, 2))


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    arr = np.asarray(x, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


def ssim_map(a, b, window: int = 11, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Per-pixel SSIM (H, W), averaged over channels; Gaussian window of `window` taps."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ShapeError(f"ssim inputs differ in shape: {x.shape} vs {y.shape}")
    truncate = ((window - 1) / 2) / sigma

    def blur(v):
        return ndimage.gaussian_filter(v, sigma, mode="reflect", truncate=truncate)

    maps = []
    for xc, yc in zip(x, y):
        mx, my = blur(xc), blur(yc)
        sxx = blur(xc * xc) - mx * mx
        syy = blur(yc * yc) - my * my
        sxy = blur(xc * yc) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        maps.append(num / den)
    return np.mean(maps, axis=0)


def ssim(a, b, window: int = 11, region_mask=None) -> float:
    """
    SSIM on [0,1] images (C1=0.01², C2=0.03²). With `region_mask`, the map is
    averaged over the masked window centres only.
    """
    m = ssim_map(a, b, window)
    if region_mask is None:
        return float(m.mean())
    mask = _as_array(region_mask)[0] > 0.5
    if mask.shape != m.shape:
        raise ShapeError(f"region mask {mask.shape} does not match image {m.shape}")
    if not mask.any():
        raise ShapeError("region mask is empty")
    return float(m[mask].mean())


def clo_ssim(generated, garment, mask) -> float:
    """SSIM of the garment-masked generation against the garment image, over the mask."""
    g = _as_array(generated) * (_as_array(mask)[0] > 0.5)
    return ssim(g, garment, region_mask=mask)


@lru_cache(maxsize=4)
def _rf_weights(seed: int) -> Tuple[Tuple[torch.Tensor, torch.Tensor, int], ...]:
    rng = np.random.default_rng(seed)
    layers = []
    for c_in, c_out, stride in RF_LAYERS:
        w = rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (c_in * 9))
        b = rng.standard_normal(c_out) * 0.01
        layers.append((torch.from_numpy(w), torch.from_numpy(b), stride))
    return tuple(layers)


def rf_features(img, seed: int = RF_SEED) -> List[torch.Tensor]:
    """Channel-normalised feature maps of the fixed random conv pyramid (float64)."""
    x = torch.from_numpy(_as_array(img)).unsqueeze(0)
    if x.shape[1] != 3:
        raise ShapeError(f"rf_perceptual expects 3-channel images, got {x.shape[1]}")
    feats = []
    for w, b, stride in _rf_weights(seed):
        x = F.relu(F.conv2d(x, w, b, stride=stride, padding=1))
        feats.append(x / (x.norm(dim=1, keepdim=True) + 1e-10))
    return feats


def rf_perceptual(a, b, region_mask=None, seed: int = RF_SEED) -> float:
    """
    Random-feature perceptual distance: mean squared difference of unit-normalised
    features, averaged over the three layers. Zero for identical inputs, symmetric.
    """
    if _as_array(a).shape != _as_array(b).shape:
        raise ShapeError(f"rf_perceptual inputs differ in shape: {_as_array(a).shape} vs {_as_array(b).shape}")
    mask = None
    if region_mask is not None:
        mask = torch.from_numpy((_as_array(region_mask)[0] > 0.5).astype(np.float64))[None, None]
        if not bool(mask.any()):
            raise ShapeError("region mask is empty")
    total = 0.0
    fa, fb = rf_features(a, seed), rf_features(b, seed)
    for xa, xb in zip(fa, fb):
        diff = ((xa - xb) ** 2).mean(dim=1)[0]
        if mask is None:
            total += float(diff.mean())
            continue
        m = F.interpolate(mask, size=diff.shape, mode="area")[0, 0] > 0
        total += float(diff[m].mean())
    return total / len(fa)


def face_rf_perceptual(generated, reference_face, bbox) -> float:
    """rf_perceptual between the enhanced face crop of a generation and a reference face crop."""
    crop = enhance_face(_as_array(generated).astype(np.float32), bbox, FACE_RESOLUTION)
    return rf_perceptual(crop, reference_face)


# --------------------------------------------------------------- adherence

@dataclass
class AdherenceReport:
    requested: Dict[str, str]
    predicted: Optional[Dict[str, str]]
    matches: Dict[str, bool]
    unreadable: bool = False
    reason: str = ""

    @property
    def accuracy(self) -> float:
        return sum(self.matches.values()) / len(self.matches)

    def to_dict(self) -> dict:
        return {**asdict(self), "accuracy": self.accuracy}


def attribute_adherence(generated, face_bbox, requested: AttributeRecord) -> AdherenceReport:
    """Classify the generated face and compare each face attribute with the request."""
    want = {k: getattr(requested, k) for k in FACE_FIELDS}
    try:
        got = classify_face_attributes(generated, face_bbox)
    except UnreadableRegionError as e:
        logger.debug(f"adherence: {e}")
        return AdherenceReport(want, None, {k: False for k in FACE_FIELDS}, True, str(e))
    return AdherenceReport(want, got, {k: got[k] == want[k] for k in FACE_FIELDS})


def aggregate_adherence(reports: Sequence[AdherenceReport],
                        fields: Optional[Sequence[str]] = None) -> Dict[str, float]:
    """Per-attribute accuracy over reports plus 'overall' and 'unreadable' rates."""
    fields = list(fields or FACE_FIELDS)
    if not reports:
        return {k: 0.0 for k in fields + ["overall", "unreadable"]}
    out = {k: float(np.mean([r.matches[k] for r in reports])) for k in fields}
    out["overall"] = float(np.mean([out[k] for k in fields]))
    out["unreadable"] = float(np.mean([r.unreadable for r in reports]))
    return out


# -------------------------------------------------------------- efficiency

@dataclass
class EfficiencyReport:
    backbone_params: int
    fused_params: int
    adapter_params: int
    fused_delta: int
    adapter_delta: int
    expected_fused_delta: int
    delta_ratio: float
    fused_step_ms: float
    adapter_step_ms: float
    batch_size: int
    timing_steps: int
    backbone: Dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EfficiencyReport":
        return cls(**json.loads(text))


def median_forward_ms(fn: Callable[[], torch.Tensor], steps: int = 100, warmup: int = 3) -> float:
    with torch.no_grad():
        for _ in range(warmup):
            fn()
        times = []
        for _ in range(steps):
            start = time.perf_counter()
            fn()
            times.append((time.perf_counter() - start) * 1000.0)
    return float(np.median(times))


def efficiency_audit(fused: OutpaintCheckpoint, adapter: OutpaintCheckpoint, latent_hw: Tuple[int, int] = (16, 16),
                     factor: int = 4, batch_size: int = 8, steps: int = 100, seed: int = 0) -> EfficiencyReport:
    """
    Compare parameter counts and per-step forward time of the two stage-2 variants.

    Args:
        fused: fused-channel outpainter
        adapter: adapter baseline on the same backbone
        latent_hw: latent (h, w)
        factor: codec downsample factor, sets the face column width
        steps: timed forward passes (the median is reported)

    Returns:
        EfficiencyReport
    """
    if fused.kind != FUSED or adapter.kind != ADAPTER:
        raise LayoutError(f"expected a fused and an adapter checkpoint, got {fused.kind}/{adapter.kind}")
    if fused.backbone_config != adapter.backbone_config:
        raise LayoutError("fused and adapter checkpoints are built on different backbones")
    cfg = fused.backbone_config
    with torch.random.fork_rng(devices=[]):
        backbone_params = count_params(UNetDenoiser(cfg))
    fused_params = count_params(fused)
    adapter_params = count_params(adapter)
    widened = fused.model.unet.config.in_channels - cfg.in_channels
    expected = widened * cfg.base_width * cfg.kernel_size ** 2

    c, (h, w) = cfg.out_channels, latent_hw
    fw = FACE_RESOLUTION // factor
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn((batch_size, c, h, w), generator=gen)
    aligned = torch.randn((batch_size, aligned_channels(c), h, w), generator=gen)
    face_latent = torch.randn((batch_size, c, h, fw), generator=gen)
    face_image = torch.rand((batch_size, 3, FACE_RESOLUTION, FACE_RESOLUTION), generator=gen)
    ctx = torch.randn((batch_size, fused.text_encoder.config.max_len, cfg.context_dim), generator=gen)
    t = torch.full((batch_size,), 10)

    fused_model, adapter_model = fused.model.eval(), adapter.model.eval()
    fused_ms = median_forward_ms(lambda: fused_model(z, t, aligned, face_latent, None, ctx), steps)
    adapter_ms = median_forward_ms(lambda: adapter_model(z, t, aligned, None, face_image, ctx), steps)

    fused_delta = fused_params - backbone_params
    adapter_delta = adapter_params - backbone_params
    report = EfficiencyReport(
        backbone_params=backbone_params,
        fused_params=fused_params,
        adapter_params=adapter_params,
        fused_delta=fused_delta,
        adapter_delta=adapter_delta,
        expected_fused_delta=expected,
        delta_ratio=adapter_delta / fused_delta if fused_delta else float("inf"),
        fused_step_ms=fused_ms,
        adapter_step_ms=adapter_ms,
        batch_size=batch_size,
        timing_steps=steps,
        backbone=cfg.to_dict(),
    )
    logger.info(f"audit: fused +{fused_delta} params ({fused_ms:.2f} ms/step), "
                f"adapter +{adapter_delta} params ({adapter_ms:.2f} ms/step), ratio {report.delta_ratio:.1f}")
    return report
