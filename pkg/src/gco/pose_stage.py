"""
Stage 1: garment-adaptive pose predictor.

The denoiser sees the noised pose latent channel-concatenated with the clean
garment latent and regresses the injected noise. Sampling draws several pose
maps for one garment from a seeded noise stream.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
import torch
from tqdm import tqdm

from . import palette
from .diffusion_core import NoiseSchedule, eps_mse_loss, forward_diffuse, sample_loop
from .denoiser_net import DenoiserCheckpoint, DenoiserConfig, init_denoiser
from .errors import CheckpointMismatchError, GcoError, LayoutError
from .latent_codec import LatentCodec, LatentSpace, decode, encode
from .synth_data import TORSO_LIMBS, SampleRecord
from .training import TrainConfig, dataset_hash, draw_batch, log_progress, optimizer_step, summarize

logger = logging.getLogger(__name__)

POSE_LAYOUT = ("noised pose latent", "garment latent")
Box = Tuple[int, int, int, int]


@dataclass
class PoseMap:
    image: np.ndarray
    keypoints: Optional[Dict[str, Tuple[int, int]]] = None


def pose_layout(latent_channels: int) -> List[str]:
    return [f"{name} [{latent_channels}]" for name in POSE_LAYOUT]


def check_pose_config(config: DenoiserConfig, latent_channels: int) -> None:
    if config.in_channels != 2 * latent_channels or config.out_channels != latent_channels:
        raise LayoutError(
            f"pose predictor needs in_channels = 2*{latent_channels} and out_channels = {latent_channels}, "
            f"got {config.in_channels}/{config.out_channels}")
    if config.context_dim is not None:
        raise LayoutError("pose predictor takes no text context")


def train_pose_predictor(dataset: Sequence[SampleRecord], denoiser_config: DenoiserConfig,
                         sched: NoiseSchedule, train_config: TrainConfig,
                         codec: LatentCodec) -> DenoiserCheckpoint:
    """
    Train the pose predictor.

    Args:
        dataset: records carrying a garment C and a pose P
        denoiser_config: in_channels = 2 x latent channels
        sched: noise schedule
        train_config: steps, batch size, learning rate and seed

    Returns:
        DenoiserCheckpoint with the loss history in its metadata
    """
    records = list(dataset)
    if not records:
        raise GcoError("cannot train the pose predictor on an empty dataset")
    check_pose_config(denoiser_config, codec.latent_channels)
    device = train_config.device

    garments = np.stack([r.garment for r in records])
    poses = np.stack([r.pose for r in records])
    z_c = encode(torch.from_numpy(garments), codec, LatentSpace.GARMENT).data.to(device)
    z_p = encode(torch.from_numpy(poses), codec, LatentSpace.POSE).data.to(device)

    ckpt = init_denoiser(denoiser_config, train_config.seed)
    model = ckpt.model.to(device)
    opt = torch.optim.Adam(model.parameters(), lr=train_config.lr)
    gen = torch.Generator().manual_seed(train_config.seed)

    history: List[float] = []
    model.train()
    for step in tqdm(range(train_config.steps), desc="    Pose", ncols=80):
        idx, t = draw_batch(len(records), train_config.batch_size, sched.T, gen)
        idx = idx.to(device)
        eps = torch.randn(z_p[idx].shape, generator=gen).to(device)
        z_t = forward_diffuse(z_p[idx], eps, t, sched)
        pred = model(torch.cat([z_t, z_c[idx]], dim=1), t)
        loss = eps_mse_loss(pred, eps)
        optimizer_step(model, opt, loss, train_config.grad_clip)
        history.append(float(loss.item()))
        log_progress("pose", step, history, train_config.log_every)
    summarize("pose", history)

    model.eval().cpu()
    ckpt.metadata.update({
        "stage": "pose",
        "step": train_config.steps,
        "seed": train_config.seed,
        "dataset_hash": dataset_hash([garments, poses]),
        "loss_history": history,
        "channel_layout": pose_layout(codec.latent_channels),
        "schedule": sched.to_dict(),
        "codec": codec.config.to_dict(),
        "train": train_config.to_dict(),
    })
    return ckpt


def check_pose_checkpoint(ckpt: DenoiserCheckpoint, codec: LatentCodec) -> None:
    expected = pose_layout(codec.latent_channels)
    if ckpt.metadata.get("stage") != "pose" or ckpt.metadata.get("channel_layout") != expected:
        raise CheckpointMismatchError(
            f"checkpoint is not a pose predictor for this codec (stage={ckpt.metadata.get('stage')!r})",
            expected_layout=expected)


@torch.no_grad()
def sample_poses(ckpt: DenoiserCheckpoint, garment, n: int, seed: int, n_steps: int,
                 codec: LatentCodec, sched: NoiseSchedule) -> List[PoseMap]:
    """Draw n pose maps for one garment image; sample i uses the i-th slice of the seeded noise."""
    check_pose_checkpoint(ckpt, codec)
    if n < 1:
        raise GcoError(f"n must be >= 1, got {n}")
    g = torch.as_tensor(np.asarray(garment), dtype=torch.float32)
    z_c = encode(g, codec, LatentSpace.GARMENT).data.unsqueeze(0).expand(n, -1, -1, -1)
    gen = torch.Generator().manual_seed(int(seed))
    init = torch.randn((n, *z_c.shape[1:]), generator=gen)
    model = ckpt.model.eval()

    def denoiser(z, t, context):
        return model(torch.cat([z, context], dim=1), t)

    z0 = sample_loop(denoiser, init, z_c, n_steps, sched, seed=seed)
    images = decode(z0, codec)
    return [PoseMap(img.numpy()) for img in images]


# ------------------------------------------------------------------ fit test

def limb_labels(pose_image, max_distance: float = 0.3) -> np.ndarray:
    """Per-pixel nearest limb index, -1 for background or off-palette pixels."""
    hwc = np.transpose(np.asarray(pose_image, dtype=np.float64), (1, 2, 0))
    colors = palette.limb_colors()
    d = np.linalg.norm(hwc[:, :, None, :] - colors[None, None], axis=-1)
    labels = d.argmin(axis=-1)
    labels[d.min(axis=-1) > max_distance] = -1
    return labels


def _bbox(pixels: np.ndarray) -> Optional[Box]:
    ys, xs = np.nonzero(pixels)
    if ys.size == 0:
        return None
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def torso_box(pose_image, min_pixels: int = 3) -> Optional[Box]:
    """Tight box of skeleton pixels coloured as shoulder, spine or hip segments."""
    torso = np.isin(limb_labels(pose_image), TORSO_LIMBS)
    if torso.sum() < min_pixels:
        return None
    return _bbox(torso)


def garment_box(mask, strip_sleeves: bool = True) -> Optional[Box]:
    """
    Tight box of the garment mask. With strip_sleeves, thin sleeve strokes are
    removed by a morphological opening first so the box covers the garment body.
    """
    m = (np.asarray(mask) > 0.5).astype(np.uint8)
    if strip_sleeves:
        opened = cv2.morphologyEx(m, cv2.MORPH_OPEN, np.ones((7, 7), np.uint8))
        if opened.any():
            m = opened
    return _bbox(m)


def box_iou(a: Optional[Box], b: Optional[Box]) -> float:
    if a is None or b is None:
        return 0.0
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class FitReport:
    threshold: float
    matched_rate: float
    shuffled_rate: float
    matched_ious: List[float] = field(default_factory=list)
    shuffled_ious: List[float] = field(default_factory=list)

    @property
    def separation(self) -> float:
        return self.matched_rate / self.shuffled_rate if self.shuffled_rate > 0 else float("inf")

    def to_dict(self) -> dict:
        return {**asdict(self), "separation": self.separation}


def pose_fit_report(pose_images: Sequence, masks: Sequence, threshold: float = 0.3,
                    seed: int = 0) -> FitReport:
    """
    Fraction of poses whose torso box overlaps their own garment box above
    `threshold`, against the same poses paired with another sample's garment.
    """
    n = len(pose_images)
    if n != len(masks) or n < 2:
        raise GcoError("pose_fit_report needs at least two pose/mask pairs of equal count")
    boxes = [garment_box(m) for m in masks]
    torsos = [torso_box(p) for p in pose_images]
    perm = np.random.default_rng(seed).permutation(n)
    partner = np.empty(n, dtype=int)
    partner[perm] = np.roll(perm, 1)
    matched = [box_iou(torsos[i], boxes[i]) for i in range(n)]
    shuffled = [box_iou(torsos[i], boxes[partner[i]]) for i in range(n)]
    report = FitReport(
        threshold=threshold,
        matched_rate=float(np.mean([v > threshold for v in matched])),
        shuffled_rate=float(np.mean([v > threshold for v in shuffled])),
        matched_ious=matched,
        shuffled_ious=shuffled,
    )
    logger.info(f"pose fit: matched {report.matched_rate:.2f}, shuffled {report.shuffled_rate:.2f} "
                f"(IoU > {threshold})")
    return report
