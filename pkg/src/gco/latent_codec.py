"""
Pixel <-> latent mapping shared by both diffusion stages.

Two modes:
  - patch-identity: lossless space-to-channel rearrangement of f×f pixel blocks
    (the default; keeps codec error out of every diffusion-stage assertion)
  - learned-ae: a small deterministic conv autoencoder trained on the corpus
"""

import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from .errors import ConfigError, GcoError, ShapeError

logger = logging.getLogger(__name__)

# (3, H, W) float tensor in [0, 1]; batched code paths also accept (B, 3, H, W)
ImageTensor = torch.Tensor


class CodecMode(str, Enum):
    PATCH_IDENTITY = "patch-identity"
    LEARNED_AE = "learned-ae"


class LatentSpace(str, Enum):
    PIXEL = "pixel-latent"
    POSE = "pose-latent"
    GARMENT = "garment-latent"


@dataclass
class LatentTensor:
    """A latent array together with the space it was encoded from."""
    data: torch.Tensor
    space: LatentSpace = LatentSpace.PIXEL

    def __post_init__(self):
        if not bool(torch.isfinite(self.data).all()):
            raise ShapeError("latent contains non-finite entries")

    @property
    def shape(self):
        return tuple(self.data.shape)


@dataclass(frozen=True)
class CodecConfig:
    mode: CodecMode = CodecMode.PATCH_IDENTITY
    downsample_factor: int = 4
    latent_channels: int = 48

    def __post_init__(self):
        object.__setattr__(self, "mode", CodecMode(self.mode))
        f = self.downsample_factor
        if f < 1:
            raise ConfigError("codec.downsample_factor", f"must be >= 1, got {f}")
        if self.mode is CodecMode.PATCH_IDENTITY and self.latent_channels != 3 * f * f:
            raise ConfigError(
                "codec.latent_channels",
                f"patch-identity mode needs 3*f^2 = {3 * f * f} channels, got {self.latent_channels}")
        if self.mode is CodecMode.LEARNED_AE and f & (f - 1):
            raise ConfigError("codec.downsample_factor", "learned-ae needs a power of two")

    @classmethod
    def patch_identity(cls, f: int = 4) -> "CodecConfig":
        return cls(CodecMode.PATCH_IDENTITY, f, 3 * f * f)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


class ConvAutoencoder(nn.Module):
    """Plain conv autoencoder (no KL term) with log2(f) stride-2 stages."""

    def __init__(self, latent_channels: int, downsample_factor: int, width: int = 32):
        super().__init__()
        n_down = int(math.log2(downsample_factor))
        enc: List[nn.Module] = [nn.Conv2d(3, width, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            enc += [nn.Conv2d(width, width, 4, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(width, latent_channels, 3, padding=1)]
        dec: List[nn.Module] = [nn.Conv2d(latent_channels, width, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(width, width, 3, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(width, 3, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)
        self.decoder = nn.Sequential(*dec)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))


class LatentCodec:
    """Codec configuration plus the autoencoder weights in learned-ae mode."""

    def __init__(self, config: CodecConfig, autoencoder: Optional[ConvAutoencoder] = None):
        self.config = config
        if config.mode is CodecMode.LEARNED_AE and autoencoder is None:
            raise GcoError("learned-ae codec needs trained autoencoder weights")
        self.autoencoder = autoencoder
        if autoencoder is not None:
            autoencoder.eval()

    @property
    def factor(self) -> int:
        return self.config.downsample_factor

    @property
    def latent_channels(self) -> int:
        return self.config.latent_channels

    def latent_shape(self, height: int, width: int):
        return (self.latent_channels, height // self.factor, width // self.factor)


def _batched(x: torch.Tensor, ndim: int = 4):
    if x.ndim == ndim - 1:
        return x.unsqueeze(0), True
    if x.ndim != ndim:
        raise ShapeError(f"expected {ndim - 1}-D or {ndim}-D tensor, got shape {tuple(x.shape)}")
    return x, False


def encode(img: ImageTensor, codec: LatentCodec,
           space: LatentSpace = LatentSpace.PIXEL) -> LatentTensor:
    """Image (3,H,W) or (B,3,H,W) -> latent (c, H/f, W/f) (batched likewise)."""
    x, squeeze = _batched(img)
    f = codec.factor
    if x.shape[1] != 3:
        raise ShapeError(f"expected 3 image channels, got {x.shape[1]}")
    if x.shape[-2] % f or x.shape[-1] % f:
        raise ShapeError(f"image size {tuple(x.shape[-2:])} not divisible by f={f}")
    if codec.config.mode is CodecMode.PATCH_IDENTITY:
        z = F.pixel_unshuffle(x, f) if f > 1 else x.clone()
    else:
        with torch.no_grad():
            z = codec.autoencoder.encoder(x)
    return LatentTensor(z.squeeze(0) if squeeze else z, space)


def decode(z, codec: LatentCodec) -> ImageTensor:
    """Latent -> image clamped to [0, 1]; exact inverse of encode in patch-identity mode."""
    data = z.data if isinstance(z, LatentTensor) else z
    x, squeeze = _batched(data)
    if x.shape[1] != codec.latent_channels:
        raise ShapeError(f"latent has {x.shape[1]} channels, codec expects {codec.latent_channels}")
    f = codec.factor
    if codec.config.mode is CodecMode.PATCH_IDENTITY:
        img = F.pixel_shuffle(x, f) if f > 1 else x.clone()
    else:
        with torch.no_grad():
            img = codec.autoencoder.decoder(x)
    img = img.clamp(0.0, 1.0)
    return img.squeeze(0) if squeeze else img


def latent_mask(mask: torch.Tensor, codec: LatentCodec) -> torch.Tensor:
    """
    Boolean latent-shaped mask for a binary pixel mask (H, W).

    patch-identity: element-exact (a latent entry is kept iff its pixel is masked).
    learned-ae: latent cells whose area-average exceeds one half, broadcast over channels.
    """
    m = mask.to(torch.float32)
    if codec.config.mode is CodecMode.PATCH_IDENTITY:
        rgb = m.unsqueeze(0).expand(3, *m.shape)
        return encode(rgb, codec).data > 0.5
    pooled = F.avg_pool2d(m[None, None], codec.factor)[0]
    return (pooled > 0.5).expand(codec.latent_channels, *pooled.shape[-2:])


def train_autoencoder(images: Sequence[torch.Tensor], config: CodecConfig, steps: int = 1000,
                      batch_size: int = 16, lr: float = 1e-3, seed: int = 0,
                      width: int = 32, device: str = "cpu"):
    """
    Train the learned autoencoder codec.

    Args:
        images: list of (3,H,W) images
        config: CodecConfig in learned-ae mode
        steps: optimisation steps

    Returns:
        (LatentCodec, loss history)
    """
    if len(images) == 0:
        raise GcoError("cannot train an autoencoder on an empty dataset")
    if config.mode is not CodecMode.LEARNED_AE:
        raise ConfigError("codec.mode", "train_autoencoder needs learned-ae mode")

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ConvAutoencoder(config.latent_channels, config.downsample_factor, width)
    model.to(device)
    data = torch.stack(list(images)).to(device)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)

    history: List[float] = []
    model.train()
    for step in tqdm(range(steps), desc="    Codec", ncols=80):
        idx = torch.randint(0, data.shape[0], (min(batch_size, data.shape[0]),), generator=gen)
        batch = data[idx.to(device)]
        loss = F.mse_loss(model(batch), batch)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.item()))
    logger.info(f"autoencoder: loss {history[0]:.5f} -> {history[-1]:.5f} over {steps} steps")
    return LatentCodec(config, model.cpu()), history
