"""
Configurable UNet denoiser ε_θ shared by the pose predictor and the outpainter.

Timestep embedding, GroupNorm/SiLU residual blocks, multi-head self-attention over
the flattened latent grid and cross-attention on a text context at every level
listed in `attention_levels` (and in the middle block).
"""

import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int
    out_channels: int
    base_width: int = 32
    depth: int = 2
    attention_levels: Tuple[int, ...] = (1,)
    context_dim: Optional[int] = None
    kernel_size: int = 3
    num_heads: int = 4
    norm_groups: int = 8
    # leading input channels convolved as their own group (set by widen_input_channels)
    primary_in_channels: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "attention_levels", tuple(sorted(set(self.attention_levels))))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("model.in_channels", "channel counts must be positive")
        if self.depth < 1:
            raise ConfigError("model.depth", f"must be >= 1, got {self.depth}")
        if self.kernel_size % 2 == 0:
            raise ConfigError("model.kernel_size", "must be odd")
        if self.base_width % 2:
            raise ConfigError("model.base_width", "must be even (sinusoidal embedding)")
        for level in self.attention_levels:
            if not 0 <= level < self.depth:
                raise ConfigError("model.attention_levels", f"level {level} outside 0..{self.depth - 1}")
        for w in self.widths:
            if w % self.norm_groups:
                raise ConfigError("model.norm_groups", f"{self.norm_groups} groups do not divide width {w}")
            if w % self.num_heads:
                raise ConfigError("model.num_heads", f"{self.num_heads} heads do not divide width {w}")

    @property
    def widths(self) -> List[int]:
        return [self.base_width * 2 ** i for i in range(self.depth)]

    @property
    def grid_multiple(self) -> int:
        """Latent height and width must be multiples of this (one halving per extra level)."""
        return 2 ** (self.depth - 1)

    @property
    def time_dim(self) -> int:
        return 4 * self.base_width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "DenoiserConfig":
        data = dict(data)
        data["attention_levels"] = tuple(data.get("attention_levels", ()))
        return cls(**data)


def timestep_embedding(t: Union[int, float, torch.Tensor], dim: int) -> torch.Tensor:
    """
    Sinusoidal embedding, interleaved [sin(t·f_0), cos(t·f_0), sin(t·f_1), ...]
    with f_i = 10000^(-2i/dim).

    Scalar t returns a (dim,) vector, a (B,) tensor returns (B, dim).
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t_tensor = torch.as_tensor(t, dtype=torch.float64)
    scalar = t_tensor.ndim == 0
    t_tensor = t_tensor.reshape(-1, 1)
    freqs = torch.pow(10000.0, -2.0 * torch.arange(dim // 2, dtype=torch.float64) / dim)
    args = t_tensor * freqs
    emb = torch.stack([torch.sin(args), torch.cos(args)], dim=-1).reshape(t_tensor.shape[0], dim)
    emb = emb.to(torch.get_default_dtype())
    return emb[0] if scalar else emb


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; padded keys are masked unless a row is all padding."""

    def __init__(self, query_dim: int, context_dim: Optional[int] = None, heads: int = 4):
        super().__init__()
        kv_dim = context_dim or query_dim
        self.heads = heads
        self.to_q = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k = nn.Linear(kv_dim, query_dim, bias=False)
        self.to_v = nn.Linear(kv_dim, query_dim, bias=False)
        self.to_out = nn.Linear(query_dim, query_dim)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None,
                key_padding_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        context = x if context is None else context
        b, n, d = x.shape
        h = self.heads

        def split(t):
            return t.reshape(t.shape[0], t.shape[1], h, d // h).transpose(1, 2)

        q, k, v = split(self.to_q(x)), split(self.to_k(context)), split(self.to_v(context))
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if key_padding_mask is not None:
            pad = key_padding_mask.bool() & ~key_padding_mask.bool().all(dim=1, keepdim=True)
            scores = scores.masked_fill(pad[:, None, None, :], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.to_out(out.transpose(1, 2).reshape(b, n, d))


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Self-attention over spatial tokens, optional cross-attention, feed-forward."""

    def __init__(self, channels: int, heads: int, groups: int, context_dim: Optional[int] = None):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.proj_in = nn.Linear(channels, channels)
        self.self_norm = nn.LayerNorm(channels)
        self.self_attn = MultiHeadAttention(channels, None, heads)
        self.cross_norm = nn.LayerNorm(channels) if context_dim else None
        self.cross_attn = MultiHeadAttention(channels, context_dim, heads) if context_dim else None
        self.ff_norm = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, 2 * channels), nn.SiLU(),
                                nn.Linear(2 * channels, channels))
        self.proj_out = nn.Linear(channels, channels)

    def forward(self, x, context=None, context_mask=None, face_adapter=None, face_tokens=None):
        b, c, hh, ww = x.shape
        tokens = self.proj_in(self.norm(x).flatten(2).transpose(1, 2))
        tokens = tokens + self.self_attn(self.self_norm(tokens))
        if self.cross_attn is not None:
            tokens = tokens + self.cross_attn(self.cross_norm(tokens), context, context_mask)
        if face_adapter is not None:
            tokens = tokens + face_adapter(tokens, face_tokens)
        tokens = tokens + self.ff(self.ff_norm(tokens))
        return x + self.proj_out(tokens).transpose(1, 2).reshape(b, c, hh, ww)


class StemConv(nn.Conv2d):
    """First conv layer; the leading `primary_channels` inputs form their own group."""

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int, primary_channels: Optional[int] = None):
        super().__init__(in_ch, out_ch, kernel_size, padding=kernel_size // 2)
        self.primary_channels = primary_channels or in_ch

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n = self.primary_channels
        out = F.conv2d(x[:, :n], self.weight[:, :n], self.bias, padding=self.padding)
        if n < self.in_channels:
            out = out + F.conv2d(x[:, n:], self.weight[:, n:], None, padding=self.padding)
        return out


class _Level(nn.Module):
    def __init__(self, res: ResBlock, attn: Optional[AttentionBlock], resample: Optional[nn.Module]):
        super().__init__()
        self.res = res
        self.attn = attn
        self.resample = resample


class UNetDenoiser(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        widths = config.widths
        g, heads, tdim, ctx = config.norm_groups, config.num_heads, config.time_dim, config.context_dim
        k = config.kernel_size

        self.conv_in = StemConv(config.in_channels, widths[0], k, config.primary_in_channels)
        self.time_mlp = nn.Sequential(nn.Linear(config.base_width, tdim), nn.SiLU(), nn.Linear(tdim, tdim))

        def attn(level, w):
            return AttentionBlock(w, heads, g, ctx) if level in config.attention_levels else None

        self.down = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            down = nn.Conv2d(w, w, 3, stride=2, padding=1) if i < config.depth - 1 else None
            self.down.append(_Level(ResBlock(prev, w, tdim, g), attn(i, w), down))
            prev = w

        top = widths[-1]
        self.mid_res1 = ResBlock(top, top, tdim, g)
        self.mid_attn = AttentionBlock(top, heads, g, ctx) if config.attention_levels else None
        self.mid_res2 = ResBlock(top, top, tdim, g)

        self.up = nn.ModuleList()
        for i in reversed(range(config.depth)):
            w = widths[i]
            up = None
            if i > 0:
                up = nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                   nn.Conv2d(w, widths[i - 1], 3, padding=1))
            self.up.append(_Level(ResBlock(prev + w, w, tdim, g), attn(i, w), up))
            prev = widths[i - 1] if i > 0 else w

        self.norm_out = nn.GroupNorm(g, widths[0])
        self.conv_out = nn.Conv2d(widths[0], config.out_channels, 3, padding=1)

    def attention_blocks(self) -> List[AttentionBlock]:
        """Attention blocks in forward order (down, mid, up)."""
        blocks = [lvl.attn for lvl in self.down if lvl.attn is not None]
        if self.mid_attn is not None:
            blocks.append(self.mid_attn)
        blocks += [lvl.attn for lvl in self.up if lvl.attn is not None]
        return blocks

    def forward(self, x: torch.Tensor, t, context: Optional[torch.Tensor] = None,
                context_mask: Optional[torch.Tensor] = None,
                down_residuals: Optional[Sequence[torch.Tensor]] = None,
                mid_residual: Optional[torch.Tensor] = None,
                face_adapters: Optional[Sequence[nn.Module]] = None,
                face_tokens: Optional[torch.Tensor] = None) -> torch.Tensor:
        m = self.config.grid_multiple
        if x.shape[-2] % m or x.shape[-1] % m:
            raise ShapeError(f"latent grid {tuple(x.shape[-2:])} is not divisible by {m} (depth {self.config.depth})")
        b = x.shape[0]
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1).cpu()
        if t.numel() == 1:
            t = t.expand(b)
        temb = self.time_mlp(timestep_embedding(t, self.config.base_width).to(x))
        adapters = iter(face_adapters) if face_adapters is not None else None

        def run_attn(block, h):
            if block is None:
                return h
            adapter = next(adapters) if adapters is not None else None
            return block(h, context, context_mask, adapter, face_tokens)

        h = self.conv_in(x)
        skips = []
        for i, lvl in enumerate(self.down):
            h = run_attn(lvl.attn, lvl.res(h, temb))
            skips.append(h if down_residuals is None else h + down_residuals[i])
            if lvl.resample is not None:
                h = lvl.resample(h)

        h = self.mid_res1(h, temb)
        h = run_attn(self.mid_attn, h)
        h = self.mid_res2(h, temb)
        if mid_residual is not None:
            h = h + mid_residual

        for lvl in self.up:
            h = lvl.res(torch.cat([h, skips.pop()], dim=1), temb)
            h = run_attn(lvl.attn, h)
            if lvl.resample is not None:
                h = lvl.resample(h)

        return self.conv_out(F.silu(self.norm_out(h)))


@dataclass
class DenoiserCheckpoint:
    """Parameters θ (or θ_p) with their config and training metadata."""
    config: DenoiserConfig
    model: UNetDenoiser
    metadata: Dict = field(default_factory=dict)

    @property
    def parameters(self) -> Dict[str, torch.Tensor]:
        return dict(self.model.state_dict())


def init_denoiser(config: DenoiserConfig, seed: int = 0) -> DenoiserCheckpoint:
    """Deterministically initialised denoiser; the global RNG state is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UNetDenoiser(config)
    return DenoiserCheckpoint(config, model, {"step": 0, "seed": seed})


def _context_tensors(context):
    if context is None:
        return None, None
    if isinstance(context, torch.Tensor):
        return context, None
    return context.embeddings, getattr(context, "pad_mask", None)


def apply_denoiser(ckpt: DenoiserCheckpoint, z_in: torch.Tensor, t, context=None) -> torch.Tensor:
    """
    ε_θ(z_in, t, c) for a (C,h,w) or (B,C,h,w) latent.

    `context` is a TextEmbedding (or a raw (B,L,D) tensor) and must be present
    exactly when the config declares a context_dim.
    """
    cfg = ckpt.config
    squeeze = z_in.ndim == 3
    x = z_in.unsqueeze(0) if squeeze else z_in
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"denoiser expects {cfg.in_channels} input channels, got shape {tuple(z_in.shape)}")
    if (context is None) != (cfg.context_dim is None):
        raise ShapeError("context must be given iff the denoiser has a context_dim")
    emb, mask = _context_tensors(context)
    if emb is not None:
        if emb.ndim == 2:
            emb = emb.unsqueeze(0)
            mask = mask.unsqueeze(0) if mask is not None else None
        if emb.shape[0] == 1 and x.shape[0] > 1:
            emb = emb.expand(x.shape[0], -1, -1)
            mask = mask.expand(x.shape[0], -1) if mask is not None else None
    out = ckpt.model(x, t, emb, mask)
    return out.squeeze(0) if squeeze else out


def widen_input_channels(ckpt: DenoiserCheckpoint, extra_channels: int) -> DenoiserCheckpoint:
    """
    Add zero-initialised input channels to the first conv layer.

    Original weights are copied bit-exact and every other parameter is untouched,
    so zero inputs on the new channels reproduce the original network.
    """
    if extra_channels < 1:
        raise ValueError(f"extra_channels must be >= 1, got {extra_channels}")
    old = ckpt.config
    new_config = replace(old, in_channels=old.in_channels + extra_channels,
                         primary_in_channels=old.primary_in_channels or old.in_channels)
    state = {k: v.detach().clone() for k, v in ckpt.model.state_dict().items()}
    w = state["conv_in.weight"]
    pad = torch.zeros(w.shape[0], extra_channels, *w.shape[2:], dtype=w.dtype)
    state["conv_in.weight"] = torch.cat([w, pad], dim=1)

    with torch.random.fork_rng(devices=[]):
        model = UNetDenoiser(new_config).to(dtype=w.dtype, device=w.device)
    model.load_state_dict(state)
    metadata = copy.deepcopy(ckpt.metadata)
    metadata["widened_by"] = metadata.get("widened_by", 0) + extra_channels
    return DenoiserCheckpoint(new_config, model, metadata)


def count_params(ckpt) -> int:
    """Exact number of scalar parameters of a checkpoint (its `.model`) or a bare module."""
    module = ckpt if isinstance(ckpt, nn.Module) else ckpt.model
    return sum(p.numel() for p in module.parameters())
