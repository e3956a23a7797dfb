"""
Stage 2: garment-centric outpainting.

Fused model
    Aligned conditions (garment latent, mask, pose latent) are stacked on the
    channel axis next to the noised target latent; the face latent is placed as
    extra clean columns to the right of the target, so self-attention can read
    it. A region-flag channel marks those columns. The only new parameters are
    the zero-initialised input channels of the first conv.

    canvas channels: [noised target c | garment c | mask 1 | pose c | region flag 1]
    canvas columns:  [target w | face fw]

Adapter baseline
    The same backbone fed the target latent only, plus a half-width condition
    branch whose features are added to the skips through zero-initialised 1x1
    convs, a transformer face-image encoder and per-attention face adapters.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from .diffusion_core import NoiseSchedule, eps_mse_loss, forward_diffuse, sample_loop
from .denoiser_net import (DenoiserCheckpoint, DenoiserConfig, MultiHeadAttention, ResBlock,
                           UNetDenoiser, init_denoiser, timestep_embedding, widen_input_channels)
from .errors import CheckpointMismatchError, ConfigError, GcoError, LayoutError, ShapeError
from .latent_codec import LatentCodec, LatentSpace, decode, encode, latent_mask
from .ms_acm import (EMPTY_PROMPT, FACE_RESOLUTION, PromptPair, TextEncoder, TextEncoderConfig,
                     apply_prompt_dropout, init_text_encoder, stitch_prompts)
from .pose_stage import sample_poses
from .synth_data import SampleRecord
from .training import TrainConfig, dataset_hash, draw_batch, log_progress, optimizer_step, summarize

logger = logging.getLogger(__name__)

FUSED = "fused"
ADAPTER = "adapter"
TARGET_COLUMN, FACE_COLUMN = 0, 1


def outpaint_layout(c: int) -> List[str]:
    return [f"noised target latent [{c}]", f"garment latent [{c}]", "mask [1]",
            f"pose latent [{c}]", "region flag [1]"]


def aligned_channels(c: int) -> int:
    return 2 * c + 1


def fused_in_channels(c: int) -> int:
    return c + aligned_channels(c) + 1


# ------------------------------------------------------------- conditions

@dataclass
class ConditionBundle:
    garment_latent: torch.Tensor
    pose_latent: torch.Tensor
    mask_latent: torch.Tensor
    face_latent: Optional[torch.Tensor]
    region_map: torch.Tensor
    face_image: Optional[torch.Tensor] = None

    @property
    def width(self) -> int:
        return self.garment_latent.shape[-1]

    @property
    def face_width(self) -> int:
        return 0 if self.face_latent is None else self.face_latent.shape[-1]

    @property
    def canvas_width(self) -> int:
        return self.width + self.face_width

    def aligned(self, use_pose: bool = True) -> torch.Tensor:
        """(2c+1, h, w) stack [garment | mask | pose]; pose zeroed when use_pose is False."""
        pose = self.pose_latent if use_pose else torch.zeros_like(self.pose_latent)
        return torch.cat([self.garment_latent, self.mask_latent, pose], dim=0)


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(torch.float32)
    return torch.from_numpy(np.ascontiguousarray(np.asarray(x, dtype=np.float32)))


def pad_face_latent(face: torch.Tensor, height: int) -> torch.Tensor:
    """Centre a (c, fh, fw) face latent vertically in a zero column block of `height` rows."""
    fh = face.shape[-2]
    if fh > height:
        raise ShapeError(f"face latent height {fh} exceeds target latent height {height}")
    top = (height - fh) // 2
    return F.pad(face, (0, 0, top, height - fh - top))


def assemble_conditions(C, P, M, F_img, codec: LatentCodec) -> ConditionBundle:
    """
    Encode the conditions into latent space.

    Args:
        C: garment image (3,H,W), zero outside the mask
        P: pose map (3,H,W)
        M: binary mask (H,W)
        F_img: face image (3,32,32) or None
        codec: LatentCodec

    Returns:
        ConditionBundle with the face placed as columns right of the target
    """
    C, P, M = _as_tensor(C), _as_tensor(P), _as_tensor(M)
    if C.shape != P.shape or C.ndim != 3:
        raise ShapeError(f"garment {tuple(C.shape)} and pose {tuple(P.shape)} must share (3, H, W)")
    if M.shape != C.shape[-2:]:
        raise ShapeError(f"mask {tuple(M.shape)} does not match image size {tuple(C.shape[-2:])}")
    if not bool(((M == 0) | (M == 1)).all()):
        raise ShapeError("mask must be binary")

    z_c = encode(C, codec, LatentSpace.GARMENT).data
    z_p = encode(P, codec, LatentSpace.POSE).data
    m = F.avg_pool2d(M[None, None], codec.factor)[0]
    h, w = z_c.shape[-2:]

    face_latent = face_image = None
    if F_img is not None:
        face_image = _as_tensor(F_img)
        if face_image.shape != (3, FACE_RESOLUTION, FACE_RESOLUTION):
            raise ShapeError(f"face must be (3, {FACE_RESOLUTION}, {FACE_RESOLUTION}), got {tuple(face_image.shape)}")
        face_latent = pad_face_latent(encode(face_image, codec).data, h)
    fw = 0 if face_latent is None else face_latent.shape[-1]
    region = torch.cat([torch.full((w,), TARGET_COLUMN), torch.full((fw,), FACE_COLUMN)]).long()
    return ConditionBundle(z_c, z_p, m, face_latent, region, face_image)


def build_canvas(z_target: torch.Tensor, aligned: torch.Tensor,
                 face_latent: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Batched fused input (B, 3c+2, h, w+fw); aligned channels are zero over face columns."""
    b, _, h, w = z_target.shape
    flag = torch.zeros(b, 1, h, w, dtype=z_target.dtype, device=z_target.device)
    if face_latent is None:
        return torch.cat([z_target, aligned, flag], dim=1)
    fw = face_latent.shape[-1]
    target = torch.cat([z_target, face_latent], dim=-1)
    cond = F.pad(aligned, (0, fw))
    flag = torch.cat([flag, torch.ones(b, 1, h, fw, dtype=flag.dtype, device=flag.device)], dim=-1)
    return torch.cat([target, cond, flag], dim=1)


# ----------------------------------------------------------------- models

class FusedOutpainter(nn.Module):
    kind = FUSED

    def __init__(self, unet: UNetDenoiser):
        super().__init__()
        self.unet = unet

    def forward(self, z_target, t, aligned, face_latent=None, face_image=None,
                context=None, context_mask=None):
        return self.unet(build_canvas(z_target, aligned, face_latent), t, context, context_mask)


@dataclass(frozen=True)
class AdapterConfig:
    face_dim: int = 256
    face_layers: int = 6
    face_heads: int = 4
    face_ff: int = 1024
    face_patch: int = 4

    def to_dict(self) -> dict:
        return asdict(self)


class ConditionBranch(nn.Module):
    """Half-width copy of the backbone down path; outputs go through zero-initialised 1x1 convs."""

    def __init__(self, backbone: DenoiserConfig, cond_channels: int):
        super().__init__()
        half = [w // 2 for w in backbone.widths]
        groups = math.gcd(backbone.norm_groups, half[0])
        self.time_dim = max(2, backbone.base_width // 4 * 2)
        tdim = 4 * self.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(self.time_dim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.conv_in = nn.Conv2d(cond_channels, half[0], 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.zero_convs = nn.ModuleList()
        prev = half[0]
        for i, w in enumerate(half):
            self.blocks.append(ResBlock(prev, w, tdim, groups))
            self.downs.append(nn.Conv2d(w, w, 3, stride=2, padding=1) if i < len(half) - 1 else nn.Identity())
            self.zero_convs.append(nn.Conv2d(w, backbone.widths[i], 1))
            prev = w
        self.mid = ResBlock(prev, prev, tdim, groups)
        self.mid_zero = nn.Conv2d(prev, backbone.widths[-1], 1)
        for conv in [*self.zero_convs, self.mid_zero]:
            nn.init.zeros_(conv.weight)
            nn.init.zeros_(conv.bias)

    def forward(self, cond: torch.Tensor, t):
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1).cpu()
        if t.numel() == 1:
            t = t.expand(cond.shape[0])
        temb = self.time_mlp(timestep_embedding(t, self.time_dim).to(cond))
        h = self.conv_in(cond)
        residuals = []
        for block, down, zero in zip(self.blocks, self.downs, self.zero_convs):
            h = block(h, temb)
            residuals.append(zero(h))
            h = down(h)
        return residuals, self.mid_zero(self.mid(h, temb))


class FaceImageEncoder(nn.Module):
    """Patch embedding + transformer over the face crop; returns (B, n_patches, face_dim) tokens."""

    def __init__(self, config: AdapterConfig):
        super().__init__()
        n = (FACE_RESOLUTION // config.face_patch) ** 2
        self.patch = nn.Conv2d(3, config.face_dim, config.face_patch, stride=config.face_patch)
        self.pos = nn.Parameter(torch.randn(n, config.face_dim) * 0.02)
        layer = nn.TransformerEncoderLayer(config.face_dim, config.face_heads, config.face_ff,
                                           dropout=0.0, batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, config.face_layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(config.face_dim)

    def forward(self, face: torch.Tensor) -> torch.Tensor:
        tokens = self.patch(face).flatten(2).transpose(1, 2) + self.pos
        return self.norm(self.encoder(tokens))


class FaceAdapter(nn.Module):
    """Extra key/value projections for face tokens; the output projection starts at zero."""

    def __init__(self, channels: int, face_dim: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = MultiHeadAttention(channels, face_dim, heads)
        nn.init.zeros_(self.attn.to_out.weight)
        nn.init.zeros_(self.attn.to_out.bias)

    def forward(self, tokens: torch.Tensor, face_tokens: torch.Tensor) -> torch.Tensor:
        return self.attn(self.norm(tokens), face_tokens)


class AdapterOutpainter(nn.Module):
    kind = ADAPTER

    def __init__(self, backbone: UNetDenoiser, adapter_config: AdapterConfig):
        super().__init__()
        cfg = backbone.config
        self.backbone = backbone
        self.branch = ConditionBranch(cfg, aligned_channels(cfg.out_channels))
        self.face_encoder = FaceImageEncoder(adapter_config)
        self.face_adapters = nn.ModuleList(
            FaceAdapter(block.proj_in.in_features, adapter_config.face_dim, cfg.num_heads)
            for block in backbone.attention_blocks())

    def forward(self, z_target, t, aligned, face_latent=None, face_image=None,
                context=None, context_mask=None):
        down, mid = self.branch(aligned, t)
        face_tokens = self.face_encoder(face_image) if face_image is not None else None
        adapters = self.face_adapters if face_tokens is not None else None
        return self.backbone(z_target, t, context, context_mask, down, mid, adapters, face_tokens)


# ------------------------------------------------------------- checkpoints

@dataclass(frozen=True)
class OutpaintOptions:
    """Training-time switches; stored with the checkpoint and honoured at generation."""
    fine_drop: float = 0.1
    full_drop: float = 0.1
    face_drop: float = 0.3
    noise_face: bool = False
    loss_on_garment: bool = True
    use_pose: bool = True
    use_coarse: bool = True
    use_fine: bool = True

    def __post_init__(self):
        for name in ("fine_drop", "full_drop", "face_drop"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"training.{name}", f"probability must be in [0, 1], got {p}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OutpaintCheckpoint:
    """Stage-2 denoiser (fused or adapter) together with its jointly trained text encoder."""
    kind: str
    backbone_config: DenoiserConfig
    model: nn.Module
    text_encoder: TextEncoder
    options: OutpaintOptions = field(default_factory=OutpaintOptions)
    adapter_config: Optional[AdapterConfig] = None
    metadata: Dict = field(default_factory=dict)

    @property
    def latent_channels(self) -> int:
        return self.backbone_config.out_channels

    @property
    def denoiser(self) -> DenoiserCheckpoint:
        """The widened UNet of a fused checkpoint as a DenoiserCheckpoint."""
        if self.kind != FUSED:
            raise LayoutError("only fused checkpoints expose a single widened denoiser")
        return DenoiserCheckpoint(self.model.unet.config, self.model.unet, self.metadata)

    @property
    def channel_layout(self) -> List[str]:
        c = self.latent_channels
        if self.kind == FUSED:
            return outpaint_layout(c)
        return [f"noised target latent [{c}]", f"branch: garment [{c}] | mask [1] | pose [{c}]", "face image"]


def check_backbone(config: DenoiserConfig) -> DenoiserConfig:
    """Accept the bare backbone (in = c) or an already fused config (in = 3c+2); return the backbone."""
    c = config.out_channels
    if config.context_dim is None:
        raise LayoutError("the outpainting denoiser needs a text context_dim")
    if config.in_channels == fused_in_channels(c):
        return replace(config, in_channels=c, primary_in_channels=None)
    if config.in_channels != c:
        raise LayoutError(
            f"outpainting denoiser in_channels must be {c} (backbone) or {fused_in_channels(c)} "
            f"({' | '.join(outpaint_layout(c))}), got {config.in_channels}")
    return config


def _text_config(backbone: DenoiserConfig, text_config: Optional[TextEncoderConfig]) -> TextEncoderConfig:
    text_config = text_config or TextEncoderConfig(context_dim=backbone.context_dim)
    if text_config.context_dim != backbone.context_dim:
        raise ConfigError("text_encoder.context_dim",
                          f"{text_config.context_dim} != outpaint_model.context_dim {backbone.context_dim}")
    return text_config


def build_fused_outpainter(denoiser_config: DenoiserConfig, seed: int = 0,
                           text_config: Optional[TextEncoderConfig] = None) -> OutpaintCheckpoint:
    """Backbone widened by 2c+2 zero-initialised input channels."""
    backbone = check_backbone(denoiser_config)
    base = init_denoiser(backbone, seed)
    widened = widen_input_channels(base, aligned_channels(backbone.out_channels) + 1)
    encoder = init_text_encoder(_text_config(backbone, text_config), seed + 1)
    return OutpaintCheckpoint(FUSED, backbone, FusedOutpainter(widened.model), encoder,
                              metadata={"stage": "outpaint", "kind": FUSED, "seed": seed,
                                        "widened_by": widened.metadata["widened_by"]})


def build_adapter_baseline(denoiser_config: DenoiserConfig, adapter_config: Optional[AdapterConfig] = None,
                           seed: int = 0, text_config: Optional[TextEncoderConfig] = None) -> OutpaintCheckpoint:
    """
    ControlNet/IP-Adapter style baseline on the same backbone.

    Every adapter output projection is zero-initialised, so an untrained
    baseline reproduces the bare backbone's prediction.
    """
    backbone = check_backbone(denoiser_config)
    adapter_config = adapter_config or AdapterConfig()
    base = init_denoiser(backbone, seed)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 2)
        model = AdapterOutpainter(base.model, adapter_config)
    encoder = init_text_encoder(_text_config(backbone, text_config), seed + 1)
    return OutpaintCheckpoint(ADAPTER, backbone, model, encoder, adapter_config=adapter_config,
                              metadata={"stage": "outpaint", "kind": ADAPTER, "seed": seed})


def build_outpainter(kind: str, denoiser_config: DenoiserConfig, seed: int = 0,
                     text_config: Optional[TextEncoderConfig] = None,
                     adapter_config: Optional[AdapterConfig] = None) -> OutpaintCheckpoint:
    if kind == FUSED:
        return build_fused_outpainter(denoiser_config, seed, text_config)
    if kind == ADAPTER:
        return build_adapter_baseline(denoiser_config, adapter_config, seed, text_config)
    raise ConfigError("outpaint_model.kind", f"unknown variant '{kind}'")


# --------------------------------------------------------------- training

@dataclass
class _Tensors:
    target: torch.Tensor
    aligned: torch.Tensor
    face_latent: torch.Tensor
    face_image: torch.Tensor
    garment_mask: torch.Tensor


def _prepare(records: Sequence[SampleRecord], codec: LatentCodec, use_pose: bool, device: str) -> _Tensors:
    bundles = [assemble_conditions(r.garment, r.pose, r.mask, r.face, codec) for r in records]
    images = torch.from_numpy(np.stack([r.image for r in records]))
    return _Tensors(
        target=encode(images, codec).data.to(device),
        aligned=torch.stack([b.aligned(use_pose) for b in bundles]).to(device),
        face_latent=torch.stack([b.face_latent for b in bundles]).to(device),
        face_image=torch.stack([b.face_image for b in bundles]).to(device),
        garment_mask=torch.stack([latent_mask(torch.from_numpy(r.mask), codec) for r in records]).to(device),
    )


def loss_ignore_mask(shape: Sequence[int], target_width: int, options: OutpaintOptions,
                     garment_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Loss positions to skip: face columns unless they are noised, and the garment
    region when `loss_on_garment` is off.
    """
    device = garment_mask.device if garment_mask is not None else None
    ignore = torch.zeros(tuple(shape), dtype=torch.bool, device=device)
    if not options.loss_on_garment and garment_mask is not None:
        ignore[..., :target_width] = garment_mask.bool()
    if shape[-1] > target_width:
        ignore[..., target_width:] = not options.noise_face
    return ignore


def train_outpainter(dataset: Sequence[SampleRecord], denoiser_config: DenoiserConfig,
                     sched: NoiseSchedule, train_config: TrainConfig, codec: LatentCodec,
                     options: Optional[OutpaintOptions] = None, kind: str = FUSED,
                     text_config: Optional[TextEncoderConfig] = None,
                     adapter_config: Optional[AdapterConfig] = None) -> OutpaintCheckpoint:
    """
    Train the outpainting denoiser jointly with its text encoder.

    Only the target latent is noised; face columns and condition channels stay
    clean. The loss averages over the target columns. Prompts and the face
    condition are dropped out.

    Args:
        dataset: SampleRecord sequence
        denoiser_config: backbone config (in_channels = c) or an already fused one (3c+2)
        sched: noise schedule
        train_config: steps, batch size, learning rate and seed
        codec: LatentCodec
        options: dropout rates and ablation flags
        kind: "fused" or "adapter"

    Returns:
        OutpaintCheckpoint with the loss history in its metadata
    """
    records = list(dataset)
    if not records:
        raise GcoError("cannot train the outpainter on an empty dataset")
    options = options or OutpaintOptions()
    if denoiser_config.out_channels != codec.latent_channels:
        raise LayoutError(f"denoiser out_channels {denoiser_config.out_channels} != codec latent channels "
                          f"{codec.latent_channels}")
    device = train_config.device

    ckpt = build_outpainter(kind, denoiser_config, train_config.seed, text_config, adapter_config)
    ckpt = replace(ckpt, options=options)
    model = ckpt.model.to(device)
    encoder = ckpt.text_encoder.to(device)
    data = _prepare(records, codec, options.use_pose, device)

    params = list(model.parameters()) + list(encoder.parameters())
    opt = torch.optim.Adam(params, lr=train_config.lr)
    gen = torch.Generator().manual_seed(train_config.seed)
    prompt_rng = np.random.default_rng(train_config.seed)
    face_shape = data.face_latent.shape[1:]
    w = data.target.shape[-1]

    history: List[float] = []
    model.train()
    encoder.train()
    for step in tqdm(range(train_config.steps), desc=" Outpaint", ncols=80):
        idx, t = draw_batch(len(records), train_config.batch_size, sched.T, gen)
        b = idx.shape[0]
        eps = torch.randn((b, *data.target.shape[1:]), generator=gen).to(device)
        eps_face = torch.randn((b, *face_shape), generator=gen).to(device)
        use_face = float(torch.rand((), generator=gen)) >= options.face_drop
        prompts = [apply_prompt_dropout(records[int(i)].prompts, prompt_rng, options.fine_drop,
                                        options.full_drop, options.use_coarse, options.use_fine)
                   for i in idx]
        idx = idx.to(device)

        z_t = forward_diffuse(data.target[idx], eps, t, sched)
        face_latent = face_image = None
        if use_face:
            face_image = data.face_image[idx]
            if kind == FUSED:
                face_latent = data.face_latent[idx]
                if options.noise_face:
                    face_latent = forward_diffuse(face_latent, eps_face, t, sched)
        ctx = encoder.encode_batch(prompts)
        pred = model(z_t, t, data.aligned[idx], face_latent, face_image, ctx.embeddings, ctx.pad_mask)

        ignore = loss_ignore_mask(pred.shape, w, options, data.garment_mask[idx])
        target = eps
        if pred.shape[-1] > w:
            target = torch.cat([eps, eps_face if options.noise_face else torch.zeros_like(eps_face)], dim=-1)
        loss = eps_mse_loss(pred, target, ignore)

        optimizer_step(model, opt, loss, train_config.grad_clip)
        history.append(float(loss.item()))
        log_progress("outpaint", step, history, train_config.log_every)
    summarize("outpaint", history)

    model.eval().cpu()
    encoder.eval().cpu()
    ckpt.metadata.update({
        "step": train_config.steps,
        "seed": train_config.seed,
        "dataset_hash": dataset_hash([np.stack([r.image for r in records])]),
        "loss_history": history,
        "channel_layout": ckpt.channel_layout,
        "schedule": sched.to_dict(),
        "codec": codec.config.to_dict(),
        "train": train_config.to_dict(),
        "options": options.to_dict(),
    })
    return ckpt


# ------------------------------------------------------------- generation

@dataclass
class GenerationRequest:
    garment: np.ndarray
    mask: np.ndarray
    prompts: PromptPair
    pose: Optional[np.ndarray] = None
    face: Optional[np.ndarray] = None
    seed: int = 0
    n_steps: int = 50
    cfg_scale: float = 3.0
    blend: bool = True
    eta: float = 0.0

    def validate(self) -> None:
        mask = np.asarray(self.mask)
        if not np.isin(mask, (0, 1)).all():
            raise ShapeError("request mask must be binary")
        garment = np.asarray(self.garment)
        if np.any(garment * (1 - mask)[None] != 0):
            raise ShapeError("garment pixels outside the mask must be zero")

    def to_dict(self) -> dict:
        """Everything but the arrays, for the JSON sidecar."""
        return {
            "prompts": self.prompts.to_dict(),
            "seed": self.seed,
            "n_steps": self.n_steps,
            "cfg_scale": self.cfg_scale,
            "blend": self.blend,
            "eta": self.eta,
            "has_face": self.face is not None,
            "has_pose": self.pose is not None,
        }


def guided_eps(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float) -> torch.Tensor:
    """ε̂ = ε_∅ + s·(ε_cond − ε_∅); s = 1 and s = 0 return the branches unchanged."""
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def effective_prompt(prompts: PromptPair, options: OutpaintOptions) -> str:
    coarse = prompts.coarse if options.use_coarse else EMPTY_PROMPT
    fine = prompts.fine if options.use_fine else EMPTY_PROMPT
    return stitch_prompts(coarse, fine).stitched


def check_outpaint_checkpoint(ckpt: OutpaintCheckpoint, codec: LatentCodec) -> None:
    if ckpt.metadata.get("stage") != "outpaint":
        raise CheckpointMismatchError(f"checkpoint stage {ckpt.metadata.get('stage')!r} is not an outpainter",
                                      expected_layout=outpaint_layout(codec.latent_channels))
    if ckpt.latent_channels != codec.latent_channels:
        raise CheckpointMismatchError(
            f"checkpoint predicts {ckpt.latent_channels} channels, codec has {codec.latent_channels}",
            expected_layout=outpaint_layout(codec.latent_channels))
    stored = ckpt.metadata.get("codec")
    if stored is not None and stored != codec.config.to_dict():
        raise CheckpointMismatchError(f"checkpoint was trained with codec {stored}, got {codec.config.to_dict()}")


@torch.no_grad()
def generate_showcase(req: GenerationRequest, ckpt: OutpaintCheckpoint, codec: LatentCodec,
                      sched: NoiseSchedule, pose_ckpt: Optional[DenoiserCheckpoint] = None) -> torch.Tensor:
    """
    Generate a showcase image.

    Samples with CFG. With blend=True the garment-region latent is overwritten
    after every step by forward_diffuse(z_garment, ε', t_prev), which is
    z_garment itself at t_prev = 0.

    Returns:
        (3,H,W) image in [0,1]
    """
    check_outpaint_checkpoint(ckpt, codec)
    req.validate()
    pose = req.pose
    if pose is None:
        if pose_ckpt is None:
            raise GcoError("request has no pose map and no pose predictor was given")
        pose = sample_poses(pose_ckpt, req.garment, 1, req.seed, req.n_steps, codec, sched)[0].image

    options = ckpt.options
    bundle = assemble_conditions(req.garment, pose, req.mask, req.face, codec)
    aligned = bundle.aligned(options.use_pose).unsqueeze(0)
    face_latent = bundle.face_latent.unsqueeze(0) if ckpt.kind == FUSED and bundle.face_latent is not None else None
    face_image = bundle.face_image.unsqueeze(0) if ckpt.kind == ADAPTER and bundle.face_image is not None else None

    encoder = ckpt.text_encoder.eval()
    cond = encoder.encode_batch([effective_prompt(req.prompts, options)])
    uncond = encoder.encode_batch([EMPTY_PROMPT])
    model = ckpt.model.eval()
    w = bundle.width

    gen = torch.Generator().manual_seed(int(req.seed))
    z_init = torch.randn((1, *bundle.garment_latent.shape), generator=gen)
    face_eps = torch.randn(face_latent.shape, generator=gen) if face_latent is not None else None
    blend_gen = torch.Generator().manual_seed(int(req.seed) + 1)

    def face_input(t):
        if face_latent is None or not options.noise_face:
            return face_latent
        return forward_diffuse(face_latent, face_eps, t, sched)

    def denoiser(z, t, _context):
        face_in = face_input(t)
        eps_c = eps_u = None
        if req.cfg_scale != 0.0:
            eps_c = model(z, t, aligned, face_in, face_image, cond.embeddings, cond.pad_mask)[..., :w]
        if req.cfg_scale != 1.0:
            eps_u = model(z, t, aligned, face_in, face_image, uncond.embeddings, uncond.pad_mask)[..., :w]
        return guided_eps(eps_u, eps_c, req.cfg_scale)

    callback = None
    if req.blend:
        z_garment = bundle.garment_latent.unsqueeze(0)
        keep = latent_mask(torch.as_tensor(np.asarray(req.mask, dtype=np.float32)), codec).unsqueeze(0)

        def callback(z, t_prev):
            if t_prev == 0:
                known = z_garment
            else:
                noise = torch.randn(z_garment.shape, generator=blend_gen)
                known = forward_diffuse(z_garment, noise, t_prev, sched)
            return torch.where(keep, known, z)

    z0 = sample_loop(denoiser, z_init, None, req.n_steps, sched, seed=req.seed, eta=req.eta, callback=callback)
    return decode(z0[0], codec)
