"""
Noise schedules, forward diffusion, the ε-prediction loss and DDIM/DDPM steps.

Step indices follow the 1-based convention t ∈ {1..T}; t = 0 denotes the clean
latent with ᾱ_0 = 1. Schedule math is float64 (numpy); tensor math keeps the
dtype of the latents it is applied to.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import torch

from .errors import ScheduleError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02

StepIndex = Union[int, torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule {β_t, α_t, ᾱ_t} over T steps."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ScheduleError("betas must be a non-empty 1-D sequence")
        if not np.all((betas > 0.0) & (betas < 1.0)):
            raise ScheduleError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "NoiseSchedule":
        return cls(np.asarray(betas, dtype=np.float64))

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def alpha_bar(self, t: int) -> float:
        """ᾱ_t for t in 0..T (ᾱ_0 = 1)."""
        if t == 0:
            return 1.0
        self.check_step(t)
        return float(self.alpha_bars[t - 1])

    def alpha_bar_tensor(self, t: torch.Tensor) -> torch.Tensor:
        """Vectorised ᾱ lookup (float64) for a tensor of step indices; 0 maps to 1."""
        table = torch.from_numpy(np.concatenate([[1.0], self.alpha_bars]))
        return table[t.long().cpu()]

    def check_step(self, t: StepIndex):
        if isinstance(t, torch.Tensor):
            if t.numel() and (int(t.min()) < 1 or int(t.max()) > self.T):
                raise ScheduleError(f"step index out of range 1..{self.T}")
        elif not 1 <= int(t) <= self.T:
            raise ScheduleError(f"step index {t} out of range 1..{self.T}")

    def to_dict(self) -> dict:
        return {"T": self.T, "betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseSchedule":
        return cls.from_betas(data["betas"])


def build_linear_schedule(T: int, beta_start: float = DEFAULT_BETA_START,
                          beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Linearly spaced β_t between beta_start and beta_end."""
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if T == 1:
        return NoiseSchedule.from_betas([beta_start])
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _coefficient(sched: NoiseSchedule, t: StepIndex, like: torch.Tensor) -> torch.Tensor:
    """ᾱ_t broadcastable against `like` (per-sample when t is a 1-D tensor)."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        ab = sched.alpha_bar_tensor(t).to(device=like.device, dtype=like.dtype)
        return ab.reshape(-1, *([1] * (like.ndim - 1)))
    return torch.tensor(sched.alpha_bar(int(t)), dtype=like.dtype, device=like.device)


def forward_diffuse(z0: torch.Tensor, eps: torch.Tensor, t: StepIndex,
                    sched: NoiseSchedule) -> torch.Tensor:
    """z_t = √ᾱ_t · z0 + √(1−ᾱ_t) · ε."""
    if z0.shape != eps.shape:
        raise ShapeError(f"z0 {tuple(z0.shape)} and eps {tuple(eps.shape)} differ")
    sched.check_step(t)
    ab = _coefficient(sched, t, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def eps_mse_loss(pred_eps: torch.Tensor, true_eps: torch.Tensor,
                 ignore_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Mean squared error between predicted and true noise.

    Elements where `ignore_mask` is nonzero are left out of the mean; the
    mask broadcasts against the prediction.
    """
    if pred_eps.shape != true_eps.shape:
        raise ShapeError(f"pred {tuple(pred_eps.shape)} and target {tuple(true_eps.shape)} differ")
    sq = (pred_eps - true_eps) ** 2
    if ignore_mask is None:
        return sq.mean()
    try:
        keep = ~ignore_mask.bool().expand_as(sq)
    except RuntimeError as e:
        raise ShapeError(f"mask {tuple(ignore_mask.shape)} does not broadcast to {tuple(sq.shape)}") from e
    if not bool(keep.any()):
        raise ShapeError("mask leaves no elements to average")
    return sq[keep].mean()


def predict_x0(z_t: torch.Tensor, pred_eps: torch.Tensor, t: StepIndex,
               sched: NoiseSchedule) -> torch.Tensor:
    ab = _coefficient(sched, t, z_t)
    return (z_t - (1.0 - ab).sqrt() * pred_eps) / ab.sqrt()


def ddim_step(z_t: torch.Tensor, pred_eps: torch.Tensor, t: int, t_prev: int,
              eta: float, sched: NoiseSchedule,
              generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """One DDIM transition t → t_prev. eta=0 is deterministic."""
    if t_prev >= t:
        raise ScheduleError(f"t_prev ({t_prev}) must be smaller than t ({t})")
    if not 0.0 <= eta <= 1.0:
        raise ScheduleError(f"eta must be in [0, 1], got {eta}")
    sched.check_step(t)
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t_prev)

    x0 = predict_x0(z_t, pred_eps, t, sched)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)
    direction = math.sqrt(max(1.0 - ab_prev - sigma ** 2, 0.0))
    z_prev = math.sqrt(ab_prev) * x0 + direction * pred_eps
    if sigma > 0.0:
        noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype).to(z_t.device)
        z_prev = z_prev + sigma * noise
    return z_prev


def ddpm_step(z_t: torch.Tensor, pred_eps: torch.Tensor, t: int, sched: NoiseSchedule,
              generator: Optional[torch.Generator] = None,
              noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Ancestral DDPM transition t → t−1 with posterior variance β̃_t."""
    sched.check_step(t)
    beta = float(sched.betas[t - 1])
    alpha = float(sched.alphas[t - 1])
    ab_t = sched.alpha_bar(t)
    ab_prev = sched.alpha_bar(t - 1)
    mean = (z_t - beta / math.sqrt(1.0 - ab_t) * pred_eps) / math.sqrt(alpha)
    if t == 1:
        return mean
    var = (1.0 - ab_prev) / (1.0 - ab_t) * beta
    if noise is None:
        noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype).to(z_t.device)
    return mean + math.sqrt(var) * noise


def timestep_subsequence(T: int, n_steps: int) -> List[int]:
    """Evenly strided, strictly decreasing steps starting at T."""
    if n_steps < 1:
        raise ScheduleError("n_steps must be >= 1")
    if n_steps > T:
        raise ScheduleError(f"n_steps ({n_steps}) exceeds T ({T})")
    stride = T / n_steps
    return [int(round(T - i * stride)) for i in range(n_steps)]


Denoiser = Callable[[torch.Tensor, int, object], torch.Tensor]
StepCallback = Callable[[torch.Tensor, int], torch.Tensor]


@torch.no_grad()
def sample_loop(denoiser: Denoiser, init_noise: torch.Tensor, context, n_steps: int,
                sched: NoiseSchedule, seed: int = 0, eta: float = 0.0,
                sampler: str = "ddim",
                callback: Optional[StepCallback] = None) -> torch.Tensor:
    """
    Run the reverse process from `init_noise` at t=T down to a z_0 estimate.

    Args:
        denoiser: callable (z, t, context) -> predicted ε
        init_noise: starting latent z_T
        context: passed through to the denoiser untouched
        n_steps: number of DDIM steps (ignored for sampler="ddpm", which walks all T)
        seed: seeds the stream used for stochastic steps
        callback: applied after every step as callback(z, t_prev) -> z

    Returns:
        the final latent
    """
    generator = torch.Generator(device="cpu").manual_seed(int(seed))
    z = init_noise
    if sampler == "ddim":
        steps = timestep_subsequence(sched.T, n_steps)
        pairs = list(zip(steps, steps[1:] + [0]))
    elif sampler == "ddpm":
        pairs = [(t, t - 1) for t in range(sched.T, 0, -1)]
    else:
        raise ScheduleError(f"unknown sampler '{sampler}'")

    for t, t_prev in pairs:
        eps = denoiser(z, t, context)
        if sampler == "ddim":
            z = ddim_step(z, eps, t, t_prev, eta, sched, generator=generator)
        else:
            noise = torch.randn(z.shape, generator=generator, dtype=z.dtype).to(z.device)
            z = ddpm_step(z, eps, t, sched, noise=noise)
        if callback is not None:
            z = callback(z, t_prev)
    return z
