"""Shared plumbing for the two stage trainers."""

import hashlib
import logging
from dataclasses import asdict, dataclass
from typing import Iterable, List, Sequence

import numpy as np
import torch

from .errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 2e-4
    seed: int = 0
    log_every: int = 100
    grad_clip: float = 1.0
    device: str = "cpu"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("training.steps", f"must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError("training.batch_size", f"must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError("training.lr", f"must be positive, got {self.lr}")

    def to_dict(self) -> dict:
        return asdict(self)


def dataset_hash(arrays: Iterable[np.ndarray]) -> str:
    """sha256 over the raw bytes of the training arrays (first 16 hex digits)."""
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()[:16]


def draw_batch(n_items: int, batch_size: int, T: int, generator: torch.Generator):
    """Sample indices and 1-based timesteps for one step."""
    b = min(batch_size, n_items)
    idx = torch.randint(0, n_items, (b,), generator=generator)
    t = torch.randint(1, T + 1, (b,), generator=generator)
    return idx, t


def optimizer_step(model: torch.nn.Module, opt: torch.optim.Optimizer, loss: torch.Tensor,
                   grad_clip: float) -> None:
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    opt.step()


def log_progress(stage: str, step: int, history: Sequence[float], every: int) -> None:
    if every > 0 and (step + 1) % every == 0:
        window = history[-every:]
        logger.info(f"{stage}: step {step + 1}, mean loss {sum(window) / len(window):.5f}")


def summarize(stage: str, history: List[float], head: int = 50) -> None:
    first = history[: min(head, len(history))]
    last = history[-min(head, len(history)):]
    logger.info(f"{stage}: loss {np.mean(first):.5f} (first {len(first)}) -> "
                f"{np.mean(last):.5f} (last {len(last)})")
