"""Time-step machinery of the guided bridge.

All sampling goes through an explicit ``torch.Generator`` so that a run is
reproducible from its seed and resumable from a saved generator state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from pydantic import Field, model_validator

from .config import StrictModel

DEFAULT_NFE = 5
DEFAULT_TAU = 0.01
S_MAX = 0.9


def default_s_schedule(nfe: int) -> list[float]:
    """Reference weights ``s[i] = 0.9 * (1 - (i-1)/nfe)`` for ``i = 1..nfe``.

    ``s[0]`` is never used (step 0 consumes the source image) and is stored as
    ``S_MAX`` so the list stays inside ``[0, 1]``.
    """
    if nfe < 1:
        raise ValueError(f"nfe must be >= 1, got {nfe}")
    return [S_MAX] + [S_MAX * (1.0 - (i - 1) / nfe) for i in range(1, nfe + 1)]


class BridgeConfig(StrictModel):
    """Number of steps, noise variance and reference-weight schedule.

    An empty ``s_schedule`` is filled from :func:`default_s_schedule`.
    """

    nfe: int = Field(DEFAULT_NFE, ge=1)
    tau: float = Field(DEFAULT_TAU, ge=0, allow_inf_nan=False)
    s_schedule: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_schedule(self):
        if not self.s_schedule:
            object.__setattr__(self, "s_schedule", default_s_schedule(self.nfe))
        s = self.s_schedule
        if len(s) != self.nfe + 1:
            raise ValueError(f"s_schedule needs nfe+1={self.nfe + 1} entries, got {len(s)}")
        if any(not 0.0 <= v <= 1.0 for v in s):
            raise ValueError("s_schedule values must lie in [0, 1]")
        if any(b > a for a, b in zip(s[1:], s[2:])):
            raise ValueError("s_schedule must be non-increasing after index 1")
        return self


@dataclass
class TrajectoryState:
    x_t: torch.Tensor
    x_hat: torch.Tensor | None = None
    step: int = 0


def sample_timestep(rng: torch.Generator, nfe: int) -> int:
    """Uniform draw from ``{0, ..., nfe}``."""
    if nfe < 1:
        raise ValueError(f"nfe must be >= 1, got {nfe}")
    return int(torch.randint(0, nfe + 1, (1,), generator=rng).item())


def _noise(like: torch.Tensor, std: float, rng: torch.Generator | None) -> torch.Tensor:
    return torch.randn(like.shape, generator=rng, dtype=like.dtype, device=like.device) * std


def bridge_posterior_sample(x_a: torch.Tensor, x_b: torch.Tensor, t: float, tau: float,
                            rng: torch.Generator | None = None) -> torch.Tensor:
    """Draw ``x_t ~ N(t x_b + (1-t) x_a, t (1-t) tau I)``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must be in [0, 1], got {t}")
    if x_a.shape != x_b.shape:
        raise ValueError(f"shape mismatch {tuple(x_a.shape)} vs {tuple(x_b.shape)}")
    mean = t * x_b + (1.0 - t) * x_a
    var = t * (1.0 - t) * tau
    if var == 0.0:
        return mean
    return mean + _noise(mean, math.sqrt(var), rng)


def training_transition(x_b: torch.Tensor, x_hat_prev: torch.Tensor, s: float, tau: float,
                        rng: torch.Generator | None = None) -> torch.Tensor:
    """``s x_b + (1-s) x_hat_prev + eps`` with ``eps ~ N(0, tau I)``."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"s must be in [0, 1], got {s}")
    if x_b.shape != x_hat_prev.shape:
        raise ValueError(f"shape mismatch {tuple(x_b.shape)} vs {tuple(x_hat_prev.shape)}")
    out = s * x_b + (1.0 - s) * x_hat_prev
    if tau > 0:
        out = out + _noise(out, math.sqrt(tau), rng)
    return out


def inference_transition(x_hat_prev: torch.Tensor, tau: float,
                         rng: torch.Generator | None = None) -> torch.Tensor:
    if tau <= 0:
        return x_hat_prev.clone()
    return x_hat_prev + _noise(x_hat_prev, math.sqrt(tau), rng)
