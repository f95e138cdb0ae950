"""Linear-path flow matching: noising, velocity targets, and Euler sampling.

States travel on the straight line x_t = t*eps + (1-t)*x0, so the exact
velocity dx/dt = eps - x0 is constant along the path and a single Euler step
with the true velocity recovers x0 from any x_t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .errors import NumericError

__all__ = [
    "FlowState",
    "SamplerConfig",
    "interpolate",
    "velocity_target",
    "sample_t",
    "euler_step",
    "generate",
]


@dataclass
class FlowState:
    """A point on the noising path: time t in [0, 1] and the noisy tensor."""

    t: float
    x_t: Any

    def __post_init__(self) -> None:
        if not 0.0 <= float(self.t) <= 1.0:
            raise ValueError(f"flow time must lie in [0, 1], got {self.t}")
        if not math.isfinite(_abs_max(self.x_t)):
            raise ValueError("flow state contains non-finite values")


@dataclass(frozen=True)
class SamplerConfig:
    """Euler sampler settings; the grid runs from t=1 down to t=0."""

    num_steps: int = 50
    schedule: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.schedule is not None:
            grid = np.asarray(self.schedule, dtype=np.float64)
            if grid.ndim != 1 or grid.size != self.num_steps + 1:
                raise ValueError(
                    f"schedule must hold num_steps+1={self.num_steps + 1} points, got {grid.size}"
                )
            if grid[0] != 1.0 or grid[-1] != 0.0:
                raise ValueError("schedule endpoints must be exactly 1 and 0")
            if not (np.diff(grid) < 0).all():
                raise ValueError("schedule must be strictly decreasing")

    def time_grid(self) -> np.ndarray:
        if self.schedule is not None:
            return np.asarray(self.schedule, dtype=np.float64)
        return np.linspace(1.0, 0.0, self.num_steps + 1)


def _abs_max(x: Any) -> float:
    return float(abs(x).max())


def _check_same_shape(a: Any, b: Any, what: str) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def interpolate(x0: Any, eps: Any, t: float) -> Any:
    """Return the noisy tensor t*eps + (1-t)*x0."""
    _check_same_shape(x0, eps, "interpolate")
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError(f"interpolation time must lie in [0, 1], got {t}")
    return t * eps + (1.0 - t) * x0


def velocity_target(x0: Any, eps: Any) -> Any:
    """Return the training target eps - x0."""
    _check_same_shape(x0, eps, "velocity_target")
    return eps - x0


def sample_t(count: int, rng: np.random.Generator) -> np.ndarray:
    """Draw `count` independent uniform times on [0, 1]."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    return rng.random(count)


def euler_step(x_t: Any, v_pred: Any, t: float, dt: float) -> Any:
    """Advance from time t to t - dt along the predicted velocity."""
    _check_same_shape(x_t, v_pred, "euler_step")
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if dt > t + 1e-12:
        raise ValueError(f"dt={dt} would step past t=0 from t={t}")
    return x_t - dt * v_pred


def generate(
    velocity_fn: Callable[[Any, float, Any], Any],
    initial_noise: Any,
    sampler_cfg: SamplerConfig,
    conditions: Any = None,
) -> Any:
    """Integrate the flow ODE from t=1 to t=0 with explicit Euler steps.

    `velocity_fn(x_t, t, conditions)` must return a tensor of the same shape;
    a non-finite velocity aborts with the offending step index.
    """
    grid = sampler_cfg.time_grid()
    x = initial_noise
    for k in range(len(grid) - 1):
        t, t_next = float(grid[k]), float(grid[k + 1])
        v = velocity_fn(x, t, conditions)
        if not math.isfinite(_abs_max(v)):
            raise NumericError(f"non-finite velocity at sampler step {k} (t={t:.6f})")
        x = euler_step(x, v, t, t - t_next)
    return x


def time_grid(num_steps: int, schedule: Sequence[float] | None = None) -> np.ndarray:
    """Convenience wrapper building a SamplerConfig grid."""
    cfg = SamplerConfig(num_steps=num_steps, schedule=None if schedule is None else tuple(schedule))
    return cfg.time_grid()
