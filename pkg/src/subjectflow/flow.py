"""Flow matching: interpolation, velocity target, Euler ODE and Gaussian SDE steps.

Time runs from t=1 (pure noise) to t=0 (data). ``z_t = (1 - t) z0 + t eps``
and the velocity target is ``v = z0 - eps``, which points from noise to data,
so ``dz/dt = -v`` and an Euler step towards the data is ``x + v * dt``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def interpolate(z0: torch.Tensor, eps: torch.Tensor, t) -> torch.Tensor:
    z0, eps = torch.as_tensor(z0), torch.as_tensor(eps)
    _check_shapes(z0, eps)
    t = torch.as_tensor(t, dtype=z0.dtype)
    if t.dim() == 1 and z0.dim() > 1:
        t = t.reshape(-1, *([1] * (z0.dim() - 1)))
    return (1 - t) * z0 + t * eps


def velocity_target(z0: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    z0, eps = torch.as_tensor(z0), torch.as_tensor(eps)
    _check_shapes(z0, eps)
    return z0 - eps


def diffusion_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all elements."""
    _check_shapes(pred, target)
    return ((pred - target) ** 2).mean()


def ode_step(velocity: torch.Tensor, x_t: torch.Tensor, dt: float) -> torch.Tensor:
    if dt <= 0:
        raise ValueError("dt must be positive")
    return x_t + velocity * dt


@dataclass
class Transition:
    mean: torch.Tensor
    std: float
    next_state: torch.Tensor
    log_prob: torch.Tensor  # summed over event dims; one value per batch element


def gaussian_log_prob(x: torch.Tensor, mean: torch.Tensor, std: float, event_dims: int | None = None) -> torch.Tensor:
    """Log density of x under N(mean, std^2 I), summed over the trailing ``event_dims`` dims (all if None)."""
    if std <= 0:
        raise ValueError("std must be positive")
    lp = -0.5 * ((x - mean) / std) ** 2 - math.log(std) - 0.5 * math.log(2 * math.pi)
    dims = lp.dim() if event_dims is None else event_dims
    if dims == 0:
        return lp
    return lp.sum(dim=tuple(range(-dims, 0)))


def sde_mean(velocity: torch.Tensor, x_t: torch.Tensor, t: float, dt: float, a: float) -> torch.Tensor:
    """Euler-Maruyama mean of the reverse SDE sharing the ODE's marginals.

    The score of the linear path is -(x - (1 - t) v) / t, so the drift
    correction is (a^2 / 2) * score.
    """
    return x_t + (velocity - (a * a / (2.0 * t)) * (x_t - (1.0 - t) * velocity)) * dt


def sde_step(
    velocity: torch.Tensor,
    x_t: torch.Tensor,
    t: float,
    dt: float,
    a: float,
    rng: torch.Generator | None = None,
    *,
    noise: torch.Tensor | None = None,
    event_dims: int | None = None,
) -> Transition:
    """One stochastic step with std ``a * sqrt(dt)`` and a score-corrected drift."""
    if a <= 0:
        raise ValueError("a must be positive for an SDE step; use ode_step for a=0")
    if t <= 0:
        raise ValueError("SDE drift is singular at t=0")
    if dt <= 0:
        raise ValueError("dt must be positive")
    std = a * math.sqrt(dt)
    mean = sde_mean(velocity, x_t, t, dt, a)
    if noise is None:
        noise = torch.randn(mean.shape, generator=rng, dtype=mean.dtype)
    nxt = mean + std * noise
    return Transition(mean, std, nxt, gaussian_log_prob(nxt, mean, std, event_dims))


@dataclass(frozen=True)
class SampleSchedule:
    T: int = 16
    a: float = 0.7

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.a < 0:
            raise ValueError("noise scale must be nonnegative")

    @property
    def dt(self) -> float:
        return 1.0 / self.T

    @property
    def timesteps(self) -> list[float]:
        """t_k = 1 - k/T for k = 0..T; step k moves from t_k to t_{k+1}."""
        return [1.0 - k / self.T for k in range(self.T + 1)]


@dataclass
class Trajectory:
    states: list[torch.Tensor]  # T+1 states, states[0] is the initial noise
    transitions: dict[int, Transition] = field(default_factory=dict)
    timesteps: list[float] = field(default_factory=list)

    @property
    def final(self) -> torch.Tensor:
        return self.states[-1]


VelocityFn = Callable[[torch.Tensor, float], torch.Tensor]


def mixed_sample(
    velocity_fn: VelocityFn,
    x_init: torch.Tensor,
    schedule: SampleSchedule,
    window: Sequence[int] | None = None,
    rng: torch.Generator | None = None,
) -> Trajectory:
    """SDE steps at the window indices, Euler ODE steps everywhere else.

    ``velocity_fn(x, t)`` returns the velocity for a batch ``x`` of shape
    (B, H, W, C). Transitions are recorded only for window steps.
    """
    window = set(window or ())
    if any(k < 0 or k >= schedule.T for k in window):
        raise ValueError(f"window {sorted(window)} outside 0..{schedule.T - 1}")
    ts = schedule.timesteps
    dt = schedule.dt
    x = x_init
    traj = Trajectory(states=[x], timesteps=ts)
    event_dims = x.dim() - 1
    for k in range(schedule.T):
        v = velocity_fn(x, ts[k])
        if k in window:
            tr = sde_step(v, x, ts[k], dt, schedule.a, rng, event_dims=event_dims)
            traj.transitions[k] = tr
            x = tr.next_state
        else:
            x = ode_step(v, x, dt)
        traj.states.append(x)
    return traj


def model_velocity_fn(model, batch) -> VelocityFn:
    """Adapter from a :class:`~subjectflow.model.Model` and a token layout to ``velocity_fn``."""

    def fn(x: torch.Tensor, t: float) -> torch.Tensor:
        v, _ = model(batch.with_latent(x), t)
        return v

    return fn


def step_log_prob(model, batch, x_t: torch.Tensor, t: float, dt: float, a: float, next_state: torch.Tensor) -> torch.Tensor:
    """Differentiable log pi(next_state | x_t) under ``model``; one value per batch element."""
    v, _ = model(batch.with_latent(x_t), t)
    mean = sde_mean(v, x_t, t, dt, a)
    return gaussian_log_prob(next_state, mean, a * math.sqrt(dt), event_dims=x_t.dim() - 1)
