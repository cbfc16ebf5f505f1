"""Group policy optimisation over a sliding window of stochastic denoising steps.

Each iteration draws a scene, samples a group of trajectories from one shared
initial noise (SDE inside the window, Euler ODE outside), scores the final
images and standardises rewards within the group. The old policy is frozen
for the whole iteration; each group then gets one ascent step per window
timestep on the clipped sequence-ratio objective.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .adapters import trainable_parameters
from .flow import SampleSchedule, Trajectory, gaussian_log_prob, mixed_sample, sde_mean
from .model import Model, assemble_tokens, unpatchify
from .rewards import RewardError, RewardWeights, composite_reward, scene_reference_embeddings
from .synthdata import IdentitySpec, SceneSpec, scene_from_seed

log = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass
class RLConfig:
    T: int = 16
    w: int = 2
    tau: int = 50
    s: int = 1
    group_size: int = 16
    groups_per_iter: int = 4
    beta: float = 0.05
    a: float = 0.7
    lr: float = 2e-5
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    iterations: int = 200
    weights: RewardWeights = field(default_factory=RewardWeights.human)
    seed: int = 0

    def validate(self) -> "RLConfig":
        if not 1 <= self.w <= self.T:
            raise ValueError(f"window size w={self.w} must be in 1..T={self.T}")
        if self.s < 1 or self.tau < 1:
            raise ValueError("stride s and shift interval tau must be >= 1")
        if self.group_size < 2:
            raise ValueError("group size must be >= 2")
        if self.beta <= 0:
            raise ValueError("clip range beta must be positive")
        if self.a <= 0:
            raise ValueError("SDE noise scale a must be positive for RL")
        if self.groups_per_iter < 1:
            raise ValueError("groups_per_iter must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RLConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = RewardWeights(**d["weights"])
        return cls(**d)


@dataclass(frozen=True)
class WindowState:
    l: int
    w: int

    @property
    def indices(self) -> list[int]:
        return list(range(self.l, self.l + self.w))


def window_position(m: int, cfg: RLConfig) -> int:
    """Left boundary used at iteration ``m`` (1-based)."""
    if m < 1:
        raise ValueError("iterations are counted from 1")
    return min(cfg.s * ((m - 1) // cfg.tau), cfg.T - cfg.w)


def simulate_window(M: int, cfg: RLConfig) -> list[int]:
    """Step-by-step trace of the shift rule: train at l, then move after every tau-th iteration."""
    out = []
    l = 0
    for m in range(1, M + 1):
        out.append(l)
        if m % cfg.tau == 0:
            l = min(l + cfg.s, cfg.T - cfg.w)
    return out


# --- objective -----------------------------------------------------------------


def advantages(rewards) -> torch.Tensor | None:
    """(R - mean) / std with population std; ``None`` when the group is degenerate."""
    r = torch.as_tensor(rewards, dtype=torch.float64)
    if r.numel() < 2:
        raise ValueError("need at least two rewards per group")
    std = r.std(unbiased=False)
    if std < STD_FLOOR:
        return None
    return (r - r.mean()) / std


def gspo_ratio(logp_new: torch.Tensor, logp_old: torch.Tensor) -> torch.Tensor:
    """exp(mean over window steps of log-ratio); last dim indexes the window steps."""
    logp_new, logp_old = torch.as_tensor(logp_new), torch.as_tensor(logp_old)
    if logp_new.shape != logp_old.shape:
        raise ValueError(f"log-prob shapes differ: {tuple(logp_new.shape)} vs {tuple(logp_old.shape)}")
    return torch.exp((logp_new - logp_old).mean(dim=-1))


def gspo_objective(ratios: torch.Tensor, adv: torch.Tensor, beta: float) -> torch.Tensor:
    """mean_i min(s_i A_i, clip(s_i, 1-beta, 1+beta) A_i), to be maximised."""
    ratios = torch.as_tensor(ratios)
    adv = torch.as_tensor(adv, dtype=ratios.dtype).detach()
    if ratios.shape != adv.shape:
        raise ValueError("ratios and advantages differ in length")
    clipped = torch.clamp(ratios, 1.0 - beta, 1.0 + beta)
    return torch.minimum(ratios * adv, clipped * adv).mean()


# --- rollouts --------------------------------------------------------------------


class Task(Protocol):
    """What the trainer needs from a problem: contexts, a velocity and a reward."""

    latent_shape: tuple[int, ...]

    def next_scene(self, rng: np.random.Generator): ...

    def context(self, model, scene, n: int): ...

    def velocity(self, model, context, x: torch.Tensor, t: float) -> torch.Tensor: ...

    def reward(self, scene, x_final: torch.Tensor) -> tuple[np.ndarray, dict[str, np.ndarray]]: ...


@dataclass
class RolloutGroup:
    scene: object
    context: object
    trajectory: Trajectory  # batched over the group
    window: WindowState
    logp_old: torch.Tensor  # (N, w)
    rewards: np.ndarray
    components: dict[str, np.ndarray]
    adv: torch.Tensor | None

    @property
    def size(self) -> int:
        return len(self.rewards)


def rollout_group(
    model,
    task: Task,
    scene,
    cfg: RLConfig,
    window: WindowState,
    gen: torch.Generator,
) -> RolloutGroup:
    """Sample ``group_size`` trajectories from one shared initial noise with the current (old) policy."""
    n = cfg.group_size
    ctx = task.context(model, scene, n)
    dtype = _dtype(model)
    x0 = torch.randn((1, *task.latent_shape), generator=gen, dtype=dtype).expand(n, *task.latent_shape).clone()
    sched = SampleSchedule(T=cfg.T, a=cfg.a)
    with torch.no_grad():
        traj = mixed_sample(lambda x, t: task.velocity(model, ctx, x, t), x0, sched, window.indices, gen)
    logp_old = torch.stack([traj.transitions[k].log_prob for k in window.indices], dim=-1)
    rewards, comps = task.reward(scene, traj.final)
    return RolloutGroup(scene, ctx, traj, window, logp_old, rewards, comps, advantages(rewards))


def window_log_probs(model, task: Task, group: RolloutGroup, cfg: RLConfig) -> torch.Tensor:
    """(N, w) differentiable log-probabilities of the recorded window transitions."""
    ts = group.trajectory.timesteps
    dt = 1.0 / cfg.T
    std = cfg.a * math.sqrt(dt)
    out = []
    for k in group.window.indices:
        x_t = group.trajectory.states[k]
        nxt = group.trajectory.states[k + 1]
        v = task.velocity(model, group.context, x_t, ts[k])
        mean = sde_mean(v, x_t, ts[k], dt, cfg.a)
        out.append(gaussian_log_prob(nxt, mean, std, event_dims=x_t.dim() - 1))
    return torch.stack(out, dim=-1)


def _dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


# --- training loop -------------------------------------------------------------------


def ippo_train(
    model,
    task: Task,
    cfg: RLConfig,
    metrics_path: str | Path | None = None,
    callback: Callable[[dict], None] | None = None,
    max_rebuilds: int = 5,
) -> list[dict]:
    """Run ``cfg.iterations`` iterations; returns the per-iteration metric records.

    The old policy is the parameter state at the start of the iteration: all
    rollouts run under ``no_grad`` with their log-probabilities frozen. The
    groups are then visited in turn, re-scoring their window transitions with
    gradients, ``w`` ascent steps per group. Ratios are exactly 1 at the first
    step and drift (inside the clip) afterwards. An iteration with a non-finite
    objective, gradient or parameter is rolled back to its starting state.
    """
    cfg.validate()
    params = trainable_parameters(model)
    if not params:
        raise ValueError("policy has no trainable parameters")
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    fh = open(metrics_path, "a") if metrics_path else None
    history: list[dict] = []
    t0 = time.time()
    try:
        for m in range(1, cfg.iterations + 1):
            window = WindowState(window_position(m, cfg), cfg.w)
            model.eval()
            groups = []
            for _ in range(cfg.groups_per_iter):
                for attempt in range(max_rebuilds + 1):
                    scene = task.next_scene(rng)
                    try:
                        groups.append(rollout_group(model, task, scene, cfg, window, gen))
                        break
                    except RewardError as exc:
                        log.warning("iteration %d: reward failed (%s); rebuilding group with a fresh scene", m, exc)
                else:
                    raise RewardError(f"reward kept failing after {max_rebuilds} rebuilds")

            live = [g for g in groups if g.adv is not None]
            status = "ok" if live else "skipped"
            snapshot = [p.detach().clone() for p in params]
            opt_state = copy.deepcopy(opt.state_dict())
            ratios_all, objectives = [], []
            model.train()
            for g in live:
                # one ascent step per window timestep; the old policy stays frozen for the iteration
                for _ in g.window.indices:
                    opt.zero_grad(set_to_none=True)
                    ratios = gspo_ratio(window_log_probs(model, task, g, cfg), g.logp_old)
                    obj = gspo_objective(ratios, g.adv.to(ratios.dtype), cfg.beta)
                    (-obj).backward()
                    grads_ok = all(p.grad is None or torch.isfinite(p.grad).all() for p in params)
                    if not math.isfinite(obj.item()) or not grads_ok:
                        status = "aborted"
                        break
                    if cfg.grad_clip:
                        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
                    opt.step()
                    if not all(torch.isfinite(p).all() for p in params):
                        status = "aborted"
                        break
                    objectives.append(obj.item())
                    ratios_all.append(ratios.detach())
                if status == "aborted":
                    break
            opt.zero_grad(set_to_none=True)
            if status == "aborted":
                log.warning("iteration %d: non-finite objective, gradient or parameters; rolled back", m)
                with torch.no_grad():
                    for p, s in zip(params, snapshot):
                        p.copy_(s)
                opt.load_state_dict(opt_state)
            objective = float(np.mean(objectives)) if objectives else 0.0

            rewards = np.concatenate([g.rewards for g in groups])
            ratios = torch.cat(ratios_all) if ratios_all else torch.ones(1, dtype=torch.float64)
            rec = {
                "iteration": m,
                "l": window.l,
                "reward_mean": float(rewards.mean()),
                "reward_std": float(rewards.std()),
                **{f"r_{k}": float(np.concatenate([g.components[k] for g in groups]).mean()) for k in groups[0].components},
                "first_ratio_dev": float((ratios_all[0] - 1).abs().max()) if ratios_all else 0.0,
                "ratio_min": float(ratios.min()),
                "ratio_mean": float(ratios.mean()),
                "ratio_max": float(ratios.max()),
                "objective": objective if status != "aborted" else float("nan"),
                "groups_used": len(live),
                "updates": len(objectives),
                "status": status,
                "elapsed": round(time.time() - t0, 2),
            }
            history.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
                fh.flush()
            if callback:
                callback(rec)
            if m % 10 == 0 or m == 1:
                log.info("rl %d l=%d reward %.4f obj %.4g", m, window.l, rec["reward_mean"], objective)
    finally:
        if fh:
            fh.close()
    model.eval()
    return history


# --- the synthetic multi-subject task --------------------------------------------------


class SceneTask:
    """Multi-subject synthetic scenes scored by :func:`composite_reward`."""

    def __init__(
        self,
        config,
        pool: Sequence[IdentitySpec],
        weights: RewardWeights,
        n_subjects: int = 2,
        seed: int = 0,
        scenes: Sequence[SceneSpec] | None = None,
    ):
        self.config = config
        self.pool = list(pool)
        self.weights = weights
        self.n_subjects = n_subjects
        self.latent_shape = (*config.latent_grid, config.channels)
        self.scenes = list(scenes) if scenes is not None else None
        self._seed = np.random.SeedSequence(seed)
        self._ref_cache: dict = {}

    def next_scene(self, rng: np.random.Generator) -> SceneSpec:
        if self.scenes:
            return self.scenes[int(rng.integers(len(self.scenes)))]
        s = int(rng.integers(2**31))
        return scene_from_seed(s, self.n_subjects, self.pool, max_subjects=self.config.max_subjects)

    def context(self, model: Model, scene: SceneSpec, n: int):
        z = torch.zeros(n, *self.latent_shape, dtype=_dtype(model))
        return assemble_tokens([scene] * n, z, self.config, self._ref_cache)

    def velocity(self, model: Model, context, x: torch.Tensor, t: float) -> torch.Tensor:
        v, _ = model(context.with_latent(x), t)
        return v

    def reward(self, scene: SceneSpec, x_final: torch.Tensor):
        images = unpatchify(x_final.detach().float(), self.config.patch_size).clamp(0, 1).numpy()
        refs = scene_reference_embeddings(scene)
        rows = [composite_reward(img, scene, self.weights, ref_embeddings=refs) for img in images]
        comps = {
            "text": np.array([r.r_text for r in rows]),
            "aes": np.array([r.r_aes for r in rows]),
            "id": np.array([r.r_id for r in rows]),
        }
        return np.array([r.total for r in rows]), comps
