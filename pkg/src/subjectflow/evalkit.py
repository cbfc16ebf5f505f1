"""Desk-scale evaluation: identity fidelity, attention overlap, leakage and ablation tables."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .attention_reg import aggregate_subject_map, dice_terms, scene_masks
from .flow import SampleSchedule, mixed_sample
from .model import AttentionRecordSet, Model, assemble_tokens, unpatchify
from .rewards import (
    RewardWeights,
    aesthetic_score,
    composite_reward,
    id_reward,
    scene_reference_embeddings,
    text_score,
)
from .synthdata import SceneSpec

# Target identity-similarity chain for baseline -> +IDAR -> +MoE -> +IPPO; only its direction is checked.
REFERENCE_CHAIN = (0.1474, 0.4983, 0.5154, 0.5284)


@dataclass
class EvalReport:
    identity_fidelity: float
    prompt_score: float
    attention_dice: float
    leakage: float
    n_scenes: int
    aesthetic: float = float("nan")
    composite: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleResult:
    images: np.ndarray  # (n, H, W, 3) clipped to [0, 1]
    records: AttentionRecordSet | None  # averaged over sampling steps
    latents: torch.Tensor


@torch.no_grad()
def sample_scenes(
    model: Model,
    scenes: Sequence[SceneSpec],
    schedule: SampleSchedule = SampleSchedule(),
    seed: int = 0,
    record_attention: bool = False,
    chunk: int = 32,
    noise: torch.Tensor | None = None,
) -> SampleResult:
    """Pure-ODE sampling; initial noise comes from ``seed`` (or ``noise``) so runs are reproducible."""
    cfg = model.config
    dtype = model.img_in.weight.dtype
    if noise is None:
        gen = torch.Generator().manual_seed(seed)
        noise = torch.randn((len(scenes), *cfg.latent_grid, cfg.channels), generator=gen, dtype=dtype)
    cache: dict = {}
    images, latents, maps = [], [], []
    for start in range(0, len(scenes), chunk):
        part = list(scenes[start : start + chunk])
        x0 = noise[start : start + len(part)].to(dtype)
        batch = assemble_tokens(part, x0, cfg, cache)
        acc = []

        def vel(x, t):
            v, rec = model(batch.with_latent(x), t, record_attention=record_attention)
            if record_attention:
                acc.append(rec.maps)
            return v

        traj = mixed_sample(vel, x0, schedule)
        latents.append(traj.final)
        images.append(unpatchify(traj.final, cfg.patch_size).clamp(0, 1).cpu().numpy())
        if record_attention:
            maps.append(torch.stack(acc).mean(dim=0))
    records = AttentionRecordSet(torch.cat(maps), cfg.latent_grid) if record_attention else None
    return SampleResult(np.concatenate(images), records, torch.cat(latents))


def identity_fidelity(scenes: Sequence[SceneSpec], images: Sequence[np.ndarray]) -> float:
    """Mean over scenes of the Hungarian-matched reference similarity."""
    if len(scenes) == 0:
        raise ValueError("no scenes to evaluate")
    if len(scenes) != len(images):
        raise ValueError(f"{len(scenes)} scenes but {len(images)} images")
    scores = [id_reward(scene_reference_embeddings(s), img)[0] for s, img in zip(scenes, images)]
    return float(np.mean(scores))


def attention_overlap_and_leakage(records: AttentionRecordSet, scene: SceneSpec, b: int = 0) -> tuple[list[float], float]:
    """Dice per subject and cross-subject attention mass for batch element ``b``.

    leakage = sum_{i != i'} sum_j Mhat_ij M_i'j / sum_i sum_j Mhat_ij
    """
    if records.n_subjects != scene.n_subjects:
        raise ValueError(f"records have {records.n_subjects} subjects, scene has {scene.n_subjects}")
    masks = scene_masks(scene, records.latent_grid).to(records.maps.dtype)
    maps = torch.stack([aggregate_subject_map(records, i).values[b] for i in range(scene.n_subjects)])
    dice = (1.0 - dice_terms(maps, masks, eps=1e-12)).tolist()
    total = float(maps.sum())
    if total == 0:
        return dice, 0.0
    other = masks.sum(0, keepdim=True) - masks  # mask of every other subject
    return dice, float((maps * other).sum()) / total


def evaluate(
    model: Model,
    scenes: Sequence[SceneSpec],
    schedule: SampleSchedule = SampleSchedule(),
    seed: int = 0,
    weights: RewardWeights | None = None,
) -> tuple[EvalReport, SampleResult]:
    res = sample_scenes(model, scenes, schedule, seed, record_attention=True)
    fid = identity_fidelity(scenes, res.images)
    prompt = float(np.mean([text_score(img, s) for img, s in zip(res.images, scenes)]))
    aes = float(np.mean([aesthetic_score(img) for img in res.images]))
    dices, leaks = [], []
    for b, s in enumerate(scenes):
        d, lk = attention_overlap_and_leakage(
            AttentionRecordSet(res.records.maps[b : b + 1], res.records.latent_grid), s
        )
        dices.extend(d)
        leaks.append(lk)
    weights = weights or RewardWeights.human()
    composite = float(np.mean([composite_reward(img, s, weights).total for img, s in zip(res.images, scenes)]))
    report = EvalReport(
        identity_fidelity=fid,
        prompt_score=prompt,
        attention_dice=float(np.mean(dices)),
        leakage=float(np.mean(leaks)),
        n_scenes=len(scenes),
        aesthetic=aes,
        composite=composite,
    )
    return report, res


# --- ablation tables -------------------------------------------------------------

ABLATION_LABELS = ("baseline", "+IDAR", "+MoE", "+IPPO")
# strict improvement for the first two steps, no regression for the last
ORDERING_RELATIONS = ("<", "<", "<=")


def ordering_holds(values: Sequence[float], relations: Sequence[str] = ORDERING_RELATIONS) -> bool:
    """Check the chain v0 r0 v1 r1 v2 ... ; only as many links as there are values."""
    ok = True
    for (a, b), rel in zip(zip(values, values[1:]), relations):
        ok &= a < b if rel == "<" else a <= b
    return bool(ok)


@dataclass
class AblationRow:
    label: str
    report: EvalReport

    def flat(self) -> dict:
        return {"label": self.label, **self.report.to_dict()}


@dataclass
class AblationTable:
    rows: list[AblationRow]  # in the order given
    ordering_ok: bool
    reference: tuple[float, ...] = field(default=REFERENCE_CHAIN)

    def sorted_rows(self) -> list[AblationRow]:
        return sorted(self.rows, key=lambda r: r.report.identity_fidelity)

    def summary(self) -> dict:
        return {
            "ordering_holds": self.ordering_ok,
            "chain": [r.label for r in self.rows],
            "identity_fidelity": {r.label: r.report.identity_fidelity for r in self.rows},
            "reference_identity_chain": list(self.reference),
            "reference_ordering_holds": ordering_holds(self.reference),
            "rows": [r.flat() for r in self.sorted_rows()],
        }


def ablation_report(
    runs: Sequence[tuple[str, Model]],
    scenes: Sequence[SceneSpec],
    schedule: SampleSchedule = SampleSchedule(),
    seed: int = 0,
    weights: RewardWeights | None = None,
) -> AblationTable:
    """Evaluate labelled models on one scene set; the chain order is the order of ``runs``."""
    if len(runs) < 2:
        raise ValueError("an ablation needs at least two runs")
    configs = {json.dumps(m.config.to_dict(), sort_keys=True) for _, m in runs}
    if len(configs) != 1:
        raise ValueError("runs were built with different model configs")
    rows = [AblationRow(label, evaluate(m, scenes, schedule, seed, weights)[0]) for label, m in runs]
    fid = [r.report.identity_fidelity for r in rows]
    return AblationTable(rows, ordering_holds(fid))


def write_report(table: AblationTable, out_dir: str | Path) -> tuple[Path, Path]:
    """``ablation.csv`` (rows sorted by identity fidelity) and ``ablation.json`` (summary)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = [r.flat() for r in table.sorted_rows()]
    csv_path = out / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    json_path = out / "ablation.json"
    json_path.write_text(json.dumps(table.summary(), indent=2, default=_json_default))
    return csv_path, json_path


def _json_default(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    raise TypeError(type(x))


# --- figures ----------------------------------------------------------------------


def read_metrics(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_metric_curves(logs: dict[str, str | Path], out_path: str | Path, keys: Sequence[str] | None = None) -> Path:
    """One panel per metric, one line per run, x = step (or iteration)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    data = {label: read_metrics(p) for label, p in logs.items()}
    if keys is None:
        skip = {"step", "iteration", "elapsed", "status", "groups_used", "l"}
        keys = sorted({k for recs in data.values() for r in recs for k, v in r.items() if k not in skip and isinstance(v, (int, float))})
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 3.2), squeeze=False)
    for ax, key in zip(axes[0], keys):
        for label, recs in data.items():
            xs = [r.get("step", r.get("iteration")) for r in recs if key in r]
            ys = [r[key] for r in recs if key in r]
            ax.plot(xs, ys, label=label)
        ax.set_title(key)
        ax.set_xlabel("step")
    axes[0][0].legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path


def plot_attention(result: SampleResult, scenes: Sequence[SceneSpec], out_path: str | Path, max_rows: int = 4) -> Path:
    """Sample, then per subject the normalised attention map next to its grid mask."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if result.records is None:
        raise ValueError("sample was drawn without attention records")
    n_rows = min(max_rows, len(scenes))
    n_sub = result.records.n_subjects
    fig, axes = plt.subplots(n_rows, 1 + 2 * n_sub, figsize=(2 * (1 + 2 * n_sub), 2 * n_rows), squeeze=False)
    for b in range(n_rows):
        axes[b][0].imshow(result.images[b])
        masks = scene_masks(scenes[b], result.records.latent_grid)
        for i in range(n_sub):
            amap = aggregate_subject_map(result.records, i).values[b]
            axes[b][1 + 2 * i].imshow(amap.numpy(), cmap="magma", vmin=0, vmax=1)
            axes[b][2 + 2 * i].imshow(masks[i].numpy(), cmap="gray", vmin=0, vmax=1)
            if b == 0:
                axes[b][1 + 2 * i].set_title(f"attn {i}", fontsize=8)
                axes[b][2 + 2 * i].set_title(f"mask {i}", fontsize=8)
    for ax in axes.flat:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
    return out_path
