"""Command line: gen-data, train, rl-train, sample, eval, report.

Every command writes its artifacts plus ``manifest.json`` (effective config,
its hash, seed, package version, argv) into the output directory. The output
directory is ``--out``, else ``out`` from the config, else
``$SUBJECTFLOW_OUT/<command>-<hash8>`` (``runs/`` when the variable is unset).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .adapters import AdapterSpec, attach_adapters
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config
from .evalkit import ablation_report, evaluate, plot_attention, plot_metric_curves, sample_scenes, write_report
from .flow import SampleSchedule
from .ippo import SceneTask, ippo_train
from .model import build_model
from .synthdata import _save_png, default_pool, read_dataset, write_dataset
from .training import SceneSet, train

log = logging.getLogger("subjectflow")

OUT_ENV = "SUBJECTFLOW_OUT"


def output_dir(cfg: RunConfig, command: str, explicit: str | None) -> Path:
    if explicit:
        return Path(explicit)
    if cfg.out:
        return Path(cfg.out)
    root = Path(os.environ.get(OUT_ENV, "runs"))
    return root / f"{command}-{cfg.digest()[:8]}"


def write_manifest(out: Path, cfg: RunConfig, command: str, argv: list[str], extra: dict | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "version": __version__,
        "argv": argv,
        "config": cfg.to_dict(),
        **(extra or {}),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (out / "config.yaml").write_text(dump_config(cfg))
    return path


def _eval_scenes(cfg: RunConfig):
    pool = default_pool(cfg.data.pool_size)
    return SceneSet.generate(cfg.data.eval_count, 2, pool, cfg.data.eval_seed, cfg.model).scenes


def _training_data(cfg: RunConfig, block) -> SceneSet:
    if cfg.data.path:
        scenes = [s for s in read_dataset(cfg.data.path) if s.n_subjects == block.n_subjects]
        if not scenes:
            raise ConfigError(f"data.path: no {block.n_subjects}-subject scenes in {cfg.data.path}")
        return SceneSet(scenes, cfg.model)
    pool = default_pool(cfg.data.pool_size)
    # different subject counts draw from different streams
    return SceneSet.generate(cfg.data.n_scenes, block.n_subjects, pool, cfg.data.seed * 10 + block.n_subjects, cfg.model)


def _load(path: str | None, what: str):
    if not path:
        raise CheckpointError(f"{what} needs --init-from <checkpoint>")
    return load_checkpoint(path)


# --- commands -----------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args, out: Path) -> dict:
    count = args.count if args.count is not None else cfg.data.n_scenes
    data_dir = write_dataset(out / "data", cfg.seed, count, default_pool(cfg.data.pool_size), n_subjects=cfg.data.gen_subjects)
    return {"dataset": str(data_dir), "count": count}


def cmd_train(cfg: RunConfig, args, out: Path) -> dict:
    stage = cfg.stage
    if stage not in ("pretrain", "multi"):
        raise ConfigError(f"stage: train runs pretrain or multi, got {stage!r}")
    block = cfg.pretrain if stage == "pretrain" else cfg.multi
    block.seed = cfg.seed
    if args.init_from:
        model, _ = load_checkpoint(args.init_from)
        if model.config != cfg.model:
            raise ConfigError("model: checkpoint config differs from the run config")
    else:
        model = build_model(cfg.model, seed=cfg.seed)
    if stage == "multi" and getattr(model, "adapter_spec", None) is None:
        attach_adapters(model, cfg.adapters)
    data = _training_data(cfg, block)
    hist = train(model, data, block, metrics_path=out / "metrics.jsonl")
    ckpt = save_checkpoint(out / "checkpoint.npz", model, seed=cfg.seed, step=block.steps, stage=stage)
    return {"checkpoint": str(ckpt), "final": hist[-1] if hist else None}


def cmd_rl_train(cfg: RunConfig, args, out: Path) -> dict:
    model, manifest = _load(args.init_from, "rl-train")
    if getattr(model, "adapter_spec", None) is None:
        attach_adapters(model, cfg.adapters)
    cfg.rl.seed = cfg.seed
    task = SceneTask(model.config, default_pool(cfg.data.pool_size), cfg.rl.weights, seed=cfg.seed)
    hist = ippo_train(model, task, cfg.rl, metrics_path=out / "metrics.jsonl")
    ckpt = save_checkpoint(out / "checkpoint.npz", model, seed=cfg.seed, step=cfg.rl.iterations, stage="rl")
    return {"checkpoint": str(ckpt), "iterations": len(hist)}


def cmd_sample(cfg: RunConfig, args, out: Path) -> dict:
    model, _ = _load(args.init_from, "sample")
    scenes = _eval_scenes(cfg)
    if args.count is not None:
        scenes = scenes[: args.count]
    res = sample_scenes(model, scenes, SampleSchedule(T=cfg.sample.T), seed=cfg.sample.seed)
    img_dir = out / "samples"
    img_dir.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(res.images):
        _save_png(img_dir / f"sample_{k:05d}.png", img)
    np.save(out / "latents.npy", res.latents.float().numpy())
    return {"samples": len(res.images)}


def cmd_eval(cfg: RunConfig, args, out: Path) -> dict:
    model, _ = _load(args.init_from, "eval")
    scenes = _eval_scenes(cfg)
    report, res = evaluate(model, scenes, SampleSchedule(T=cfg.sample.T), seed=cfg.sample.seed, weights=cfg.rl.weights)
    (out / "eval.json").write_text(json.dumps(report.to_dict(), indent=2))
    plot_attention(res, scenes, out / "attention.png")
    return {"report": report.to_dict()}


def cmd_report(cfg: RunConfig, args, out: Path) -> dict:
    if not args.runs or len(args.runs) < 2:
        raise ConfigError("report needs at least two --run label=checkpoint entries")
    runs, logs = [], {}
    for spec in args.runs:
        label, _, path = spec.partition("=")
        if not path:
            raise ConfigError(f"--run {spec!r} must look like label=path/to/checkpoint.npz")
        model, _ = load_checkpoint(path)
        runs.append((label, model))
        metrics = Path(path).with_name("metrics.jsonl")
        if metrics.exists():
            logs[label] = metrics
    scenes = _eval_scenes(cfg)
    table = ablation_report(runs, scenes, SampleSchedule(T=cfg.sample.T), seed=cfg.sample.seed, weights=cfg.rl.weights)
    csv_path, json_path = write_report(table, out)
    figures = []
    if logs:
        figures.append(str(plot_metric_curves(logs, out / "curves.png")))
    last_label, last_model = runs[-1]
    res = sample_scenes(last_model, scenes[:4], SampleSchedule(T=cfg.sample.T), seed=cfg.sample.seed, record_attention=True)
    figures.append(str(plot_attention(res, scenes[:4], out / f"attention_{last_label.strip('+')}.png")))
    return {"csv": str(csv_path), "summary": str(json_path), "figures": figures, "ordering_holds": table.ordering_ok}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "rl-train": cmd_rl_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subjectflow", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="YAML run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--init-from", dest="init_from", help="checkpoint to start from")
        sp.add_argument("--stage", choices=("pretrain", "multi", "rl"))
        sp.add_argument("--count", type=int, help="number of scenes (gen-data, sample)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY.PATH=VALUE")
        if name == "report":
            sp.add_argument("--run", dest="runs", action="append", default=[], metavar="LABEL=CHECKPOINT")
        sp.add_argument("extra", nargs="*", help="more KEY.PATH=VALUE overrides")
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides) + list(args.extra)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.stage is not None:
        overrides.append(f"stage={args.stage}")
    try:
        cfg = load_config(args.config, overrides)
        out = output_dir(cfg, args.command, args.out)
        out.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(cfg.seed)
        result = COMMANDS[args.command](cfg, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    write_manifest(out, cfg, args.command, argv, {"result": result})
    print(json.dumps({"command": args.command, "out": str(out), **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
