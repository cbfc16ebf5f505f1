"""Checkpoints: one ``.npz`` archive holding a JSON manifest and named arrays."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .adapters import AdapterSpec, adapter_state, attach_adapters
from .model import Model, ModelConfig, build_model

MANIFEST_KEY = "__manifest__"


class CheckpointError(RuntimeError):
    pass


def _write(path: Path, manifest: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest, shapes={k: list(v.shape) for k, v in arrays.items()})
    with open(path, "wb") as fh:
        np.savez(fh, **{MANIFEST_KEY: np.array(json.dumps(manifest, sort_keys=True))}, **arrays)
    return path


def read_archive(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if MANIFEST_KEY not in data:
            raise CheckpointError(f"{path} has no manifest")
        manifest = json.loads(str(data[MANIFEST_KEY]))
        arrays = {k: data[k] for k in data.files if k != MANIFEST_KEY}
    for name, shape in manifest.get("shapes", {}).items():
        if name not in arrays:
            raise CheckpointError(f"array {name!r} listed in manifest but missing")
        if list(arrays[name].shape) != shape:
            raise CheckpointError(f"array {name!r} has shape {arrays[name].shape}, manifest says {shape}")
    return manifest, arrays


def save_checkpoint(path, model: Model, *, seed: int, step: int, stage: str, extra: dict | None = None) -> Path:
    spec = getattr(model, "adapter_spec", None)
    manifest = {
        "kind": "model",
        "config": model.config.to_dict(),
        "adapters": spec.to_dict() if spec is not None else None,
        "seed": seed,
        "step": step,
        "stage": stage,
        "dtype": str(model.img_in.weight.dtype).replace("torch.", ""),
    }
    if extra:
        manifest.update(extra)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    return _write(path, manifest, arrays)


def load_checkpoint(path, dtype: torch.dtype | None = None) -> tuple[Model, dict]:
    manifest, arrays = read_archive(path)
    if manifest.get("kind") != "model":
        raise CheckpointError(f"{path} is not a model checkpoint")
    cfg = manifest["config"]
    config = ModelConfig(**cfg)
    dtype = dtype or getattr(torch, manifest.get("dtype", "float32"))
    model = build_model(config, seed=manifest.get("seed", 0), dtype=dtype)
    if manifest.get("adapters"):
        attach_adapters(model, AdapterSpec.from_dict(manifest["adapters"]))
    expected = model.state_dict()
    missing = set(expected) - set(arrays)
    extra = set(arrays) - set(expected)
    if missing or extra:
        raise CheckpointError(f"parameter names differ from config: missing={sorted(missing)} extra={sorted(extra)}")
    for k, v in expected.items():
        if tuple(v.shape) != arrays[k].shape:
            raise CheckpointError(f"{k}: checkpoint shape {arrays[k].shape} vs model {tuple(v.shape)}")
    model.load_state_dict({k: torch.as_tensor(arrays[k]).to(dtype) for k in expected})
    return model, manifest


def save_adapters(path, model: Model, *, step: int = 0, stage: str = "") -> Path:
    spec = getattr(model, "adapter_spec", None)
    if spec is None:
        raise CheckpointError("model has no adapters")
    manifest = {"kind": "adapters", "config": model.config.to_dict(), "adapters": spec.to_dict(), "step": step, "stage": stage}
    arrays = {k: v.detach().cpu().numpy() for k, v in adapter_state(model).items()}
    return _write(path, manifest, arrays)


def load_adapters(model: Model, path) -> Model:
    """Attach (if needed) and fill adapters from an adapter-only archive."""
    manifest, arrays = read_archive(path)
    if manifest.get("kind") != "adapters":
        raise CheckpointError(f"{path} is not an adapter checkpoint")
    if manifest["config"] != model.config.to_dict():
        raise CheckpointError("adapter checkpoint was made for a different model config")
    spec = AdapterSpec.from_dict(manifest["adapters"])
    if getattr(model, "adapter_spec", None) is None:
        attach_adapters(model, spec)
    elif model.adapter_spec != spec:
        raise CheckpointError("adapter placement differs from the attached adapters")
    current = adapter_state(model)
    if set(current) != set(arrays):
        raise CheckpointError("adapter names differ from placement")
    dtype = model.img_in.weight.dtype
    model.load_state_dict({k: torch.as_tensor(v).to(dtype) for k, v in arrays.items()}, strict=False)
    return model
