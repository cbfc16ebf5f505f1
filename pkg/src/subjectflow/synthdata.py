"""Procedural multi-subject scenes with exact ground truth.

Every subject is a flat-colored glyph on a black canvas. An identity is the
pair (shape family, palette); references render the identity alone at a
canonical size, targets place one or more identities at random positions and
scales. Everything is a pure function of the seed.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

SHAPES = ("circle", "square", "triangle", "diamond", "hexagon", "cross", "pentagon", "ring")

# token vocabulary of the prompt encoder
PAD = 0
LAYOUT_NAMES = ("single", "horizontal", "vertical")


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class IdentitySpec:
    identity_id: int
    glyph: tuple[float, ...]  # (shape family index, vertex count, inner radius)
    palette: tuple[float, float, float]  # (hue in degrees, saturation, value)

    @property
    def shape(self) -> str:
        return SHAPES[int(self.glyph[0])]

    @property
    def rgb(self) -> np.ndarray:
        h, s, v = self.palette
        return np.array(colorsys.hsv_to_rgb((h % 360.0) / 360.0, s, v), dtype=np.float32)


@dataclass(frozen=True)
class Placement:
    x: int  # left edge of the glyph box
    y: int  # top edge
    size: int

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.size / 2.0, self.y + self.size / 2.0)


@dataclass
class SceneSpec:
    """Ground truth for one scene.

    ``subjects`` are in reference order: reference ``i`` shows
    ``subjects[i][0]``. Prompt tokens name reference slots, not identities,
    so appearance has to come from the references.
    """

    subjects: list[tuple[IdentitySpec, Placement]]
    canvas_size: int = 64
    ref_size: int = 32
    max_subjects: int = 2
    prompt_tokens: tuple[int, ...] = ()
    masks: list[np.ndarray] = field(default_factory=list, repr=False)
    seed: int = 0

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "canvas_size": self.canvas_size,
            "ref_size": self.ref_size,
            "max_subjects": self.max_subjects,
            "prompt_tokens": list(self.prompt_tokens),
            "subjects": [
                {
                    "identity_id": ident.identity_id,
                    "glyph": list(ident.glyph),
                    "palette": list(ident.palette),
                    "x": p.x,
                    "y": p.y,
                    "size": p.size,
                }
                for ident, p in self.subjects
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        subjects = [
            (
                IdentitySpec(s["identity_id"], tuple(s["glyph"]), tuple(s["palette"])),
                Placement(s["x"], s["y"], s["size"]),
            )
            for s in d["subjects"]
        ]
        scene = cls(
            subjects=subjects,
            canvas_size=d["canvas_size"],
            ref_size=d["ref_size"],
            max_subjects=d["max_subjects"],
            seed=d["seed"],
        )
        scene.masks = [glyph_mask(ident, p, scene.canvas_size) for ident, p in subjects]
        scene.prompt_tokens = encode_prompt(scene)
        return scene


def default_pool(n: int = 8) -> list[IdentitySpec]:
    """Identities with evenly spaced hues; shapes are interleaved so that
    hue neighbours never share a shape family."""
    if n > len(SHAPES):
        raise ValueError(f"pool size {n} exceeds {len(SHAPES)} shape families")
    order = [0, 5, 2, 7, 4, 1, 6, 3]
    pool = []
    for i in range(n):
        shape_idx = order[i] if n == len(SHAPES) else i
        vertices = {"triangle": 3, "square": 4, "diamond": 4, "pentagon": 5, "hexagon": 6}.get(SHAPES[shape_idx], 0)
        inner = 0.45 if SHAPES[shape_idx] == "ring" else 0.0
        pool.append(
            IdentitySpec(
                identity_id=i,
                glyph=(float(shape_idx), float(vertices), inner),
                palette=(360.0 * i / n, 0.9, 0.95),
            )
        )
    return pool


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    # u, v in [-1, 1], v grows downwards
    if shape == "circle":
        return u**2 + v**2 <= 1.0
    if shape == "ring":
        r2 = u**2 + v**2
        return (r2 <= 1.0) & (r2 >= 0.45**2)
    if shape == "square":
        return (np.abs(u) <= 0.85) & (np.abs(v) <= 0.85)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) <= 1.0
    if shape == "triangle":
        return (v <= 1.0) & (v >= 2.0 * np.abs(u) - 1.0)
    if shape == "cross":
        return ((np.abs(u) <= 0.38) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.38) & (np.abs(u) <= 1.0))
    if shape in ("pentagon", "hexagon"):
        n = 5 if shape == "pentagon" else 6
        inside = np.ones_like(u, dtype=bool)
        for k in range(n):
            ang = -np.pi / 2 + 2 * np.pi * (k + 0.5) / n
            inside &= u * np.cos(ang) + v * np.sin(ang) <= np.cos(np.pi / n)
        return inside
    raise ValueError(f"unknown shape {shape!r}")


def glyph_mask(identity: IdentitySpec, placement: Placement, canvas: int) -> np.ndarray:
    """Boolean (canvas, canvas) mask of the glyph; pixel centres are tested."""
    ys, xs = np.mgrid[0:canvas, 0:canvas].astype(np.float64) + 0.5
    half = placement.size / 2.0
    cx, cy = placement.center
    u = (xs - cx) / half
    v = (ys - cy) / half
    box = (np.abs(u) <= 1.0) & (np.abs(v) <= 1.0)
    return box & _shape_mask(identity.shape, u, v)


def _boxes_clear(a: Placement, b: Placement, gap: int) -> bool:
    return (
        a.x + a.size + gap <= b.x
        or b.x + b.size + gap <= a.x
        or a.y + a.size + gap <= b.y
        or b.y + b.size + gap <= a.y
    )


def make_scene(
    n_subjects: int,
    identity_pool: Sequence[IdentitySpec],
    rng: np.random.Generator,
    *,
    canvas_size: int = 64,
    ref_size: int = 32,
    max_subjects: int = 2,
    size_range: tuple[int, int] = (24, 30),
    gap: int = 3,
    max_tries: int = 200,
    seed: int = 0,
) -> SceneSpec:
    """Sample distinct identities and non-overlapping placements.

    The layout rule is rejection sampling of axis-aligned glyph boxes with a
    minimum ``gap`` between them.
    """
    if not 1 <= n_subjects <= max_subjects:
        raise ValueError(f"n_subjects must be in [1, {max_subjects}], got {n_subjects}")
    if len(identity_pool) < n_subjects:
        raise ValueError("identity pool too small for distinct identities")
    picks = rng.choice(len(identity_pool), size=n_subjects, replace=False)
    identities = [identity_pool[int(k)] for k in picks]

    for _ in range(max_tries):
        placements: list[Placement] = []
        for _ in range(n_subjects):
            size = int(rng.integers(size_range[0], size_range[1] + 1))
            x = int(rng.integers(0, canvas_size - size + 1))
            y = int(rng.integers(0, canvas_size - size + 1))
            placements.append(Placement(x, y, size))
        if all(
            _boxes_clear(placements[i], placements[j], gap)
            for i in range(n_subjects)
            for j in range(i + 1, n_subjects)
        ):
            break
    else:
        raise PlacementError(f"could not place {n_subjects} glyphs after {max_tries} tries")

    scene = SceneSpec(
        subjects=list(zip(identities, placements)),
        canvas_size=canvas_size,
        ref_size=ref_size,
        max_subjects=max_subjects,
        seed=seed,
    )
    scene.masks = [glyph_mask(ident, p, canvas_size) for ident, p in scene.subjects]
    scene.prompt_tokens = encode_prompt(scene)
    return scene


def scene_from_seed(seed: int, n_subjects: int, pool: Sequence[IdentitySpec], **kwargs) -> SceneSpec:
    return make_scene(n_subjects, pool, np.random.default_rng(seed), seed=seed, **kwargs)


def reference_placement(ref_size: int) -> Placement:
    size = (3 * ref_size) // 4
    off = (ref_size - size) // 2
    return Placement(off, off, size)


def render_reference(identity: IdentitySpec, ref_size: int = 32) -> np.ndarray:
    mask = glyph_mask(identity, reference_placement(ref_size), ref_size)
    img = np.zeros((ref_size, ref_size, 3), dtype=np.float32)
    img[mask] = identity.rgb
    return img


def render_scene(scene: SceneSpec) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Return (target image, reference images, pixel masks); images are float32 in [0, 1]."""
    target = np.zeros((scene.canvas_size, scene.canvas_size, 3), dtype=np.float32)
    for (ident, _), mask in zip(scene.subjects, scene.masks):
        target[mask] = ident.rgb
    refs = [render_reference(ident, scene.ref_size) for ident, _ in scene.subjects]
    return target, refs, [m.copy() for m in scene.masks]


# --- prompt encoding -------------------------------------------------------
# ids: 0 pad | 1..N count | N+1..2N reference slot | 2N+1.. layout


PLACEMENT_GRID = 8  # coarse cells per side used by the placement tokens


def placement_token_base(max_subjects: int) -> int:
    return 2 * max_subjects + 1 + len(LAYOUT_NAMES)


def vocab_size(max_subjects: int) -> int:
    return placement_token_base(max_subjects) + PLACEMENT_GRID * PLACEMENT_GRID


def prompt_length(max_subjects: int) -> int:
    return 2 * max_subjects + 2


def left_to_right(scene: SceneSpec) -> tuple[int, ...]:
    centers = [p.center for _, p in scene.subjects]
    return tuple(sorted(range(len(centers)), key=lambda i: (centers[i][0], centers[i][1], i)))


def layout_name(scene: SceneSpec) -> str:
    if scene.n_subjects < 2:
        return "single"
    xs = [p.center[0] for _, p in scene.subjects]
    ys = [p.center[1] for _, p in scene.subjects]
    return "horizontal" if (max(xs) - min(xs)) >= (max(ys) - min(ys)) else "vertical"


def placement_cell(placement: Placement, canvas_size: int) -> tuple[int, int]:
    """(row, col) of the glyph centre on the coarse placement grid."""
    cell = canvas_size / PLACEMENT_GRID
    cx, cy = placement.center
    clamp = lambda v: min(PLACEMENT_GRID - 1, max(0, int(v // cell)))  # noqa: E731
    return clamp(cy), clamp(cx)


def encode_prompt(scene: SceneSpec) -> tuple[int, ...]:
    """[count, reference slots left to right, pad..., layout, placement cell per reference, pad...]."""
    n, cap = scene.n_subjects, scene.max_subjects
    if n == 0:
        raise ValueError("empty scene has no prompt")
    order = left_to_right(scene)
    slots = [cap + 1 + i for i in order] + [PAD] * (cap - n)
    layout = 2 * cap + 1 + LAYOUT_NAMES.index(layout_name(scene))
    base = placement_token_base(cap)
    cells = []
    for _, placement in scene.subjects:
        r, c = placement_cell(placement, scene.canvas_size)
        cells.append(base + r * PLACEMENT_GRID + c)
    return (n, *slots, layout, *cells, *[PAD] * (cap - n))


@dataclass(frozen=True)
class PromptConstraints:
    count: int
    order: tuple[int, ...]  # reference indices, left to right
    layout: str
    cells: tuple[tuple[int, int], ...] = ()  # placement cell of each reference, in reference order


def decode_prompt(tokens: Sequence[int], max_subjects: int) -> PromptConstraints:
    tokens = list(tokens)
    if len(tokens) != prompt_length(max_subjects):
        raise ValueError(f"expected {prompt_length(max_subjects)} tokens, got {len(tokens)}")
    cap = max_subjects
    count = tokens[0]
    order = tuple(t - cap - 1 for t in tokens[1 : 1 + cap] if t != PAD)
    layout = LAYOUT_NAMES[tokens[1 + cap] - 2 * cap - 1]
    base = placement_token_base(cap)
    cells = tuple(divmod(t - base, PLACEMENT_GRID) for t in tokens[2 + cap :] if t != PAD)
    if not count == len(order) == len(cells):
        raise ValueError("count token disagrees with slot or placement tokens")
    return PromptConstraints(count, order, layout, cells)


# --- dataset directory ------------------------------------------------------


def _save_png(path: Path, arr: np.ndarray) -> None:
    if arr.dtype == bool:
        Image.fromarray(arr.astype(np.uint8) * 255, mode="L").save(path)
    else:
        Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="RGB").save(path)


def write_dataset(
    out_dir: str | Path,
    seed: int,
    count: int,
    pool: Sequence[IdentitySpec],
    n_subjects: int = 2,
    **scene_kwargs,
) -> Path:
    """Write ``count`` scenes (PNG images and masks, JSON manifest per scene) plus an index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    records = []
    for k, child in enumerate(ss.spawn(count)):
        scene_seed = int(child.generate_state(1)[0])
        scene = scene_from_seed(scene_seed, n_subjects, pool, **scene_kwargs)
        target, refs, masks = render_scene(scene)
        rec = out / f"scene_{k:05d}"
        rec.mkdir(exist_ok=True)
        _save_png(rec / "target.png", target)
        for i, (ref, mask) in enumerate(zip(refs, masks)):
            _save_png(rec / f"ref_{i}.png", ref)
            _save_png(rec / f"mask_{i}.png", mask)
        (rec / "scene.json").write_text(json.dumps(scene.to_dict(), indent=2, sort_keys=True) + "\n")
        records.append(rec.name)
    index = {"seed": seed, "count": count, "n_subjects": n_subjects, "records": records}
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return out


def read_dataset(path: str | Path) -> list[SceneSpec]:
    root = Path(path)
    index = json.loads((root / "index.json").read_text())
    return [SceneSpec.from_dict(json.loads((root / r / "scene.json").read_text())) for r in index["records"]]
