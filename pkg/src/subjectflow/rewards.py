"""Composite reward: text constraints, aesthetics and Hungarian-matched identity."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from matplotlib.colors import rgb_to_hsv
from scipy import ndimage

from .synthdata import PLACEMENT_GRID, SceneSpec, decode_prompt, render_reference

FG_THRESHOLD = 0.35
HUE_BINS = 24
HUE_SIGMA = 15.0  # degrees
COLOR_WEIGHT = 0.8
PRESENCE_THRESHOLD = 0.7


class RewardError(RuntimeError):
    """A reward provider failed or returned an invalid score."""


@dataclass(frozen=True)
class RewardWeights:
    w_text: float = 1.4
    w_aes: float = 0.7
    w_id: float = 0.5

    def __post_init__(self) -> None:
        if min(self.w_text, self.w_aes, self.w_id) < 0:
            raise ValueError("reward weights must be nonnegative")

    @classmethod
    def human(cls) -> "RewardWeights":
        return cls(w_text=1.4, w_aes=0.7, w_id=0.5)

    @classmethod
    def object(cls) -> "RewardWeights":
        return cls(w_text=1.4, w_aes=0.7, w_id=1.0)


@dataclass
class RewardBreakdown:
    r_text: float
    r_aes: float
    r_id: float
    total: float
    matching: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class Detection:
    box: tuple[int, int, int, int]  # (y0, x0, y1, x1), exclusive end
    embedding: np.ndarray
    centroid: tuple[float, float]  # (x, y)
    area: int


# --- Hungarian matching -----------------------------------------------------


def _min_cost_assignment(cost: np.ndarray) -> np.ndarray:
    """Shortest augmenting path with potentials; ``cost`` is n x m with n <= m.

    Returns col[i] for each row. O(n^2 m).
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: row (1-based) matched to column j
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col = np.empty(n, dtype=int)
    for j in range(1, m + 1):
        if p[j]:
            col[p[j] - 1] = j - 1
    return col


def hungarian_match(C) -> tuple[list[tuple[int, int]], float]:
    """Maximum-similarity one-to-one matching of rows (references) to columns (detections).

    Every row or every column is matched, whichever is fewer. Pairs are
    returned sorted by row.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.size == 0:
        return [], 0.0
    if C.ndim != 2 or not np.all(np.isfinite(C)):
        raise ValueError("similarity matrix must be 2-D and finite")
    transposed = C.shape[0] > C.shape[1]
    work = C.T if transposed else C
    col = _min_cost_assignment(-work)
    pairs = [(i, int(j)) for i, j in enumerate(col)]
    if transposed:
        pairs = sorted((j, i) for i, j in pairs)
    total = float(sum(C[i, j] for i, j in pairs))
    return pairs, total


# --- synthetic detector / embedder -----------------------------------------

_BIN_CENTERS = np.arange(HUE_BINS) * (360.0 / HUE_BINS)


def _hue_histogram(pixels: np.ndarray) -> np.ndarray:
    hsv = rgb_to_hsv(np.clip(pixels, 0.0, 1.0))
    hue = hsv[:, 0] * 360.0
    weight = hsv[:, 1] * hsv[:, 2]
    d = np.abs(hue[:, None] - _BIN_CENTERS[None, :])
    d = np.minimum(d, 360.0 - d)
    hist = (weight[:, None] * np.exp(-0.5 * (d / HUE_SIGMA) ** 2)).sum(axis=0)
    norm = np.linalg.norm(hist)
    return hist / norm if norm > 0 else hist


def _shape_moments(mask: np.ndarray) -> np.ndarray:
    """Scale- and translation-normalised central moments up to third order."""
    ys, xs = np.nonzero(mask)
    m00 = float(len(xs))
    dx = xs - xs.mean()
    dy = ys - ys.mean()

    def eta(p: int, q: int) -> float:
        return float(np.sum(dx**p * dy**q)) / m00 ** (1 + (p + q) / 2)

    second = [eta(2, 0), eta(0, 2), eta(1, 1)]
    third = [eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2)]
    desc = np.array(second + [4.0 * t for t in third])
    norm = np.linalg.norm(desc)
    return desc / norm if norm > 0 else desc


def embed_region(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    color = _hue_histogram(image[mask])
    shape = _shape_moments(mask)
    emb = np.concatenate([math.sqrt(COLOR_WEIGHT) * color, math.sqrt(1 - COLOR_WEIGHT) * shape])
    norm = np.linalg.norm(emb)
    return emb / norm if norm > 0 else emb


def default_min_area(canvas_size: int = 64, grid: int = 8) -> int:
    """Four token cells worth of pixels."""
    cell = canvas_size // grid
    return 4 * cell * cell


def detect_and_embed(image: np.ndarray, min_area: int | None = None) -> list[Detection]:
    """Connected components brighter than the background, largest first."""
    image = np.asarray(image, dtype=np.float64)
    if min_area is None:
        min_area = default_min_area(image.shape[0])
    fg = image.max(axis=-1) > FG_THRESHOLD
    labels, n = ndimage.label(fg)
    out = []
    for k in range(1, n + 1):
        mask = labels == k
        area = int(mask.sum())
        if area < min_area:
            continue
        ys, xs = np.nonzero(mask)
        out.append(
            Detection(
                box=(int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1),
                embedding=embed_region(image, mask),
                centroid=(float(xs.mean()), float(ys.mean())),
                area=area,
            )
        )
    out.sort(key=lambda d: (-d.area, d.box))
    return out


def embed_reference(ref_image: np.ndarray) -> np.ndarray:
    dets = detect_and_embed(ref_image, min_area=1)
    if not dets:
        raise ValueError("reference image contains no glyph")
    return dets[0].embedding


def similarity_matrix(ref_embeddings: Sequence[np.ndarray], detections: Sequence[Detection]) -> np.ndarray:
    if not ref_embeddings or not detections:
        return np.zeros((len(ref_embeddings), len(detections)))
    R = np.stack(ref_embeddings)
    D = np.stack([d.embedding for d in detections])
    return np.clip(R @ D.T, -1.0, 1.0)


def id_reward(ref_embeddings: Sequence[np.ndarray], image: np.ndarray | None = None, *, detections=None):
    """Mean over references of the matched, zero-clipped similarity.

    Returns (reward, matching). Unmatched references contribute zero.
    """
    if len(ref_embeddings) == 0:
        raise ValueError("need at least one reference")
    if detections is None:
        detections = detect_and_embed(image)
    C = similarity_matrix(ref_embeddings, detections)
    if C.size == 0:
        return 0.0, []
    pairs, _ = hungarian_match(C)
    score = sum(max(C[i, j], 0.0) for i, j in pairs) / len(ref_embeddings)
    return float(score), pairs


# --- providers -----------------------------------------------------------

Provider = Callable[[np.ndarray, SceneSpec], float]


def scene_reference_embeddings(scene: SceneSpec) -> list[np.ndarray]:
    return [embed_reference(render_reference(ident, scene.ref_size)) for ident, _ in scene.subjects]


def text_score(image: np.ndarray, scene: SceneSpec) -> float:
    """Fraction of prompt constraints met.

    Constraints: subject count, presence of each reference, left-to-right
    order, and each present subject's centroid within one placement cell of
    where the prompt puts it.
    """
    constraints = decode_prompt(scene.prompt_tokens, scene.max_subjects)
    dets = detect_and_embed(image)
    refs = scene_reference_embeddings(scene)
    C = similarity_matrix(refs, dets)
    pairs = hungarian_match(C)[0] if C.size else []
    present = {i: dets[j] for i, j in pairs if C[i, j] >= PRESENCE_THRESHOLD}

    checks = [len(dets) == constraints.count]
    checks += [i in present for i in range(len(refs))]
    if constraints.count >= 2:
        if len(present) == len(refs):
            xs = [present[i].centroid[0] for i in constraints.order]
            checks.append(all(a < b for a, b in zip(xs, xs[1:])))
        else:
            checks.append(False)
    cell = image.shape[1] / PLACEMENT_GRID
    for i, (row, col) in enumerate(constraints.cells):
        if i not in present:
            checks.append(False)
            continue
        cx, cy = present[i].centroid
        checks.append(abs(cy / cell - (row + 0.5)) <= 1.5 and abs(cx / cell - (col + 0.5)) <= 1.5)
    return float(np.mean(checks))


_DIRECTIONS = ((0, 1), (1, 0), (1, 1), (1, -1))


def _directional_residual(img: np.ndarray) -> np.ndarray:
    """Smallest |x - median3| over the four line directions through each pixel.

    Edges and polygon corners always have one direction along which they are
    locally constant, so clean renders give zero; isolated speckle does not.
    """
    h, w = img.shape[:2]
    pad = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")

    def shifted(dy, dx):
        return pad[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    out = None
    for dy, dx in _DIRECTIONS:
        med = np.median(np.stack([shifted(-dy, -dx), img, shifted(dy, dx)]), axis=0)
        r = np.abs(img - med)
        out = r if out is None else np.minimum(out, r)
    return out


def aesthetic_score(image: np.ndarray, scene: SceneSpec | None = None, kappa: float = 5e-4) -> float:
    """1 - normalised high-frequency noise energy, in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if img.ndim == 2:
        img = img[..., None]
    energy = float(np.mean(_directional_residual(img) ** 2))
    return 1.0 - energy / (energy + kappa)


PROVIDERS: dict[str, Provider] = {
    "constraints": text_score,
    "smoothness": aesthetic_score,
}


def register_provider(name: str, fn: Provider) -> None:
    PROVIDERS[name] = fn


def get_provider(name: str) -> Provider:
    try:
        return PROVIDERS[name]
    except KeyError:
        raise KeyError(f"unknown reward provider {name!r}; known: {sorted(PROVIDERS)}") from None


def _call(provider: Provider, image, scene, label: str) -> float:
    try:
        value = float(provider(image, scene))
    except Exception as exc:  # provider boundary
        raise RewardError(f"{label} provider failed: {exc}") from exc
    if not (math.isfinite(value) and 0.0 <= value <= 1.0):
        raise RewardError(f"{label} provider returned {value}, expected a value in [0, 1]")
    return value


def composite_reward(
    image: np.ndarray,
    scene: SceneSpec,
    weights: RewardWeights,
    providers: Mapping[str, Provider] | None = None,
    ref_embeddings: Sequence[np.ndarray] | None = None,
) -> RewardBreakdown:
    providers = providers or {}
    text = providers.get("text", text_score)
    aes = providers.get("aes", aesthetic_score)
    r_text = _call(text, image, scene, "text")
    r_aes = _call(aes, image, scene, "aesthetic")
    if ref_embeddings is None:
        ref_embeddings = scene_reference_embeddings(scene)
    r_id, matching = id_reward(ref_embeddings, image)
    total = weights.w_text * r_text + weights.w_aes * r_aes + weights.w_id * r_id
    return RewardBreakdown(r_text, r_aes, r_id, total, matching)


def weighted_total(weights: RewardWeights, r_text: float, r_aes: float, r_id: float) -> float:
    return weights.w_text * r_text + weights.w_aes * r_aes + weights.w_id * r_id
