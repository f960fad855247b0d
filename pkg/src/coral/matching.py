"""Dense matching between person and garment descriptor grids.

Coordinates are ``(row, col)`` integer pairs on their own grid. Every
argmax in this module breaks ties toward the lowest row-major index, so
results are deterministic and reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, DimensionError, EmptyDomainError

PERSON_TO_GARMENT = "person->garment"
GARMENT_TO_PERSON = "garment->person"

DEFAULT_GAMMA = 3.0
DEFAULT_ALPHA = 16.0


@dataclass(frozen=True)
class CostMap:
    """Pairwise scores between masked query locations and masked key locations.

    ``values[a, b]`` scores ``query_locations[a]`` against ``key_locations[b]``.
    Both location lists are in row-major order.
    """

    query_locations: np.ndarray  # (P, 2) int
    key_locations: np.ndarray  # (G, 2) int
    values: np.ndarray  # (P, G)
    query_shape: tuple[int, int]
    key_shape: tuple[int, int]

    def transpose(self) -> "CostMap":
        return CostMap(
            self.key_locations, self.query_locations, self.values.T, self.key_shape, self.query_shape
        )


@dataclass(frozen=True)
class FlowField:
    """Per-location target coordinates on another grid.

    ``targets[r, c]`` holds the (row, col) on the target grid that source cell
    ``(r, c)`` maps to; it is only meaningful where ``valid`` is set.
    """

    targets: np.ndarray  # (h, w, 2) float
    valid: np.ndarray  # (h, w) bool
    target_shape: tuple[int, int]

    @property
    def source_shape(self) -> tuple[int, int]:
        return self.valid.shape


@dataclass(frozen=True)
class CorrespondenceSet:
    """Matches from query coordinates to (possibly fractional) key coordinates.

    Entries with ``reliable == False`` carry a match value but nothing may be
    computed from it.
    """

    queries: np.ndarray  # (N, 2) int
    matches: np.ndarray  # (N, 2) float
    reliable: np.ndarray  # (N,) bool

    def __post_init__(self):
        q = np.asarray(self.queries)
        if q.ndim != 2 or q.shape[1] != 2:
            raise DimensionError(f"queries must be (N, 2), got {q.shape}")
        if len(self.matches) != len(q) or len(self.reliable) != len(q):
            raise DimensionError("queries, matches and reliable must have equal length")
        if len(np.unique(q, axis=0)) != len(q):
            raise ValueError("query coordinates must be unique")

    def __len__(self):
        return len(self.queries)

    @property
    def n_reliable(self) -> int:
        return int(np.count_nonzero(self.reliable))


def _check_mask(grid_shape, mask):
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(grid_shape):
        raise DimensionError(f"mask shape {mask.shape} does not match grid shape {tuple(grid_shape)}")
    return mask


def mask_descriptors(grid: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero descriptors outside ``mask``.

    Returns the masked grid and the ``(K, 2)`` row-major list of surviving
    locations.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 3:
        raise DimensionError(f"descriptor grid must be (h, w, c), got {grid.shape}")
    mask = _check_mask(grid.shape[:2], mask)
    out = np.where(mask[:, :, None], grid, 0.0)
    return out, np.argwhere(mask)


def cosine_cost(
    person: np.ndarray, garment: np.ndarray, person_mask: np.ndarray, garment_mask: np.ndarray
) -> CostMap:
    """Cosine similarity between every masked person and masked garment descriptor."""
    person = np.asarray(person, dtype=float)
    garment = np.asarray(garment, dtype=float)
    if person.ndim != 3 or garment.ndim != 3:
        raise DimensionError("descriptor grids must be (h, w, c)")
    if person.shape[2] != garment.shape[2]:
        raise DimensionError(f"channel mismatch: {person.shape[2]} vs {garment.shape[2]}")
    _, p_locs = mask_descriptors(person, person_mask)
    _, g_locs = mask_descriptors(garment, garment_mask)
    if len(p_locs) == 0 or len(g_locs) == 0:
        raise EmptyDomainError("person and garment masks must each select at least one location")

    p_vec = person[p_locs[:, 0], p_locs[:, 1]]
    g_vec = garment[g_locs[:, 0], g_locs[:, 1]]
    p_norm = np.linalg.norm(p_vec, axis=1)
    g_norm = np.linalg.norm(g_vec, axis=1)
    for name, norms, locs in (("person", p_norm, p_locs), ("garment", g_norm, g_locs)):
        bad = np.flatnonzero(norms == 0.0)
        if bad.size:
            raise DegenerateError(f"zero-norm {name} descriptor at {tuple(locs[bad[0]])}")

    values = (p_vec / p_norm[:, None]) @ (g_vec / g_norm[:, None]).T
    np.clip(values, -1.0, 1.0, out=values)
    return CostMap(p_locs, g_locs, values, person.shape[:2], garment.shape[:2])


def argmax_flow(cost: CostMap, direction: str = PERSON_TO_GARMENT) -> FlowField:
    """Hard flow by taking the best-scoring counterpart of every source location."""
    if direction == PERSON_TO_GARMENT:
        values, src, dst = cost.values, cost.query_locations, cost.key_locations
        src_shape, dst_shape = cost.query_shape, cost.key_shape
    elif direction == GARMENT_TO_PERSON:
        values, src, dst = cost.values.T, cost.key_locations, cost.query_locations
        src_shape, dst_shape = cost.key_shape, cost.query_shape
    else:
        raise ValueError(f"unknown direction {direction!r}")
    if values.size == 0:
        raise EmptyDomainError("cost map is empty")

    best = np.argmax(values, axis=1)  # first maximum = lowest row-major index
    targets = np.zeros(tuple(src_shape) + (2,))
    valid = np.zeros(src_shape, dtype=bool)
    targets[src[:, 0], src[:, 1]] = dst[best]
    valid[src[:, 0], src[:, 1]] = True
    return FlowField(targets, valid, tuple(dst_shape))


def cycle_consistency_mask(forward: FlowField, backward: FlowField, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Reliability mask: locations whose forward-backward round trip lands within ``gamma``.

    The comparison is strict, so ``gamma == 0`` rejects everything.
    Fractional forward targets are rounded to the nearest garment cell
    before the backward lookup.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    if tuple(forward.target_shape) != tuple(backward.source_shape) or tuple(
        backward.target_shape
    ) != tuple(forward.source_shape):
        raise DimensionError("forward and backward flows do not describe the same pair of grids")

    h, w = forward.source_shape
    reliable = np.zeros((h, w), dtype=bool)
    src = np.argwhere(forward.valid)
    if len(src) == 0:
        return reliable
    hit = np.rint(forward.targets[src[:, 0], src[:, 1]]).astype(int)
    th, tw = forward.target_shape
    inside = (hit[:, 0] >= 0) & (hit[:, 0] < th) & (hit[:, 1] >= 0) & (hit[:, 1] < tw)
    src, hit = src[inside], hit[inside]
    back_ok = backward.valid[hit[:, 0], hit[:, 1]]
    src, hit = src[back_ok], hit[back_ok]
    returned = backward.targets[hit[:, 0], hit[:, 1]]
    err = np.linalg.norm(returned - src, axis=1)
    keep = src[err < gamma]
    reliable[keep[:, 0], keep[:, 1]] = True
    return reliable


def pseudo_gt(cost: CostMap, reliability: np.ndarray) -> CorrespondenceSet:
    """Argmax matches for every query, flagged by the reliability mask."""
    reliability = _check_mask(cost.query_shape, reliability)
    flow = argmax_flow(cost, PERSON_TO_GARMENT)
    q = cost.query_locations
    matches = flow.targets[q[:, 0], q[:, 1]]
    return CorrespondenceSet(q.copy(), matches, reliability[q[:, 0], q[:, 1]].copy())


def dense_pseudo_gt(
    person_desc: np.ndarray,
    garment_desc: np.ndarray,
    person_mask: np.ndarray,
    garment_mask: np.ndarray,
    gamma: float = DEFAULT_GAMMA,
) -> tuple[CorrespondenceSet, np.ndarray]:
    """Run the whole descriptor pipeline: mask, cosine cost, bidirectional argmax,
    cycle filtering, pseudo-GT. Returns the set and the reliability mask."""
    cost = cosine_cost(person_desc, garment_desc, person_mask, garment_mask)
    fwd = argmax_flow(cost, PERSON_TO_GARMENT)
    bwd = argmax_flow(cost, GARMENT_TO_PERSON)
    rel = cycle_consistency_mask(fwd, bwd, gamma)
    return pseudo_gt(cost, rel), rel


def _aligned(pred: CorrespondenceSet, gt: CorrespondenceSet):
    """Index of each gt query inside pred (queries must cover gt's)."""
    lookup = {tuple(q): k for k, q in enumerate(np.asarray(pred.queries).tolist())}
    try:
        return np.array([lookup[tuple(q)] for q in np.asarray(gt.queries).tolist()], dtype=int)
    except KeyError as exc:
        raise DimensionError(f"prediction is missing query {exc.args[0]}") from None


def pck(pred: CorrespondenceSet, gt: CorrespondenceSet, alpha: float = DEFAULT_ALPHA) -> float:
    """Fraction of gt-reliable queries whose predicted match lies strictly within ``alpha``."""
    idx = _aligned(pred, gt)
    keep = np.asarray(gt.reliable, dtype=bool)
    if not keep.any():
        raise EmptyDomainError("no reliable queries to evaluate")
    err = np.linalg.norm(np.asarray(pred.matches, float)[idx[keep]] - np.asarray(gt.matches, float)[keep], axis=1)
    return float(np.mean(err < alpha))


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError("x and y must be 1-D and of equal length")
    if len(x) < 2:
        raise DegenerateError("need at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = dx @ dx, dy @ dy
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateError("zero variance input")
    return float(np.clip((dx @ dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def warp_by_flow(source_grid: np.ndarray, flow: FlowField) -> np.ndarray:
    """Nearest-neighbour pull warp: ``out[i] = source[flow(i)]``.

    Targets outside the source grid are clamped to its edge; cells without a
    valid flow come out as zeros.
    """
    source_grid = np.asarray(source_grid, dtype=float)
    if source_grid.ndim != 3:
        raise DimensionError("source grid must be (h, w, c)")
    sh, sw = source_grid.shape[:2]
    idx = np.rint(flow.targets).astype(int)
    rows = np.clip(idx[..., 0], 0, sh - 1)
    cols = np.clip(idx[..., 1], 0, sw - 1)
    out = source_grid[rows, cols]
    out[~flow.valid] = 0.0
    return out
