"""Training objectives and a finite-difference gradient checker.

Every loss that feeds back-propagation comes with a ``*_grad`` / ``*_vjp``
companion returning the gradient with respect to its array inputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .attention import entropies, entropies_vjp
from .errors import ConfigError, DimensionError, InvalidDistributionError
from .matching import CorrespondenceSet

LAMBDA_CORR = 0.01
LAMBDA_ENT = 0.1
LAMBDA_REPA = 0.1


@dataclass(frozen=True)
class LossWeights:
    lambda_corr: float = LAMBDA_CORR
    lambda_ent: float = LAMBDA_ENT
    lambda_repa: float = 0.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")

    @classmethod
    def baseline(cls) -> "LossWeights":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def repa_baseline(cls, lambda_repa: float = LAMBDA_REPA) -> "LossWeights":
        return cls(0.0, 0.0, lambda_repa)

    @property
    def uses_attention(self) -> bool:
        return self.lambda_corr > 0 or self.lambda_ent > 0


@dataclass
class LossReport:
    step: int
    velocity: float
    corr: float
    ent: float
    total: float
    repa: float | None = None
    n_reliable: int = 0
    per_layer: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "LossReport":
        return cls(**json.loads(line))

    def check_decomposition(self, weights: LossWeights, atol: float = 1e-10) -> bool:
        expected = self.velocity + weights.lambda_corr * self.corr + weights.lambda_ent * self.ent
        if self.repa is not None:
            expected += weights.lambda_repa * self.repa
        return abs(expected - self.total) <= atol


# ---------------------------------------------------------------- rectified flow


def interpolate_latent(z0, noise, t: float):
    """Point at time ``t`` on the straight path from ``z0`` (t=0) to ``noise`` (t=1)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    z0, noise = np.asarray(z0), np.asarray(noise)
    if z0.shape != noise.shape:
        raise DimensionError(f"shape mismatch {z0.shape} vs {noise.shape}")
    return (1.0 - t) * z0 + t * noise


def velocity_loss(predicted, z0, noise) -> float:
    predicted, z0, noise = (np.asarray(a) for a in (predicted, z0, noise))
    if not predicted.shape == z0.shape == noise.shape:
        raise DimensionError("predicted, z0 and noise must share a shape")
    diff = predicted - (noise - z0)
    return float(np.mean(diff * diff))


def velocity_loss_grad(predicted, z0, noise):
    diff = predicted - (noise - z0)
    return 2.0 * diff / diff.size


# ---------------------------------------------------------------- correspondence terms


def corr_loss(soft_matches, pseudo_gt: CorrespondenceSet) -> float:
    """Mean squared distance between soft matches and reliable pseudo ground truth.

    ``soft_matches`` is aligned row-for-row with ``pseudo_gt``. With no
    reliable entries the term is 0 (the step simply carries no supervision).
    """
    err = _corr_residual(soft_matches, pseudo_gt)
    if err is None:
        return 0.0
    return float(np.mean(np.sum(err * err, axis=1)))


def corr_loss_grad(soft_matches, pseudo_gt: CorrespondenceSet):
    soft_matches = np.asarray(soft_matches)
    grad = np.zeros_like(soft_matches)
    err = _corr_residual(soft_matches, pseudo_gt)
    if err is not None:
        grad[np.asarray(pseudo_gt.reliable, dtype=bool)] = 2.0 * err / len(err)
    return grad


def linearize(pseudo_gt: CorrespondenceSet, garment_width: int) -> CorrespondenceSet:
    """Same set with matches expressed as (N, 1) row-major garment indices."""
    m = np.asarray(pseudo_gt.matches, dtype=float)
    return CorrespondenceSet(pseudo_gt.queries, m[:, :1] * garment_width + m[:, 1:], pseudo_gt.reliable)


def _corr_residual(soft_matches, pseudo_gt):
    soft_matches = np.asarray(soft_matches, dtype=float)
    target = np.asarray(pseudo_gt.matches, dtype=float)
    if soft_matches.shape != target.shape:
        raise DimensionError(f"soft matches {soft_matches.shape} do not align with targets {target.shape}")
    rel = np.asarray(pseudo_gt.reliable, dtype=bool)
    if not rel.any():
        return None
    return soft_matches[rel] - target[rel]


def _check_rows(rows, atol):
    rows = np.asarray(rows)
    if np.any(rows < 0):
        raise InvalidDistributionError("negative attention weight")
    sums = rows.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > atol):
        raise InvalidDistributionError(f"rows must sum to 1 (worst {sums[np.argmax(np.abs(sums - 1))]!r})")
    return rows


def entropy_loss(rows, atol: float = 1e-6) -> float:
    """Mean Shannon entropy over person-query attention rows (N, N_k)."""
    rows = _check_rows(np.atleast_2d(rows), atol)
    return float(np.mean(entropies(rows)))


def entropy_loss_grad(rows):
    rows = np.atleast_2d(rows)
    return entropies_vjp(rows, np.full(rows.shape[0], 1.0 / rows.shape[0]))


def coral_loss(corr: float, ent: float, weights: LossWeights) -> float:
    return weights.lambda_corr * corr + weights.lambda_ent * ent


def total_loss(velocity: float, coral: float) -> float:
    return velocity + coral


# ---------------------------------------------------------------- feature alignment baseline


def silu(x):
    return x / (1.0 + np.exp(-x))


def silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


class ProjectionHead:
    """Three affine stages with SiLU between them, mapping hidden states to descriptor space."""

    names = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, params: dict):
        self.params = params

    @classmethod
    def init(cls, rng, in_dim, hidden_dim, out_dim, dtype=np.float64):
        p = {
            "w1": rng.normal(0, 1 / np.sqrt(in_dim), (in_dim, hidden_dim)),
            "b1": np.zeros(hidden_dim),
            "w2": rng.normal(0, 1 / np.sqrt(hidden_dim), (hidden_dim, hidden_dim)),
            "b2": np.zeros(hidden_dim),
            "w3": rng.normal(0, 1 / np.sqrt(hidden_dim), (hidden_dim, out_dim)),
            "b3": np.zeros(out_dim),
        }
        return cls({k: v.astype(dtype) for k, v in p.items()})

    def forward(self, h):
        p = self.params
        u1 = h @ p["w1"] + p["b1"]
        a1 = silu(u1)
        u2 = a1 @ p["w2"] + p["b2"]
        a2 = silu(u2)
        out = a2 @ p["w3"] + p["b3"]
        return out, (h, u1, a1, u2, a2)

    def backward(self, cache, d_out):
        h, u1, a1, u2, a2 = cache
        p = self.params
        g = {"w3": a2.T @ d_out, "b3": d_out.sum(0)}
        d_u2 = (d_out @ p["w3"].T) * silu_grad(u2)
        g["w2"], g["b2"] = a1.T @ d_u2, d_u2.sum(0)
        d_u1 = (d_u2 @ p["w2"].T) * silu_grad(u1)
        g["w1"], g["b1"] = h.T @ d_u1, d_u1.sum(0)
        return d_u1 @ p["w1"].T, g


def negative_mean_cosine(projected, targets, eps: float = 1e-8):
    """``-mean_k cos(targets_k, projected_k)`` and its gradient w.r.t. ``projected``."""
    projected, targets = np.asarray(projected), np.asarray(targets)
    if projected.shape != targets.shape:
        raise DimensionError(f"patch mismatch: {projected.shape} vs {targets.shape}")
    pn = np.sqrt(np.sum(projected * projected, axis=1, keepdims=True) + eps * eps)
    tn = np.linalg.norm(targets, axis=1, keepdims=True)
    tu, pu = targets / tn, projected / pn
    cos = np.sum(tu * pu, axis=1, keepdims=True)
    k = projected.shape[0]
    grad = -(tu - cos * pu) / pn / k
    return -float(cos.mean()), grad


def repa_loss(hidden_states, garment_desc, person_desc, heads, with_grad: bool = False):
    """Patch-wise feature alignment averaged across layers.

    ``hidden_states`` holds, per block, the hidden vectors of the garment
    tokens followed by the person tokens; the targets are the two descriptor
    grids flattened in the same order (garment panel left of person panel).
    """
    target = np.concatenate(
        [np.asarray(garment_desc).reshape(-1, garment_desc.shape[-1]),
         np.asarray(person_desc).reshape(-1, person_desc.shape[-1])],
        axis=0,
    )
    if len(hidden_states) != len(heads) or not heads:
        raise DimensionError("need one projection head per hidden state")
    total, d_hidden, head_grads = 0.0, [], []
    scale = 1.0 / len(heads)
    for h, head in zip(hidden_states, heads):
        if h.shape[0] != target.shape[0]:
            raise DimensionError(f"{h.shape[0]} hidden patches vs {target.shape[0]} descriptor patches")
        proj, cache = head.forward(h)
        value, d_proj = negative_mean_cosine(proj, target.astype(proj.dtype))
        total += scale * value
        if with_grad:
            dh, g = head.backward(cache, d_proj * scale)
            d_hidden.append(dh)
            head_grads.append(g)
    if with_grad:
        return total, d_hidden, head_grads
    return total


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    finite: bool = True

    @property
    def passed(self) -> bool:
        return self.finite and all(e < self.tolerance for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(
    loss_fn: Callable[[dict], tuple[float, dict]],
    parameters: dict,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    max_entries: int | None = None,
    rng=None,
) -> GradCheckReport:
    """Compare ``loss_fn``'s analytic gradients against central differences.

    ``loss_fn(params) -> (loss, grads)``. Parameters are perturbed in place and
    restored. ``max_entries`` samples that many coordinates per parameter
    instead of sweeping all of them.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in parameters.items()}
    _, grads = loss_fn(params)
    errors, finite = {}, True
    rng = rng if rng is not None else np.random.default_rng(0)
    for name, value in params.items():
        analytic = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(analytic)):
            finite = False
            errors[name] = float("inf")
            continue
        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        numeric = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            plus, _ = loss_fn(params)
            flat[i] = orig - step
            minus, _ = loss_fn(params)
            flat[i] = orig
            numeric[n] = (plus - minus) / (2 * step)
        if not np.all(np.isfinite(numeric)):
            finite = False
        errors[name] = relative_error(analytic.reshape(-1)[idx], numeric)
    return GradCheckReport(errors, tolerance, finite)
