"""Multimodal full attention over a segmented token sequence.

The sequence layout is ``[context | garment | person | pose]``. Garment and
person tokens carry 2-D positions on the diptych canvas (person columns are
offset by the panel width); pose tokens reuse the person positions exactly,
so RoPE rotates a pose token and its person counterpart identically.

Everything here is plain numpy with hand-written vector-Jacobian products
(``*_vjp``) so the losses can be back-propagated into the layer parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DegenerateError,
    DimensionError,
    EmptyDomainError,
    InvalidDistributionError,
)
from .matching import CorrespondenceSet

SEGMENT_ORDER = ("context", "garment", "person", "pose")
DEFAULT_ROPE_BASE = 100.0


# ---------------------------------------------------------------- layout


@dataclass(frozen=True)
class Segment:
    name: str
    count: int
    offset: int
    grid_shape: tuple[int, int] | None = None

    @property
    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.count)


@dataclass
class TokenSequence:
    """Token embeddings plus the segment table and per-token 2-D positions."""

    segments: list[Segment]
    embeddings: np.ndarray  # (N, D)
    positions: np.ndarray  # (N, 2)

    def __post_init__(self):
        names = tuple(s.name for s in self.segments)
        if names != SEGMENT_ORDER:
            raise ConfigError(f"segments must be ordered {SEGMENT_ORDER}, got {names}")
        n = sum(s.count for s in self.segments)
        if self.embeddings.shape[0] != n or self.positions.shape != (n, 2):
            raise DimensionError("embeddings/positions do not match the segment table")
        pose, person = self.segment("pose"), self.segment("person")
        if pose.count:
            if pose.grid_shape != person.grid_shape:
                raise DimensionError("pose grid must mirror the person grid")
            if not np.array_equal(self.positions[pose.slice], self.positions[person.slice]):
                raise ConfigError("pose tokens must share the person positional indices")

    def __len__(self):
        return self.embeddings.shape[0]

    def segment(self, name: str) -> Segment:
        for s in self.segments:
            if s.name == name:
                return s
        raise KeyError(name)

    def grid_tokens(self, name: str, locations: np.ndarray) -> np.ndarray:
        """Token indices of ``(row, col)`` cells inside a grid segment."""
        seg = self.segment(name)
        if seg.grid_shape is None:
            raise ConfigError(f"segment {name!r} has no grid")
        locations = np.asarray(locations, dtype=int).reshape(-1, 2)
        return seg.offset + locations[:, 0] * seg.grid_shape[1] + locations[:, 1]


def diptych_layout(height: int, width: int, context: int = 0, pose: bool = True):
    """Segment table and positions for a ``height x width`` per-panel diptych.

    Context tokens sit at position (0, 0). Garment cell (r, c) is at (r, c),
    person cell (r, c) at (r, c + width), and pose tokens copy the person
    positions.
    """
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    grid = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(float)
    person = grid + np.array([0.0, width])
    hw = height * width
    counts = (context, hw, hw, hw if pose else 0)
    shapes = (None, (height, width), (height, width), (height, width))
    segments, offset = [], 0
    for name, count, shape in zip(SEGMENT_ORDER, counts, shapes):
        segments.append(Segment(name, count, offset, shape))
        offset += count
    positions = np.concatenate(
        [np.zeros((context, 2)), grid, person] + ([person.copy()] if pose else []), axis=0
    )
    return segments, positions


# ---------------------------------------------------------------- rope


def rope_frequencies(head_dim: int, base: float = DEFAULT_ROPE_BASE) -> np.ndarray:
    """Per-axis rotation frequencies for 2-D RoPE (``head_dim // 4`` of them)."""
    if head_dim % 4:
        raise ConfigError(f"2-D RoPE needs head_dim divisible by 4, got {head_dim}")
    n = head_dim // 4
    return base ** (-np.arange(n) / n)


def _rope_angles(positions, freqs):
    positions = np.asarray(positions, dtype=float)
    return np.concatenate([positions[:, :1] * freqs, positions[:, 1:2] * freqs], axis=1)


def apply_rope(x: np.ndarray, positions: np.ndarray, freqs: np.ndarray | None = None, inverse: bool = False):
    """Rotate consecutive channel pairs of ``x`` (..., N, d) by position-dependent angles.

    The first half of the planes rotates with the row index, the second half
    with the column index. ``inverse=True`` applies the transposed rotation,
    which is also the VJP of the forward rotation.
    """
    d = x.shape[-1]
    if d % 4:
        raise ConfigError(f"2-D RoPE needs an even number of planes per axis (d % 4 == 0), got d={d}")
    if freqs is None:
        freqs = rope_frequencies(d)
    freqs = np.asarray(freqs, dtype=float)
    if freqs.shape != (d // 4,):
        raise ConfigError(f"expected {d // 4} frequencies, got {freqs.shape}")
    ang = _rope_angles(positions, freqs)
    if inverse:
        ang = -ang
    cos, sin = np.cos(ang).astype(x.dtype), np.sin(ang).astype(x.dtype)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


# ---------------------------------------------------------------- softmax & readouts


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. logits given ``p = softmax(logits)`` and upstream ``g``."""
    return p * (g - np.sum(g * p, axis=-1, keepdims=True))


def _xlogx_terms(p):
    logp = np.log(np.where(p > 0, p, 1.0))
    return p * logp, logp


def entropies(rows: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of each row, no validation. 0 log 0 := 0."""
    plogp, _ = _xlogx_terms(rows)
    return -plogp.sum(axis=-1)


def entropies_vjp(rows: np.ndarray, g: np.ndarray) -> np.ndarray:
    """VJP of :func:`entropies` w.r.t. the row entries (zero entries get 0)."""
    _, logp = _xlogx_terms(rows)
    grad = -(logp + 1.0) * g[..., None]
    return np.where(rows > 0, grad, 0.0)


def row_entropy(row, atol: float = 1e-6) -> float:
    """Entropy of a single probability vector, natural log."""
    row = np.asarray(row, dtype=float)
    if row.ndim != 1 or row.size == 0:
        raise DimensionError("row must be a non-empty 1-D vector")
    if np.any(row < 0):
        raise InvalidDistributionError("negative probability")
    if abs(row.sum() - 1.0) > atol:
        raise InvalidDistributionError(f"row sums to {row.sum()!r}, not 1")
    return float(entropies(row))


def soft_argmax(rows: np.ndarray, locations: np.ndarray, renormalize: bool = True) -> np.ndarray:
    """Attention-weighted mean key coordinate for each row.

    With ``renormalize`` each row is first divided by its own mass so the
    weights sum to one over the supplied keys.
    """
    if renormalize:
        mass = rows.sum(axis=-1, keepdims=True)
        if np.any(mass <= 0):
            raise DegenerateError("a row has zero mass over the garment keys")
        rows = rows / mass
    return rows @ locations


def soft_argmax_vjp(rows, locations, g, renormalize: bool = True):
    dnorm = g @ np.asarray(locations).T
    if not renormalize:
        return dnorm
    mass = rows.sum(axis=-1, keepdims=True)
    normed = rows / mass
    return (dnorm - np.sum(dnorm * normed, axis=-1, keepdims=True)) / mass


# ---------------------------------------------------------------- layer


@dataclass
class AttentionLayer:
    """Multi-head projections. Weight shapes: ``wq/wk/wv`` (D, H*d), ``wo`` (H*d, D)."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int
    rope_base: float = DEFAULT_ROPE_BASE

    def __post_init__(self):
        inner = self.wq.shape[1]
        if inner % self.heads or inner == 0:
            raise ConfigError("projection width must be a positive multiple of heads")
        for w in (self.wq, self.wk, self.wv, self.wo):
            if not np.all(np.isfinite(w)):
                raise ConfigError("non-finite projection weights")

    @property
    def head_dim(self) -> int:
        return self.wq.shape[1] // self.heads

    @classmethod
    def init(cls, rng, model_dim, heads, head_dim, dtype=np.float64, rope_base=DEFAULT_ROPE_BASE):
        scale = 1.0 / np.sqrt(model_dim)
        shape = (model_dim, heads * head_dim)
        wq, wk, wv = (rng.normal(0, scale, shape).astype(dtype) for _ in range(3))
        wo = rng.normal(0, 1.0 / np.sqrt(heads * head_dim), shape[::-1]).astype(dtype)
        return cls(wq, wk, wv, wo, heads, rope_base)

    def params(self) -> dict:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


@dataclass
class _AttnCache:
    x: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    ctx: np.ndarray
    positions: np.ndarray
    freqs: np.ndarray = field(repr=False)


def _split_heads(x, heads):
    n, inner = x.shape
    return x.reshape(n, heads, inner // heads).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d)


def attention_forward(layer: AttentionLayer, x: np.ndarray, positions: np.ndarray):
    """Returns ``(outputs (N, D), attention (H, N, N), cache)``."""
    if x.ndim != 2 or x.shape[0] == 0:
        raise DimensionError("attention input must be a non-empty (N, D) matrix")
    freqs = rope_frequencies(layer.head_dim, layer.rope_base)
    q = apply_rope(_split_heads(x @ layer.wq, layer.heads), positions, freqs)
    k = apply_rope(_split_heads(x @ layer.wk, layer.heads), positions, freqs)
    v = _split_heads(x @ layer.wv, layer.heads)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(layer.head_dim).astype(x.dtype)
    attn = softmax(scores)
    ctx = _merge_heads(attn @ v)
    out = ctx @ layer.wo
    return out, attn, _AttnCache(x, q, k, v, attn, ctx, positions, freqs)


def attention_backward(layer: AttentionLayer, cache: _AttnCache, d_out: np.ndarray, d_attn=None):
    """Back-propagate ``d_out`` (and optional direct gradient on the attention map).

    Returns ``(d_x, grads)`` with ``grads`` keyed like :meth:`AttentionLayer.params`.
    """
    grads = {"wo": cache.ctx.T @ d_out}
    d_ctx = _split_heads(d_out @ layer.wo.T, layer.heads)
    d_attn_total = d_ctx @ cache.v.transpose(0, 2, 1)
    if d_attn is not None:
        d_attn_total = d_attn_total + d_attn
    d_v = cache.attn.transpose(0, 2, 1) @ d_ctx
    # d_attn may arrive in float64: readout gradients scale like 1/row-mass, which can
    # overflow float32 even though the logit-space product below stays bounded
    d_scores = softmax_vjp(cache.attn, d_attn_total).astype(d_out.dtype) / np.sqrt(layer.head_dim).astype(d_out.dtype)
    d_q = apply_rope(d_scores @ cache.k, cache.positions, cache.freqs, inverse=True)
    d_k = apply_rope(d_scores.transpose(0, 2, 1) @ cache.q, cache.positions, cache.freqs, inverse=True)
    d_q, d_k, d_v = _merge_heads(d_q), _merge_heads(d_k), _merge_heads(d_v)
    grads["wq"] = cache.x.T @ d_q
    grads["wk"] = cache.x.T @ d_k
    grads["wv"] = cache.x.T @ d_v
    d_x = d_q @ layer.wq.T + d_k @ layer.wk.T + d_v @ layer.wv.T
    return d_x, grads


def full_attention(layer: AttentionLayer, sequence: TokenSequence):
    """Joint attention over every token of ``sequence``; returns ``(outputs, attention)``."""
    out, attn, _ = attention_forward(layer, sequence.embeddings, sequence.positions)
    return out, attn


# ---------------------------------------------------------------- person -> garment readout


@dataclass(frozen=True)
class SubAttention:
    """Person-query rows x garment-key columns of an attention map.

    ``values`` is (P, G) after head reduction or (H, P, G) per head;
    ``residual`` is the row mass that fell outside the garment keys.
    """

    values: np.ndarray
    residual: np.ndarray
    query_locations: np.ndarray
    key_locations: np.ndarray
    query_tokens: np.ndarray
    key_tokens: np.ndarray
    garment_shape: tuple[int, int]

    def reduced(self) -> np.ndarray:
        return self.values if self.values.ndim == 2 else self.values.mean(axis=0)


def extract_sub_attention(
    attn: np.ndarray,
    sequence: TokenSequence,
    person_mask: np.ndarray,
    garment_mask: np.ndarray,
    head_reduce: str = "mean",
) -> SubAttention:
    attn = np.asarray(attn)
    if attn.ndim == 2:
        attn = attn[None]
    n = len(sequence)
    if attn.shape[1:] != (n, n):
        raise DimensionError(f"attention map {attn.shape} does not match a {n}-token sequence")
    person, garment = sequence.segment("person"), sequence.segment("garment")
    person_mask = np.asarray(person_mask, dtype=bool)
    garment_mask = np.asarray(garment_mask, dtype=bool)
    if person_mask.shape != person.grid_shape or garment_mask.shape != garment.grid_shape:
        raise DimensionError("masks must match the person/garment grids")
    p_locs, g_locs = np.argwhere(person_mask), np.argwhere(garment_mask)
    if len(p_locs) == 0 or len(g_locs) == 0:
        raise EmptyDomainError("empty person or garment index set")
    qi = sequence.grid_tokens("person", p_locs)
    ki = sequence.grid_tokens("garment", g_locs)
    rows = attn[:, qi, :]
    block = rows[:, :, ki]
    if head_reduce == "mean":
        block = block.mean(axis=0)
        residual = rows.mean(axis=0).sum(axis=-1) - block.sum(axis=-1)
    elif head_reduce == "per-head":
        residual = rows.sum(axis=-1) - block.sum(axis=-1)
    else:
        raise ValueError(f"unknown head_reduce {head_reduce!r}")
    return SubAttention(block, residual, p_locs, g_locs, qi, ki, garment.grid_shape)


def key_coordinates(sub: SubAttention, coords: str = "2d") -> np.ndarray:
    """Garment key coordinates as (G, 2) cells, or (G, 1) row-major linear indices."""
    if coords == "2d":
        return sub.key_locations.astype(float)
    if coords == "linear":
        return (sub.key_locations[:, :1] * sub.garment_shape[1] + sub.key_locations[:, 1:]).astype(float)
    raise ValueError(f"unknown coordinate mode {coords!r}")


def hard_correspondence(sub: SubAttention) -> CorrespondenceSet:
    values = sub.reduced()
    if values.size == 0:
        raise EmptyDomainError("empty sub-attention")
    best = np.argmax(values, axis=1)
    matches = sub.key_locations[best].astype(float)
    return CorrespondenceSet(sub.query_locations.copy(), matches, np.ones(len(best), dtype=bool))


def soft_correspondence(sub: SubAttention, renormalize: bool = True, coords: str = "2d") -> np.ndarray:
    return soft_argmax(sub.reduced(), key_coordinates(sub, coords), renormalize)
