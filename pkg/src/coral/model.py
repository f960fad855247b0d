"""Toy diptych denoiser: canvases, pose injection, a small attention stack, training step.

The model is a velocity predictor for a two-panel latent canvas
``[garment | person]``. Per-token input features are the channel stack
``[noisy latent | conditioning latent | edit mask]``; pose enters either as
extra tokens sharing the person positions or as extra input channels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attention import (
    AttentionLayer,
    SEGMENT_ORDER,
    TokenSequence,
    attention_backward,
    attention_forward,
    diptych_layout,
    entropies,
    entropies_vjp,
    soft_argmax,
    soft_argmax_vjp,
)
from .errors import ConfigError, DimensionError, FormatError, NumericalFailure
from .losses import (
    LossReport,
    LossWeights,
    ProjectionHead,
    corr_loss,
    corr_loss_grad,
    interpolate_latent,
    linearize,
    repa_loss,
    silu,
    silu_grad,
    velocity_loss,
    velocity_loss_grad,
)
from .matching import CorrespondenceSet

POSE_MODES = ("token", "channel", "none")
_RMS_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    height: int = 16
    width: int = 16
    channels: int = 4
    model_dim: int = 64
    heads: int = 2
    layers: int = 2
    ffn_mult: int = 2
    pose_mode: str = "token"
    context_tokens: int = 0
    seed: int = 0
    time_features: int = 8
    rope_base: float = 100.0
    dtype: str = "float32"
    repa_heads: bool = False
    repa_dim: int | None = None

    def __post_init__(self):
        if self.pose_mode not in POSE_MODES:
            raise ConfigError(f"pose_mode must be one of {POSE_MODES}")
        if min(self.height, self.width, self.channels, self.model_dim, self.heads, self.layers) < 1:
            raise ConfigError("sizes must be positive")
        if self.model_dim % self.heads or (self.model_dim // self.heads) % 4:
            raise ConfigError("model_dim / heads must be a multiple of 4 for 2-D RoPE")
        if self.time_features % 2:
            raise ConfigError("time_features must be even")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def input_channels(self) -> int:
        return 2 * self.channels + 1


# ---------------------------------------------------------------- canvases


@dataclass(frozen=True)
class ConditioningCanvas:
    latent: np.ndarray  # (h, 2w, c): [z_g | z_p * (1 - m_e)]
    mask: np.ndarray  # (h, 2w): [0 | m_e]


def join_panels(garment, person):
    garment, person = np.asarray(garment), np.asarray(person)
    if garment.shape[0] != person.shape[0] or garment.shape[2:] != person.shape[2:]:
        raise DimensionError(f"panels {garment.shape} and {person.shape} cannot be joined")
    return np.concatenate([garment, person], axis=1)


def split_panels(canvas, width: int):
    return canvas[:, :width], canvas[:, width:]


def build_diptych(z_g, z_p, m_e, t: float, noise):
    """Noisy canvas at time ``t`` plus the clean conditioning canvases.

    ``noise`` covers the whole canvas, shape ``(h, 2w, c)``.
    """
    z_g, z_p = np.asarray(z_g), np.asarray(z_p)
    m_e = np.asarray(m_e, dtype=bool)
    if z_g.shape != z_p.shape or z_g.ndim != 3:
        raise DimensionError("garment and person latents must share an (h, w, c) shape")
    if m_e.shape != z_p.shape[:2]:
        raise DimensionError("edit mask must match the person grid")
    clean = join_panels(z_g, z_p)
    noise = np.asarray(noise)
    if noise.shape != clean.shape:
        raise DimensionError(f"noise must have the canvas shape {clean.shape}")
    z_t = interpolate_latent(clean, noise, t)
    keep = (~m_e)[:, :, None].astype(z_p.dtype)
    cond = ConditioningCanvas(
        join_panels(z_g, z_p * keep),
        np.concatenate([np.zeros_like(m_e), m_e], axis=1).astype(float),
    )
    return z_t, cond


def masked_noising(z_p, m_p, t: float, noise):
    """Noise only inside ``m_p``; cells outside keep the clean latent."""
    z_p, noise = np.asarray(z_p), np.asarray(noise)
    m = np.asarray(m_p, dtype=float)
    if m.ndim == 2:
        m = m[:, :, None]
    if z_p.shape != noise.shape or m.shape[:2] != z_p.shape[:2]:
        raise DimensionError("z_p, noise and mask shapes disagree")
    return interpolate_latent(z_p, noise, t) * m + z_p * (1.0 - m)


# ---------------------------------------------------------------- token assembly


@dataclass
class ModelInputs:
    features: np.ndarray  # (N, 2c+1)
    segment_ids: np.ndarray  # (N,)
    segments: list
    positions: np.ndarray  # (N, 2)
    t: float
    pose_channels: np.ndarray | None = None  # (N, c) in channel mode
    grid: tuple[int, int] = (0, 0)

    @property
    def n_image_tokens(self) -> int:
        return 2 * self.grid[0] * self.grid[1]


def build_inputs(z_t, cond: ConditioningCanvas, t: float, context_tokens: int = 0) -> ModelInputs:
    """Token features without pose: ``[context | garment | person]``."""
    h, w2, c = z_t.shape
    w = w2 // 2
    segments, positions = diptych_layout(h, w, context_tokens, pose=False)

    def panel_tokens(canvas):
        g, p = split_panels(canvas, w)
        return np.concatenate([g.reshape(h * w, -1), p.reshape(h * w, -1)], axis=0)

    img = np.concatenate(
        [panel_tokens(z_t), panel_tokens(cond.latent), panel_tokens(cond.mask[:, :, None])], axis=1
    )
    feats = np.concatenate([np.zeros((context_tokens, 2 * c + 1)), img], axis=0)
    seg_ids = np.repeat(np.arange(3), [context_tokens, h * w, h * w])
    return ModelInputs(feats, seg_ids, segments, positions, float(t), None, (h, w))


def inject_pose(inputs: ModelInputs, z_pose, mode: str) -> ModelInputs:
    """Add the pose condition as tokens (sharing person positions) or as channels."""
    if mode not in POSE_MODES:
        raise ConfigError(f"unknown pose mode {mode!r}")
    if mode == "none":
        return inputs
    h, w = inputs.grid
    z_pose = np.asarray(z_pose)
    if z_pose.shape[:2] != (h, w):
        raise DimensionError(f"pose grid {z_pose.shape[:2]} does not match person grid {(h, w)}")
    c = z_pose.shape[2]
    ctx = inputs.segments[0].count
    if mode == "token":
        if inputs.segments[3].count:
            raise ConfigError("inputs already carry pose tokens")
        segments, positions = diptych_layout(h, w, ctx, pose=True)
        pose_feats = np.zeros((h * w, inputs.features.shape[1]))
        pose_feats[:, :c] = z_pose.reshape(h * w, c)  # conditioning channels zero-padded
        return replace(
            inputs,
            features=np.concatenate([inputs.features, pose_feats], axis=0),
            segment_ids=np.concatenate([inputs.segment_ids, np.full(h * w, 3)]),
            segments=segments,
            positions=positions,
        )
    # channel mode: pose diptych [zeros | z_pose] stacked onto the image tokens
    pose_ch = np.zeros((inputs.features.shape[0], c))
    pose_ch[ctx + h * w : ctx + 2 * h * w] = z_pose.reshape(h * w, c)
    return replace(inputs, pose_channels=pose_ch)


def time_features(t: float, n: int) -> np.ndarray:
    freqs = np.pi * 2.0 ** np.arange(n // 2)
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)])


# ---------------------------------------------------------------- network


def rms_norm(x):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _RMS_EPS)
    return x / r, r


def rms_norm_vjp(y, r, dy):
    return (dy - y * np.mean(dy * y, axis=-1, keepdims=True)) / r


def block_forward(params: dict, layer: AttentionLayer, x, positions):
    """One pre-norm block: attention + SiLU feed-forward, both residual."""
    a, ra = rms_norm(x)
    attn_out, attn, acache = attention_forward(layer, a, positions)
    h = x + attn_out
    b, rb = rms_norm(h)
    u = b @ params["w1"] + params["b1"]
    s = silu(u)
    out = h + s @ params["w2"] + params["b2"]
    return out, attn, (a, ra, acache, b, rb, u, s)


def block_backward(params: dict, layer: AttentionLayer, cache, d_out, d_attn=None):
    a, ra, acache, b, rb, u, s = cache
    g = {"w2": s.T @ d_out, "b2": d_out.sum(0)}
    d_u = (d_out @ params["w2"].T) * silu_grad(u)
    g["w1"], g["b1"] = b.T @ d_u, d_u.sum(0)
    d_h = d_out + rms_norm_vjp(b, rb, d_u @ params["w1"].T)
    d_a, ag = attention_backward(layer, acache, d_h, d_attn)
    g.update(ag)
    return d_h + rms_norm_vjp(a, ra, d_a), g


@dataclass
class ForwardResult:
    velocity: np.ndarray  # (h, 2w, c)
    attention: list  # per layer (H, N, N)
    hidden: list  # per layer (N, D)
    sequence: TokenSequence
    cache: dict = field(repr=False, default_factory=dict)


class DiptychModel:
    """Parameters live in ``self.params`` (name -> array)."""

    def __init__(self, config: ModelConfig, params: dict | None = None):
        self.config = config
        self.params = params if params is not None else self._init_params()

    def _init_params(self) -> dict:
        cfg, dt = self.config, self.config.np_dtype
        rng = np.random.default_rng(cfg.seed)
        D = cfg.model_dim
        p = {}

        def normal(shape, fan_in):
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), shape).astype(dt)

        p["in_w"] = normal((cfg.input_channels, D), cfg.input_channels)
        p["in_b"] = np.zeros(D, dt)
        p["seg_emb"] = normal((len(SEGMENT_ORDER), D), D) * dt.type(0.5)
        p["t_w"] = normal((cfg.time_features, D), cfg.time_features)
        p["t_b"] = np.zeros(D, dt)
        for l in range(cfg.layers):
            layer = AttentionLayer.init(rng, D, cfg.heads, cfg.head_dim, dt, cfg.rope_base)
            for k, v in layer.params().items():
                p[f"l{l}.{k}"] = v
            hid = D * cfg.ffn_mult
            p[f"l{l}.w1"] = normal((D, hid), D)
            p[f"l{l}.b1"] = np.zeros(hid, dt)
            p[f"l{l}.w2"] = normal((hid, D), hid) * dt.type(0.5)
            p[f"l{l}.b2"] = np.zeros(D, dt)
        p["out_w"] = normal((D, cfg.channels), D) * dt.type(0.5)
        p["out_b"] = np.zeros(cfg.channels, dt)
        if cfg.context_tokens:
            p["ctx_emb"] = normal((cfg.context_tokens, D), D)
        # pose channels widen the input projection; new weights start at zero
        if cfg.pose_mode == "channel":
            p["in_pose_w"] = np.zeros((cfg.channels, D), dt)
        if cfg.repa_heads:
            out = cfg.repa_dim or cfg.channels
            for l in range(cfg.layers):
                head = ProjectionHead.init(rng, D, D, out, dt)
                for k, v in head.params.items():
                    p[f"repa{l}.{k}"] = v
        return p

    # -- helpers
    def layer(self, l: int) -> AttentionLayer:
        p = self.params
        return AttentionLayer(
            p[f"l{l}.wq"], p[f"l{l}.wk"], p[f"l{l}.wv"], p[f"l{l}.wo"], self.config.heads, self.config.rope_base
        )

    def block_params(self, l: int) -> dict:
        return {k: self.params[f"l{l}.{k}"] for k in ("w1", "b1", "w2", "b2")}

    def repa_head(self, l: int) -> ProjectionHead:
        return ProjectionHead({k: self.params[f"repa{l}.{k}"] for k in ProjectionHead.names})

    def copy(self) -> "DiptychModel":
        return DiptychModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype: str) -> "DiptychModel":
        cfg = replace(self.config, dtype=dtype)
        return DiptychModel(cfg, {k: v.astype(dtype) for k, v in self.params.items()})

    # -- forward / backward
    def forward(self, inputs: ModelInputs) -> ForwardResult:
        cfg, p, dt = self.config, self.params, self.config.np_dtype
        feats = inputs.features.astype(dt)
        tf = time_features(inputs.t, cfg.time_features).astype(dt)
        x = feats @ p["in_w"] + p["in_b"] + p["seg_emb"][inputs.segment_ids] + (tf @ p["t_w"] + p["t_b"])
        ctx = inputs.segments[0].count
        if ctx:
            x[:ctx] += p["ctx_emb"][:ctx]
        pose_ch = None
        if cfg.pose_mode == "channel":
            if inputs.pose_channels is None:
                raise ConfigError("channel pose mode needs pose channels in the inputs")
            pose_ch = inputs.pose_channels.astype(dt)
            x = x + pose_ch @ p["in_pose_w"]
        seq = TokenSequence(inputs.segments, x, inputs.positions)

        attns, hidden, caches = [], [], []
        for l in range(cfg.layers):
            x, attn, c = block_forward(self.block_params(l), self.layer(l), x, inputs.positions)
            attns.append(attn)
            hidden.append(x)
            caches.append(c)
        img = slice(ctx, ctx + inputs.n_image_tokens)
        y, r = rms_norm(x[img])
        out = y @ p["out_w"] + p["out_b"]
        h, w = inputs.grid
        hw = h * w
        velocity = join_panels(out[:hw].reshape(h, w, -1), out[hw:].reshape(h, w, -1))
        cache = {"feats": feats, "tf": tf, "pose_ch": pose_ch, "blocks": caches, "y": y, "r": r, "img": img}
        return ForwardResult(velocity, attns, hidden, seq, cache)

    def backward(self, inputs: ModelInputs, fwd: ForwardResult, d_velocity, d_attn=None, d_hidden=None) -> dict:
        """Gradients of all parameters given upstream gradients on the outputs.

        ``d_attn[l]`` (H, N, N) and ``d_hidden[l]`` (N, D) are optional extra
        gradients injected at each block's attention map and output.
        """
        cfg, p, c = self.config, self.params, fwd.cache
        h, w = inputs.grid
        hw = h * w
        dv_g, dv_p = split_panels(d_velocity, w)
        d_out = np.concatenate([dv_g.reshape(hw, -1), dv_p.reshape(hw, -1)], axis=0)
        g = {"out_w": c["y"].T @ d_out, "out_b": d_out.sum(0)}
        n = fwd.sequence.embeddings.shape[0]
        dx = np.zeros((n, cfg.model_dim), dtype=cfg.np_dtype)
        dx[c["img"]] = rms_norm_vjp(c["y"], c["r"], d_out @ p["out_w"].T)
        for l in reversed(range(cfg.layers)):
            if d_hidden is not None and d_hidden[l] is not None:
                dx = dx + d_hidden[l]
            da = None if d_attn is None else d_attn[l]
            dx, bg = block_backward(self.block_params(l), self.layer(l), c["blocks"][l], dx, da)
            for k, v in bg.items():
                g[f"l{l}.{k}"] = v
        g["in_w"] = c["feats"].T @ dx
        g["in_b"] = dx.sum(0)
        seg = np.zeros_like(p["seg_emb"])
        np.add.at(seg, inputs.segment_ids, dx)
        g["seg_emb"] = seg
        dt_emb = dx.sum(0)
        g["t_w"] = np.outer(c["tf"], dt_emb)
        g["t_b"] = dt_emb
        ctx = inputs.segments[0].count
        if "ctx_emb" in p:
            ce = np.zeros_like(p["ctx_emb"])
            ce[:ctx] = dx[:ctx]
            g["ctx_emb"] = ce
        if "in_pose_w" in p:
            g["in_pose_w"] = c["pose_ch"].T @ dx
        for k in p:
            if k not in g:
                g[k] = np.zeros_like(p[k])
        return g


def model_inputs_for(config: ModelConfig, z_g, z_p, m_e, z_pose, t, noise):
    """Full input assembly: diptych canvases, tokens, then pose injection."""
    z_t, cond = build_diptych(z_g, z_p, m_e, t, noise)
    inputs = build_inputs(z_t, cond, t, config.context_tokens)
    return inject_pose(inputs, z_pose, config.pose_mode), z_t


# ---------------------------------------------------------------- correspondence losses on attention


@dataclass
class AttentionTerms:
    corr: float
    ent: float
    per_layer: list
    d_attn: list | None


def attention_terms(
    attention: list,
    sequence: TokenSequence,
    person_mask,
    garment_mask,
    pseudo_gt: CorrespondenceSet,
    lambda_corr: float,
    lambda_ent: float,
    renormalize: bool = True,
    coords: str = "2d",
    with_grad: bool = True,
) -> AttentionTerms:
    """Correspondence and entropy losses over all layers (layer-averaged).

    Heads are averaged before readout. Rows are the person tokens inside the
    person mask; correspondence uses the garment-key block, entropy the full
    row over every key.
    """
    p_locs, g_locs = np.argwhere(person_mask), np.argwhere(garment_mask)
    if not np.array_equal(p_locs, np.asarray(pseudo_gt.queries)):
        raise DimensionError("pseudo ground truth must cover the person-mask cells in row-major order")
    qi = sequence.grid_tokens("person", p_locs)
    ki = sequence.grid_tokens("garment", g_locs)
    gw = sequence.segment("garment").grid_shape[1]
    if coords == "2d":
        locs, target = g_locs.astype(float), pseudo_gt
    else:
        locs, target = (g_locs[:, :1] * gw + g_locs[:, 1:]).astype(float), linearize(pseudo_gt, gw)
    L = len(attention)
    corr_sum = ent_sum = 0.0
    per_layer, d_attn = [], []
    for attn in attention:
        heads = attn.shape[0]
        rows = attn[:, qi, :].astype(np.float64).mean(axis=0)  # (P, N)
        block = rows[:, ki]
        # a row whose garment mass underflowed to zero has no soft match; it is
        # left out of the correspondence term for this step
        live = block.sum(axis=1) > 0 if renormalize else np.ones(len(block), dtype=bool)
        sub = target if live.all() else CorrespondenceSet(
            np.asarray(target.queries)[live], np.asarray(target.matches)[live], np.asarray(target.reliable)[live]
        )
        soft = soft_argmax(block[live], locs, renormalize) if live.any() else None
        corr = corr_loss(soft, sub) if soft is not None else 0.0
        ent_rows = entropies(rows)
        ent = float(ent_rows.mean())
        per_layer.append({"corr": corr, "ent": ent, "dead_rows": int(np.count_nonzero(~live))})
        corr_sum += corr
        ent_sum += ent
        if with_grad:
            d_rows = np.zeros_like(rows)
            if lambda_corr and soft is not None:
                d_soft = corr_loss_grad(soft, sub) * (lambda_corr / L)
                d_rows[np.ix_(live, ki)] += soft_argmax_vjp(block[live], locs, d_soft, renormalize)
            if lambda_ent:
                g = np.full(len(rows), lambda_ent / (L * len(rows)))
                d_rows += entropies_vjp(rows, g)
            da = np.zeros(attn.shape, dtype=np.float64)
            da[:, qi, :] = (d_rows / heads)[None]
            d_attn.append(da)
    return AttentionTerms(corr_sum / L, ent_sum / L, per_layer, d_attn if with_grad else None)


# ---------------------------------------------------------------- optimisers


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        self.lr, self.beta1, self.beta2, self.eps, self.clip_norm = lr, beta1, beta2, eps, clip_norm
        self.m, self.v, self.t = {}, {}, 0

    def hyper(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "clip_norm": self.clip_norm}

    def step(self, params: dict, grads: dict):
        grads = _clip(grads, self.clip_norm)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for k in sorted(params):
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


class SGD:
    def __init__(self, lr=1e-2, clip_norm=None):
        self.lr, self.clip_norm, self.t = lr, clip_norm, 0
        self.m, self.v = {}, {}

    def hyper(self) -> dict:
        return {"kind": "sgd", "lr": self.lr, "clip_norm": self.clip_norm}

    def step(self, params: dict, grads: dict):
        grads = _clip(grads, self.clip_norm)
        self.t += 1
        for k in sorted(params):
            params[k] -= (self.lr * grads[k]).astype(params[k].dtype)


def _clip(grads, clip_norm):
    if not clip_norm:
        return grads
    norm = np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm <= clip_norm:
        return grads
    scale = clip_norm / norm
    return {k: g * np.asarray(scale, dtype=g.dtype) for k, g in grads.items()}


def make_optimizer(hyper: dict):
    hyper = dict(hyper)
    kind = hyper.pop("kind", "adam")
    if kind == "adam":
        return Adam(**hyper)
    if kind == "sgd":
        return SGD(**hyper)
    raise ConfigError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------- training step


@dataclass
class Sample:
    """One training example: a task's grids plus its sampled time and noise."""

    garment: np.ndarray
    person: np.ndarray
    pose: np.ndarray
    person_mask: np.ndarray
    garment_mask: np.ndarray
    edit_mask: np.ndarray
    pseudo_gt: CorrespondenceSet
    t: float
    noise: np.ndarray
    garment_desc: np.ndarray | None = None
    person_desc: np.ndarray | None = None


def sample_loss_and_grads(model, sample: Sample, weights: LossWeights, renormalize=True, coords="2d", with_grad=True):
    cfg = model.config
    inputs, _ = model_inputs_for(
        cfg, sample.garment, sample.person, sample.edit_mask, sample.pose, sample.t, sample.noise
    )
    fwd = model.forward(inputs)
    clean = join_panels(sample.garment, sample.person).astype(cfg.np_dtype)
    noise = sample.noise.astype(cfg.np_dtype)
    vel = velocity_loss(fwd.velocity, clean, noise)
    terms = attention_terms(
        fwd.attention, fwd.sequence, sample.person_mask, sample.garment_mask, sample.pseudo_gt,
        weights.lambda_corr, weights.lambda_ent, renormalize, coords,
        with_grad=with_grad and weights.uses_attention,
    )
    repa_value, d_hidden, head_grads = None, None, None
    if weights.lambda_repa > 0:
        if not cfg.repa_heads:
            raise ConfigError("feature-alignment loss needs a model built with repa_heads=True")
        img = fwd.cache["img"]
        states = [hs[img] for hs in fwd.hidden]
        heads = [model.repa_head(l) for l in range(cfg.layers)]
        repa_value, dh, head_grads = repa_loss(states, sample.garment_desc, sample.person_desc, heads, with_grad=True)
        d_hidden = []
        for d in dh:
            full = np.zeros_like(fwd.hidden[0])
            full[img] = d * np.asarray(weights.lambda_repa, dtype=d.dtype)
            d_hidden.append(full)
    total = vel + weights.lambda_corr * terms.corr + weights.lambda_ent * terms.ent
    if repa_value is not None:
        total += weights.lambda_repa * repa_value
    out = {"velocity": vel, "corr": terms.corr, "ent": terms.ent, "repa": repa_value, "total": total,
           "per_layer": terms.per_layer, "n_reliable": sample.pseudo_gt.n_reliable}
    if not np.isfinite(total):
        raise NumericalFailure("non-finite loss", _diagnose(fwd, sample))
    if not with_grad:
        return out, None
    d_vel = velocity_loss_grad(fwd.velocity, clean, noise)
    grads = model.backward(inputs, fwd, d_vel, terms.d_attn, d_hidden)
    if head_grads is not None:
        for l, hg in enumerate(head_grads):
            for k, v in hg.items():
                grads[f"repa{l}.{k}"] = v * np.asarray(weights.lambda_repa, dtype=v.dtype)
    return out, grads


def _diagnose(fwd: ForwardResult, sample: Sample) -> dict:
    qi = fwd.sequence.grid_tokens("person", np.argwhere(sample.person_mask))
    for l, attn in enumerate(fwd.attention):
        rows = attn[:, qi, :]
        bad = np.argwhere(~np.all(np.isfinite(rows), axis=-1))
        if len(bad):
            hd, r = bad[0]
            return {"layer": l, "head": int(hd), "query_token": int(qi[r]), "row": rows[hd, r].tolist()}
    return {"velocity_finite": bool(np.all(np.isfinite(fwd.velocity)))}


def train_step(model: DiptychModel, optimizer, batch: list, weights: LossWeights, step: int = 0,
               renormalize: bool = True, coords: str = "2d") -> LossReport:
    """One optimiser update on the batch mean of the total loss."""
    acc = None
    stats = []
    for sample in batch:
        out, grads = sample_loss_and_grads(model, sample, weights, renormalize, coords)
        stats.append(out)
        if acc is None:
            acc = grads
        else:
            for k in acc:
                acc[k] += grads[k]
    scale = 1.0 / len(batch)
    for k in acc:
        acc[k] *= np.asarray(scale, dtype=acc[k].dtype)
        if not np.all(np.isfinite(acc[k])):
            raise NumericalFailure(f"non-finite gradient for {k}", {"param": k})
    optimizer.step(model.params, acc)

    def mean(key):
        return float(np.mean([s[key] for s in stats]))

    L = model.config.layers
    per_layer = [
        {"corr": float(np.mean([s["per_layer"][l]["corr"] for s in stats])),
         "ent": float(np.mean([s["per_layer"][l]["ent"] for s in stats]))}
        for l in range(L)
    ]
    velocity, corr, ent = mean("velocity"), mean("corr"), mean("ent")
    repa = mean("repa") if weights.lambda_repa > 0 else None
    total = velocity + weights.lambda_corr * corr + weights.lambda_ent * ent
    if repa is not None:
        total += weights.lambda_repa * repa
    return LossReport(step, velocity, corr, ent, total, repa, int(sum(s["n_reliable"] for s in stats)), per_layer)


def sample_euler(model: DiptychModel, z_g, m_e, z_pose, person_context, steps: int = 8, rng=None):
    """Integrate the learned velocity from noise (t=1) to data (t=0).

    ``person_context`` is the person latent; only its unmasked part is
    visible to the model through the conditioning canvas.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    h, w, c = z_g.shape
    z = rng.standard_normal((h, 2 * w, c))
    ts = np.linspace(1.0, 0.0, steps + 1)
    for t0, t1 in zip(ts[:-1], ts[1:]):
        _, cond = build_diptych(z_g, person_context, m_e, 0.0, np.zeros((h, 2 * w, c)))
        inputs = inject_pose(build_inputs(z, cond, t0, model.config.context_tokens), z_pose, model.config.pose_mode)
        v = model.forward(inputs).velocity
        z = z + (t1 - t0) * v
    return z


# ---------------------------------------------------------------- checkpoints
#
# Layout: b"CORC" | version u8 | header length u32 | UTF-8 JSON header |
# float32 little-endian blob. The header lists every tensor (name, shape,
# section) in blob order; sections are "param", "adam_m", "adam_v".

CKPT_MAGIC = b"CORC"
CKPT_VERSION = 1


def save_checkpoint(path, model: DiptychModel, optimizer=None, step: int = 0, extra: dict | None = None):
    tensors, blobs = [], []
    sections = [("param", model.params)]
    if optimizer is not None and optimizer.m:
        sections += [("adam_m", optimizer.m), ("adam_v", optimizer.v)]
    for section, store in sections:
        for name in sorted(store):
            arr = np.asarray(store[name])
            tensors.append({"name": name, "shape": list(arr.shape), "section": section})
            blobs.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = {
        "config": asdict(model.config),
        "step": int(step),
        "optimizer": None if optimizer is None else {**optimizer.hyper(), "t": optimizer.t},
        "tensors": tensors,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(hbytes)) + hbytes + b"".join(blobs))


def load_checkpoint(path):
    """Returns ``(model, optimizer_or_None, step, extra)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file")
    if len(data) < 9:
        raise FormatError("truncated checkpoint header")
    version, hlen = struct.unpack_from("<BI", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[9 : 9 + hlen])
        config = ModelConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}") from None
    offset = 9 + hlen
    stores = {"param": {}, "adam_m": {}, "adam_v": {}}
    for spec in header["tensors"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        if offset + 4 * count > len(data):
            raise FormatError("checkpoint blob is truncated")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(spec["shape"])
        stores[spec["section"]][spec["name"]] = arr.astype(config.np_dtype)
        offset += 4 * count
    if offset != len(data):
        raise FormatError("checkpoint blob length does not match its header")
    model = DiptychModel(config, stores["param"])
    opt = None
    if header["optimizer"] is not None:
        hyper = dict(header["optimizer"])
        t = hyper.pop("t")
        opt = make_optimizer(hyper)
        opt.t = t
        opt.m, opt.v = stores["adam_m"], stores["adam_v"]
    return model, opt, header["step"], header["extra"]
