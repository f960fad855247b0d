"""Seeded training runs and attention-correspondence evaluation.

A run directory contains:

- ``config.json``   the full :class:`RunConfig`
- ``losses.jsonl``  one :class:`~coral.losses.LossReport` per step
- ``metrics.csv``   periodic held-out evaluation rows
- ``model.ckpt``    final checkpoint (parameters + optimiser state)
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .attention import entropies, extract_sub_attention, hard_correspondence
from .errors import ConfigError
from .losses import LossWeights, velocity_loss
from .matching import CorrespondenceSet, dense_pseudo_gt, pck
from .model import (
    Adam,
    DiptychModel,
    ModelConfig,
    Sample,
    join_panels,
    load_checkpoint,
    model_inputs_for,
    save_checkpoint,
    train_step,
)
from .synthetic import generate_task

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "velocity", "corr", "ent", "total", "pck_a1", "pck_a2", "pck_a4", "mean_entropy")
EVAL_ALPHAS = (1.0, 2.0, 4.0)
EVAL_TIMESTEPS = (0.25, 0.5, 0.75)
_EVAL_STREAM = 7_919
_TRAIN_STREAM = 104_729


@dataclass
class RunConfig:
    seed: int = 0
    steps: int = 2000
    lambda_corr: float = 0.01
    lambda_ent: float = 0.1
    lambda_repa: float = 0.0
    gamma: float = 3.0
    alpha: float = 2.0
    pose_mode: str = "token"
    renormalize: bool = True
    coords: str = "2d"
    grid: tuple[int, int] = (8, 8)
    channels: int = 4
    model_dim: int = 64
    heads: int = 2
    layers: int = 2
    batch: int = 4
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    clip_norm: float | None = 1.0
    warps: tuple[str, ...] = ("permutation", "block-shuffle", "smooth-warp")
    density: float = 0.5
    noise: float = 0.1
    tasks: int = 16
    eval_noise: float = 0.0
    eval_every: int = 100
    eval_timesteps: tuple[float, ...] = EVAL_TIMESTEPS
    checkpoint_every: int = 0

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_corr, self.lambda_ent, self.lambda_repa)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            height=self.grid[0], width=self.grid[1], channels=self.channels, model_dim=self.model_dim,
            heads=self.heads, layers=self.layers, pose_mode=self.pose_mode, seed=self.seed,
            repa_heads=self.lambda_repa > 0,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in names}
        for k in ("grid", "warps", "eval_timesteps"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# Loss-component ablation: (I) baseline, (II) entropy only, (III) correspondence only, (IV) both.
ABLATION = {
    "I": dict(lambda_corr=0.0, lambda_ent=0.0),
    "II": dict(lambda_corr=0.0, lambda_ent=0.1),
    "III": dict(lambda_corr=0.01, lambda_ent=0.0),
    "IV": dict(lambda_corr=0.01, lambda_ent=0.1),
    "REPA": dict(lambda_corr=0.0, lambda_ent=0.0, lambda_repa=0.1),
}


def learning_rate(cfg: RunConfig, step: int) -> float:
    """Step size for ``step``: constant, or cosine-annealed to zero over ``cfg.steps``."""
    if cfg.lr_schedule == "constant":
        return cfg.lr
    if cfg.lr_schedule == "cosine":
        return 0.5 * cfg.lr * (1.0 + np.cos(np.pi * step / max(cfg.steps, 1)))
    raise ConfigError(f"unknown lr schedule {cfg.lr_schedule!r}")


def ablation_config(name: str, **overrides) -> RunConfig:
    return RunConfig(**{**ABLATION[name], **overrides})


# ---------------------------------------------------------------- data


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class PreparedTask:
    task: object
    pseudo_gt: CorrespondenceSet
    reliability: np.ndarray


def prepare_task(seed: int, cfg: RunConfig, noise: float, warp: str | None = None) -> PreparedTask:
    rng = np.random.default_rng(seed)
    warp = warp or cfg.warps[rng.integers(len(cfg.warps))]
    task = generate_task(seed, cfg.grid, warp, noise, cfg.density, cfg.channels)
    pgt, rel = dense_pseudo_gt(task.person_desc, task.garment_desc, task.person_mask, task.garment_mask, cfg.gamma)
    return PreparedTask(task, pgt, rel)


def make_sample(prep: PreparedTask, t: float, noise: np.ndarray) -> Sample:
    task = prep.task
    return Sample(
        task.garment, task.person, task.pose, task.person_mask, task.garment_mask, task.edit_mask,
        prep.pseudo_gt, float(t), noise, task.garment_desc, task.person_desc,
    )


def training_batch(cfg: RunConfig, step: int) -> list:
    """Fresh tasks for ``step``; a pure function of (seed, step)."""
    h, w = cfg.grid
    batch = []
    for b in range(cfg.batch):
        prep = prepare_task(_seed(cfg.seed, _TRAIN_STREAM, step, b), cfg, cfg.noise)
        rng = np.random.default_rng(_seed(cfg.seed, _TRAIN_STREAM, step, b, 1))
        t = rng.uniform(0.0, 1.0)
        batch.append(make_sample(prep, t, rng.standard_normal((h, 2 * w, cfg.channels))))
    return batch


def eval_tasks(cfg: RunConfig, n: int | None = None) -> list:
    n = cfg.tasks if n is None else n
    return [prepare_task(_seed(cfg.seed, _EVAL_STREAM, i), cfg, cfg.eval_noise) for i in range(n)]


# ---------------------------------------------------------------- evaluation


def readout_metrics(attention: list, sequence, task, pseudo_gt: CorrespondenceSet, alphas=EVAL_ALPHAS,
                    with_matches: bool = False):
    """Per-layer PCK (hard argmax readout vs pseudo-GT) and mean person-row entropy."""
    out = []
    qi = sequence.grid_tokens("person", np.argwhere(task.person_mask))
    for attn in attention:
        sub = extract_sub_attention(attn, sequence, task.person_mask, task.garment_mask)
        pred = hard_correspondence(sub)
        rows = attn[:, qi, :].mean(axis=0)
        m = {
            "pck": {a: pck(pred, pseudo_gt, a) for a in alphas},
            "entropy": float(entropies(rows.astype(np.float64)).mean()),
        }
        if with_matches:
            m["pred"] = pred
        out.append(m)
    return out


def oracle_attention(sequence, task) -> list:
    """A one-layer, one-head attention map that is one-hot at the true match.

    Person rows point at their true garment cell; every other row attends
    to itself.
    """
    n = len(sequence)
    attn = np.zeros((1, n, n))
    attn[0, np.arange(n), np.arange(n)] = 1.0
    qi = sequence.grid_tokens("person", task.truth.queries)
    ki = sequence.grid_tokens("garment", np.asarray(task.truth.matches).astype(int))
    attn[0, qi, :] = 0.0
    attn[0, qi, ki] = 1.0
    return [attn]


def chance_pck(task, pseudo_gt: CorrespondenceSet, alpha: float) -> float:
    """Expected PCK of a uniformly random garment-cell guess per query."""
    g = np.argwhere(task.garment_mask).astype(float)
    rel = pseudo_gt.reliable
    gt = np.asarray(pseudo_gt.matches)[rel]
    d = np.linalg.norm(gt[:, None, :] - g[None, :, :], axis=-1)
    return float(np.mean(np.mean(d < alpha, axis=1)))


@dataclass
class EvalResult:
    pck: dict  # alpha -> mean over samples
    entropy: float
    velocity: float
    per_sample: list = field(default_factory=list)
    per_query: list = field(default_factory=list)

    def row(self) -> dict:
        return {"pck_a1": self.pck[1.0], "pck_a2": self.pck[2.0], "pck_a4": self.pck[4.0], "mean_entropy": self.entropy}


PER_QUERY_COLUMNS = ("task", "t", "layer", "query_r", "query_c", "pred_r", "pred_c", "gt_r", "gt_c", "reliable")


def evaluate(model: DiptychModel, cfg: RunConfig, tasks: list, timesteps=None, alphas=EVAL_ALPHAS,
             noise_stream: int = 0, oracle: bool = False, per_query: bool = False) -> EvalResult:
    """Average hard-readout PCK and entropy over tasks x timesteps x layers.

    Per-sample entries also carry the held-out velocity loss (averaged over
    the same timesteps) used by the correlation analysis. With ``oracle`` the
    model's attention is replaced by :func:`oracle_attention`.
    """
    timesteps = cfg.eval_timesteps if timesteps is None else timesteps
    h, w = cfg.grid
    per_sample, queries = [], []
    for i, prep in enumerate(tasks):
        if prep.pseudo_gt.n_reliable == 0:
            continue
        task = prep.task
        pcks = {a: [] for a in alphas}
        ents, vels = [], []
        for k, t in enumerate(timesteps):
            noise = np.random.default_rng(_seed(cfg.seed, _EVAL_STREAM, noise_stream, i, k)).standard_normal(
                (h, 2 * w, task.garment.shape[2])
            )
            inputs, _ = model_inputs_for(model.config, task.garment, task.person, task.edit_mask, task.pose, t, noise)
            fwd = model.forward(inputs)
            vels.append(velocity_loss(fwd.velocity.astype(np.float64), join_panels(task.garment, task.person), noise))
            attention = oracle_attention(fwd.sequence, task) if oracle else fwd.attention
            metrics = readout_metrics(attention, fwd.sequence, task, prep.pseudo_gt, alphas, per_query)
            for layer, m in enumerate(metrics):
                for a in alphas:
                    pcks[a].append(m["pck"][a])
                ents.append(m["entropy"])
                if per_query:
                    gt = prep.pseudo_gt
                    for q, p, g, r in zip(gt.queries, m["pred"].matches, gt.matches, gt.reliable):
                        queries.append((i, float(t), layer, int(q[0]), int(q[1]), int(p[0]), int(p[1]),
                                        float(g[0]), float(g[1]), int(bool(r))))
        per_sample.append({
            "task": i, "seed": task.seed, "warp": task.warp,
            "pck": {a: float(np.mean(v)) for a, v in pcks.items()},
            "entropy": float(np.mean(ents)), "velocity": float(np.mean(vels)),
            "chance": {a: chance_pck(task, prep.pseudo_gt, a) for a in alphas},
        })
    if not per_sample:
        raise ValueError("no evaluable tasks (every task lost all reliable queries)")
    return EvalResult(
        {a: float(np.mean([s["pck"][a] for s in per_sample])) for a in alphas},
        float(np.mean([s["entropy"] for s in per_sample])),
        float(np.mean([s["velocity"] for s in per_sample])),
        per_sample,
        queries,
    )


# ---------------------------------------------------------------- training run


def _fmt(v) -> str:
    return repr(float(v)) if not isinstance(v, (int, np.integer)) else str(v)


def train(cfg: RunConfig, out_dir, resume=None, progress=None) -> Path:
    """Run ``cfg.steps`` optimiser steps (continuing from ``resume`` if given)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    weights = cfg.weights

    if resume is not None:
        model, opt, start, _ = load_checkpoint(resume)
        if opt is None:
            opt = Adam(cfg.lr, clip_norm=cfg.clip_norm)
    else:
        model = DiptychModel(cfg.model_config())
        opt = Adam(cfg.lr, clip_norm=cfg.clip_norm)
        start = 0
    held_out = eval_tasks(cfg) if cfg.steps > start else []

    window = []
    with open(out / "losses.jsonl", "w") as lfh, open(out / "metrics.csv", "w", newline="") as mfh:
        writer = csv.writer(mfh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for step in range(start, cfg.steps):
            opt.lr = learning_rate(cfg, step)
            report = train_step(model, opt, training_batch(cfg, step), weights, step, cfg.renormalize, cfg.coords)
            lfh.write(report.to_json() + "\n")
            window.append(report)
            done = step + 1
            if done % cfg.eval_every == 0 or done == cfg.steps:
                ev = evaluate(model, cfg, held_out)
                vals = [np.mean([getattr(r, k) for r in window]) for k in ("velocity", "corr", "ent", "total")]
                writer.writerow([done] + [_fmt(v) for v in vals] + [_fmt(v) for v in ev.row().values()])
                mfh.flush()
                window = []
                log.info("step %d velocity %.4f pck@2 %.3f entropy %.3f", done, vals[0], ev.pck[2.0], ev.entropy)
                if progress:
                    progress(done, ev)
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"model_{done:06d}.ckpt", model, opt, done)
    save_checkpoint(out / "model.ckpt", model, opt, max(start, cfg.steps))
    return out


def read_metrics(run_dir) -> list[dict]:
    with open(Path(run_dir) / "metrics.csv", newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def read_losses(run_dir) -> list:
    from .losses import LossReport

    with open(Path(run_dir) / "losses.jsonl") as fh:
        return [LossReport.from_json(line) for line in fh if line.strip()]


def load_run_config(run_dir) -> RunConfig:
    return RunConfig.from_dict(json.loads((Path(run_dir) / "config.json").read_text()))


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)
