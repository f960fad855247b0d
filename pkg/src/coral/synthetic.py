"""Synthetic diptych tasks with known person <-> garment correspondences.

A garment latent is a smooth random field. The person latent copies garment
cells into the person-garment region through a known bijection and fills
everything else with unrelated content. Descriptors are the latents plus
isotropic Gaussian noise, so at zero noise the cosine-argmax pipeline
recovers the bijection exactly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import cord
from .errors import ConfigError, DimensionError, FormatError
from .matching import CorrespondenceSet

WARP_KINDS = ("identity", "permutation", "block-shuffle", "smooth-warp")
MANIFEST_SCHEMA = "coral.task/1"

MANIFEST_JSON_SCHEMA = {
    "type": "object",
    "required": ["schema", "seed", "grid", "channels", "warp", "noise", "density", "files", "correspondences"],
    "properties": {
        "schema": {"const": MANIFEST_SCHEMA},
        "seed": {"type": "integer"},
        "grid": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
        "channels": {"type": "integer", "minimum": 1},
        "warp": {"enum": list(WARP_KINDS)},
        "noise": {"type": "number", "minimum": 0},
        "density": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "files": {"type": "object", "additionalProperties": {"type": "string"}},
        "correspondences": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["person", "garment", "garment_subcell"],
                "properties": {
                    "person": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                    "garment": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                    "garment_subcell": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
                },
            },
        },
    },
}

_FILES = {
    "garment": "garment.cord",
    "person": "person.cord",
    "pose": "pose.cord",
    "garment_desc": "garment_desc.cord",
    "person_desc": "person_desc.cord",
    "garment_mask": "garment_mask.cord",
    "person_mask": "person_mask.cord",
    "edit_mask": "edit_mask.cord",
}


@dataclass
class SyntheticTask:
    garment: np.ndarray  # (h, w, c)
    person: np.ndarray  # (h, w, c)
    pose: np.ndarray  # (h, w, c)
    garment_desc: np.ndarray
    person_desc: np.ndarray
    garment_mask: np.ndarray  # (h, w) bool
    person_mask: np.ndarray
    edit_mask: np.ndarray
    truth: CorrespondenceSet  # person cell -> garment cell, all reliable
    subcell: np.ndarray  # (N, 2) un-rounded garment coordinates
    seed: int
    warp: str
    noise: float
    density: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.garment.shape[:2]


def _smooth_field(rng, h, w, c, sigma):
    field = rng.standard_normal((h, w, c))
    if sigma > 0:
        field = ndimage.gaussian_filter(field, sigma=(sigma, sigma, 0), mode="wrap")
    field -= field.mean(axis=(0, 1))
    field /= field.std(axis=(0, 1)) + 1e-12
    return field


def _blob_mask(rng, h, w, k):
    """The ``k`` highest cells of a smooth field biased toward the centre (a contiguous-ish blob)."""
    rr, cc = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    score = _smooth_field(rng, h, w, 1, max(h, w) / 6)[:, :, 0] * 0.5 - (rr**2 + cc**2)
    order = np.argsort(-score.ravel(), kind="stable")[:k]
    mask = np.zeros(h * w, dtype=bool)
    mask[order] = True
    return mask.reshape(h, w)


def _block_size(h, w):
    for b in (4, 2):
        if h % b == 0 and w % b == 0 and (h // b) * (w // b) > 1:
            return b
    return 1


def _smooth_map(rng, h, w, strength=1.0):
    """A gentle random similarity transform plus a sinusoidal wobble, person -> garment."""
    ang = rng.uniform(-0.25, 0.25) * strength
    scale = 1.0 + rng.uniform(-0.1, 0.1) * strength
    shift = rng.uniform(-1.0, 1.0, 2) * strength
    amp = rng.uniform(0.3, 0.8, 2) * strength
    phase = rng.uniform(0, 2 * np.pi, 2)
    cy, cx = (h - 1) / 2, (w - 1) / 2
    rr, cc = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    y, x = rr - cy, cc - cx
    gy = scale * (np.cos(ang) * y - np.sin(ang) * x) + cy + shift[0] + amp[0] * np.sin(2 * np.pi * cc / w + phase[0])
    gx = scale * (np.sin(ang) * y + np.cos(ang) * x) + cx + shift[1] + amp[1] * np.sin(2 * np.pi * rr / h + phase[1])
    return np.stack([gy, gx], axis=-1)


def generate_task(
    seed: int,
    shape: tuple[int, int] = (16, 16),
    warp: str = "permutation",
    noise: float = 0.0,
    density: float = 0.5,
    channels: int = 4,
    smoothness: float = 1.0,
) -> SyntheticTask:
    """Build one task deterministically from ``seed``."""
    h, w = shape
    if h < 2 or w < 2 or channels < 1:
        raise DimensionError(f"degenerate task shape {(h, w, channels)}")
    if warp not in WARP_KINDS:
        raise ConfigError(f"warp must be one of {WARP_KINDS}")
    if noise < 0:
        raise ConfigError("noise must be >= 0")
    if not 0.0 < density <= 1.0:
        raise ConfigError("density must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    k = max(1, int(round(density * h * w)))

    garment = _smooth_field(rng, h, w, channels, smoothness)
    person_bg = _smooth_field(rng, h, w, channels, smoothness)

    if warp == "identity":
        g_mask = _blob_mask(rng, h, w, k)
        p_cells = np.argwhere(g_mask)
        g_cells = p_cells.copy()
        subcell = g_cells.astype(float)
    elif warp == "permutation":
        g_mask = _blob_mask(rng, h, w, k)
        p_mask = _blob_mask(rng, h, w, k)
        p_cells = np.argwhere(p_mask)
        g_cells = np.argwhere(g_mask)[rng.permutation(k)]
        subcell = g_cells.astype(float)
    elif warp == "block-shuffle":
        b = _block_size(h, w)
        nb_r, nb_c = h // b, w // b
        perm = rng.permutation(nb_r * nb_c)
        # person block q takes garment block perm[q]
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        q = (rr // b) * nb_c + (cc // b)
        src = perm[q]
        g_r = (src // nb_c) * b + rr % b
        g_c = (src % nb_c) * b + cc % b
        g_mask = _blob_mask(rng, h, w, k)
        hit = g_mask[g_r, g_c]
        p_cells = np.argwhere(hit)
        g_cells = np.stack([g_r[hit], g_c[hit]], axis=1)
        subcell = g_cells.astype(float)
    else:  # smooth-warp
        fmap = _smooth_map(rng, h, w)
        g_mask_full = _blob_mask(rng, h, w, k)
        target = np.rint(fmap).astype(int)
        inside = (target[..., 0] >= 0) & (target[..., 0] < h) & (target[..., 1] >= 0) & (target[..., 1] < w)
        p_list, g_list, s_list, used = [], [], [], set()
        for r, c in np.argwhere(inside):
            g = (int(target[r, c, 0]), int(target[r, c, 1]))
            if g_mask_full[g] and g not in used:
                used.add(g)
                p_list.append((r, c))
                g_list.append(g)
                s_list.append(fmap[r, c])
        if not p_list:
            raise DimensionError("smooth warp left no corresponding cells; raise the density")
        p_cells, g_cells, subcell = np.array(p_list), np.array(g_list), np.array(s_list)
        g_mask = np.zeros((h, w), dtype=bool)
        g_mask[g_cells[:, 0], g_cells[:, 1]] = True

    p_mask = np.zeros((h, w), dtype=bool)
    p_mask[p_cells[:, 0], p_cells[:, 1]] = True
    order = np.lexsort((p_cells[:, 1], p_cells[:, 0]))
    p_cells, g_cells, subcell = p_cells[order], g_cells[order], subcell[order]

    person = person_bg.copy()
    person[p_cells[:, 0], p_cells[:, 1]] = garment[g_cells[:, 0], g_cells[:, 1]]

    edit = ndimage.binary_dilation(p_mask, iterations=1)
    pose = np.zeros((h, w, channels))
    rr, cc = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    layout = [p_mask.astype(float), edit.astype(float), rr * p_mask, cc * p_mask]
    for ch in range(channels):
        pose[:, :, ch] = layout[ch % len(layout)]

    garment_desc = garment + noise * rng.standard_normal(garment.shape)
    person_desc = person + noise * rng.standard_normal(person.shape)

    # snap to float32 so the CORD export round-trips exactly
    garment, person, pose, garment_desc, person_desc = (
        a.astype(np.float32).astype(np.float64) for a in (garment, person, pose, garment_desc, person_desc)
    )
    truth = CorrespondenceSet(p_cells, g_cells.astype(float), np.ones(len(p_cells), dtype=bool))
    return SyntheticTask(
        garment, person, pose, garment_desc, person_desc, g_mask, p_mask, edit,
        truth, subcell, int(seed), warp, float(noise), float(density),
    )


def export_task(task: SyntheticTask, directory: str | os.PathLike) -> Path:
    """Write every grid/mask as CORD v1 plus ``manifest.json``; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for key, name in _FILES.items():
        value = getattr(task, key)
        if value.dtype == bool:
            cord.write_mask(d / name, value)
        else:
            cord.write_grid(d / name, value)
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "seed": task.seed,
        "grid": list(task.shape),
        "channels": int(task.garment.shape[2]),
        "warp": task.warp,
        "noise": task.noise,
        "density": task.density,
        "files": dict(_FILES),
        "correspondences": [
            {"person": [int(a), int(b)], "garment": [int(x), int(y)], "garment_subcell": [float(u), float(v)]}
            for (a, b), (x, y), (u, v) in zip(task.truth.queries, task.truth.matches, task.subcell)
        ],
    }
    path = d / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def validate_manifest(manifest: dict) -> None:
    import jsonschema

    try:
        jsonschema.validate(manifest, MANIFEST_JSON_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise FormatError(f"bad task manifest: {exc.message}") from None


def import_task(directory: str | os.PathLike) -> SyntheticTask:
    """Read a directory written by :func:`export_task`.

    Generated grids are float32-representable, so the round trip is exact.
    """
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest in {d}: {exc}") from None
    validate_manifest(manifest)
    arrays = {}
    for key, name in manifest["files"].items():
        if key.endswith("mask"):
            arrays[key] = cord.read_mask(d / name)
        else:
            arrays[key] = cord.read_grid(d / name)
    corr = manifest["correspondences"]
    q = np.array([e["person"] for e in corr], dtype=int).reshape(-1, 2)
    m = np.array([e["garment"] for e in corr], dtype=float).reshape(-1, 2)
    sub = np.array([e["garment_subcell"] for e in corr], dtype=float).reshape(-1, 2)
    return SyntheticTask(
        truth=CorrespondenceSet(q, m, np.ones(len(q), dtype=bool)),
        subcell=sub,
        seed=manifest["seed"],
        warp=manifest["warp"],
        noise=manifest["noise"],
        density=manifest["density"],
        **arrays,
    )
