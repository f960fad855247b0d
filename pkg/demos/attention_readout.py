"""
Reading correspondences out of attention
========================================

Train a tiny diptych model for a few hundred steps with and without the
attention losses, then read person -> garment matches straight out of its
attention maps and score them against the pseudo ground truth.
"""

import tempfile

import numpy as np

from coral.attention import entropies, extract_sub_attention, hard_correspondence, soft_correspondence
from coral.experiment import ablation_config, eval_tasks, load_checkpoint, train
from coral.matching import pck
from coral.model import model_inputs_for

STEPS = 300

###############################################################################
# Two short runs: the plain velocity objective, and the same objective with
# the correspondence and entropy terms switched on.

models = {}
with tempfile.TemporaryDirectory() as tmp:
    for name in ("I", "IV"):
        cfg = ablation_config(name, steps=STEPS, eval_every=STEPS)
        run_dir = train(cfg, f"{tmp}/{name}")
        models[name], *_ = load_checkpoint(run_dir / "model.ckpt")

###############################################################################
# One held-out task, one noise level. The sub-attention keeps only rows for
# masked person cells and columns for masked garment cells, averaged over heads.

prep = eval_tasks(cfg, 1)[0]
task = prep.task
t = 0.5
h, w, c = task.garment.shape
noise = np.random.default_rng(0).standard_normal((h, 2 * w, c))

for name, model in models.items():
    inputs, _ = model_inputs_for(model.config, task.garment, task.person, task.edit_mask, task.pose, t, noise)
    fwd = model.forward(inputs)
    print(f"config {name}")
    for layer, attn in enumerate(fwd.attention):
        sub = extract_sub_attention(attn, fwd.sequence, task.person_mask, task.garment_mask)
        hard = hard_correspondence(sub)
        soft = soft_correspondence(sub)
        rows = attn[:, sub.query_tokens, :].mean(axis=0).astype(np.float64)
        err = np.linalg.norm(soft - prep.pseudo_gt.matches, axis=1)[prep.pseudo_gt.reliable].mean()
        print(f"  layer {layer}: PCK@2 {pck(hard, prep.pseudo_gt, 2.0):.3f}"
              f"  soft error {err:5.2f} cells"
              f"  garment mass {sub.values.sum(axis=1).mean():.3f}"
              f"  entropy {entropies(rows).mean():.3f}")

###############################################################################
# The entropy term sharpens the rows. Where the garment mass is near zero the
# renormalised soft match is still defined, but it carries little signal.
