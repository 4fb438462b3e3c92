"""Distillation followed by routing on a model small enough to train in about a minute.

Run from the repository root:

    python3 demos/tiny_pipeline.py [output-dir]

The reference-size experiments use the same calls with ``config.defaults()``.
At this size the teacher choice of framewise routing is noisy. The
single-teacher baselines printed alongside show which teacher actually helps.
"""

import sys

import numpy as np

from vexpert import config
from vexpert.analysis import per_patch_mi_before_after
from vexpert.runs import analysis_pool, build_world, finetune_from, run_distill
from vexpert.task import evaluate, selection_frequencies

out_dir = sys.argv[1] if len(sys.argv) > 1 else "runs/demo"

# A 16x16 image cut into a 4x4 grid of 4-pixel patches, one plain block and two MoE blocks.
cfg = config.defaults().replace(**{
    "model.image_size": 16, "model.patch_size": 4, "model.dim": 16, "model.n_plain": 2, "model.n_moe": 2,
    "model.n_experts": 4, "distill.steps": 600, "distill.batch_size": 8,
    "finetune.steps": 600, "finetune.n_dfm": 4, "routing.k_min": 1,
    "analysis.pool_size": 600, "run.out_dir": out_dir,
})
world = build_world(cfg)
print(f"relevant teacher: {cfg.task.relevant_teacher}, relevant patches: {world.task.relevant_patches.tolist()}")

# 1. Distil the three synthetic teachers into the shared backbone.
distilled = run_distill(cfg, world)
for i, (a, b) in enumerate(zip(distilled.initial["cos"], distilled.final["cos"])):
    print(f"teacher {i} cosine loss {a:.3f} -> {b:.3f}")
print(f"teacher/expert MI loss {distilled.initial['mi']:.4f} -> {distilled.final['mi']:.4f}")

# 2. Baselines that route every layer through one teacher's gate, then a learned framewise teacher router.
for t in range(len(cfg.teachers.kinds)):
    ts = finetune_from(cfg.replace(**{"routing.strategy": f"ts{t}"}), distilled.model, world)
    print(f"route through teacher {t} only: success {evaluate(ts, world.task):.2f}")
# Train a framewise teacher router on the downstream task. The backbone stays frozen.
ftr = finetune_from(cfg.replace(**{"routing.strategy": "ftr"}), distilled.model, world)
teacher_freq, _ = selection_frequencies(ftr, world.task, 256)
print(f"FTR success {evaluate(ftr, world.task):.2f}, teacher choice per layer:\n{teacher_freq.round(2)}")

# 3. Patchwise expert routing with top-K annealing, then the per-patch information map.
per = finetune_from(cfg.replace(**{"routing.cta": True}), distilled.model, world)
_, expert_freq = selection_frequencies(per, world.task, 256)
print(f"PER+CTA success {evaluate(per, world.task):.2f}, expert use per layer:\n{expert_freq.round(2)}")
mi = per_patch_mi_before_after(per, analysis_pool(cfg, world), grid=world.source.grid)
mask = world.task.mask.reshape(world.source.grid)
print(f"MI between pre- and post-VEL features (nats):\n{mi.round(2)}")
print(f"mean over relevant patches {mi[mask].mean():.2f}, over noise patches {mi[~mask].mean():.2f}")
print(f"artifacts under {out_dir}/")
