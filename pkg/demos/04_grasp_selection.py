"""Pick a grasp among projected candidates using a predicted affordance heatmap.

Trains a small model first (tiny preset), then scores candidate grasp points
on a held-out image.

Run: python3 demos/04_grasp_selection.py [workdir]
"""
import sys
from pathlib import Path

import numpy as np
import torch

from wsag.grasp import GraspCandidate, select_grasp
from wsag.model import load_checkpoint, predict_heatmap
from wsag.pipeline import Workspace, load_config, stage_fixture, stage_gen_labels, stage_train

torch.set_num_threads(1)
ws = Workspace(Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/grasp"), load_config("tiny"))
if not (ws.checkpoints / "seed1.pt").exists():
    stage_fixture(ws)
    stage_gen_labels(ws)
    stage_train(ws)
model, _ = load_checkpoint(ws.checkpoints / "seed1.pt")

test = ws.load("test")
rng = np.random.default_rng(0)
hits = 0
for s in test.select("ego", "test"):
    heat = predict_heatmap(model, s.image, s.affordance, size=s.image.shape[:2])
    rec = test.fixture[s.id]
    # one candidate on the true part, four elsewhere on the object
    part = np.argwhere(rec.full_part_mask)
    other = np.argwhere(rec.object_mask & ~rec.full_part_mask)
    points = [part[rng.integers(len(part))]] + [other[i] for i in rng.choice(len(other), 4, replace=False)]
    cands = [GraspCandidate(f"g{i}", int(x), int(y)) for i, (y, x) in enumerate(points)]
    best = select_grasp(heat, cands)
    hits += best.id == "g0"
    print(f"{s.id:55} {s.affordance:>9}: picked {best.id} at (u={best.u}, v={best.v})")
print(f"grasp on the affordance part: {hits}/{len(test.select('ego', 'test'))}")
