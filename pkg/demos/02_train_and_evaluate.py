"""Train the grounding model on fixture pseudo labels, with and without the extra losses.

Each run trains the tiny preset from scratch, so expect roughly a minute.

Run: python3 demos/02_train_and_evaluate.py [workdir]
"""
import sys
from pathlib import Path

import torch

from wsag import heatmaps
from wsag.metrics import evaluate
from wsag.pipeline import Workspace, load_config, stage_eval, stage_fixture, stage_gen_labels, stage_train

torch.set_num_threads(1)
root = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/train")

variants = {
    "kl only": ["lambda1=0", "lambda2=0"],
    "full objective": [],
}

for name, overrides in variants.items():
    ws = Workspace(root / name.replace(" ", "_"), load_config("tiny", overrides))
    stage_fixture(ws)
    stage_gen_labels(ws)
    res = stage_train(ws)[1]
    print(f"\n[{name}] per-epoch losses")
    for i, r in enumerate(res.epochs):
        print(f"  epoch {i}: kl {r.l_kl:.4f}  align {r.l_align:.4f}  exo-cls {r.l_exo_cls:.4f}  "
              f"reason {r.l_reason:.4f}  total {r.l_total:.4f}")
    report = stage_eval(ws, [ws.checkpoints / "seed1.pt"])["seed1"]
    print(f"[{name}] test KLD {report.kld:.3f}  SIM {report.sim:.3f}  NSS {report.nss:.3f}  "
          f"argmax on part {report.header['argmax_in_part']:.2f}")

# Reference point: a model that predicts a flat map
test_index = ws.load("test")
flat = evaluate(lambda s: heatmaps.uniform(s.image.shape[:2]), test_index.select("ego", "test"), test_index.gt_heatmaps)
print(f"\nuniform prediction: KLD {flat.kld:.3f}  SIM {flat.sim:.3f}  NSS {flat.nss:.3f}")
print(f"full report: {ws.reports / 'seed1.txt'}")
