"""Pseudo labels from a detector + promptable segmenter, checked against fixture truth.

Run: python3 demos/01_pseudo_labels.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from wsag import heatmaps
from wsag._io import write_png
from wsag.backends import MockBackend
from wsag.data import generate_fixture
from wsag.labeler import generate_initial_label
from wsag.metrics import kld_metric, overlay, sim_metric

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out/labels")

index, mapping = generate_fixture(seed=0)
ego = index.select("ego", "train")
print(f"{len(ego)} egocentric training images, classes: {sorted(index.classes('ego', 'train'))}")

# The mock backend answers from the fixture geometry. The decoy flag adds a
# low-confidence false detection, which the 0.5 score filter should drop.
backends = {"clean": MockBackend.from_index(index), "decoy": MockBackend.from_index(index, decoy=True)}

for name, backend in backends.items():
    kld, sim, degenerate = [], [], 0
    for s in ego:
        heat, prov = generate_initial_label(s, mapping, backend, backend)
        gt = heatmaps.mask_to_heatmap(index.fixture[s.id].full_part_mask, 2.0)
        kld.append(kld_metric(heat, gt))
        sim.append(sim_metric(heat, gt))
        degenerate += prov.degenerate
    print(f"{name:>6}: KLD {np.mean(kld):.3f}  SIM {np.mean(sim):.3f}  degenerate {degenerate}/{len(ego)}")

# A few overlays for eyeballing
backend = backends["clean"]
for s in ego[:4]:
    heat, prov = generate_initial_label(s, mapping, backend, backend)
    path = out / f"{s.object}_{s.affordance}_{Path(s.id).name}.png"
    write_png(path, overlay(s.image, heat))
    print(f"query {prov.query!r:32} -> {path}")
