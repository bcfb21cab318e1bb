"""Command line entry point: ``wsag <subcommand> [options]``."""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .grasp import load_candidates, select_grasp
from ._io import read_gray


def _common(p):
    p.add_argument("--config", help="config file or bundled preset name (tiny, reference)")
    p.add_argument("--workdir", default="run", help="working directory holding all artifacts (default: run)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="wsag", description="Pseudo-label supervised affordance grounding.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fixture", help="write the synthetic dataset")
    _common(p)
    p.add_argument("--seed", type=int, help="fixture seed (overrides fixture_seed)")

    p = sub.add_parser("gen-labels", help="generate initial pseudo labels")
    _common(p)

    p = sub.add_parser("pair", help="build the exocentric candidate index")
    _common(p)

    p = sub.add_parser("refine", help="train the refinement model and write refined labels")
    _common(p)

    p = sub.add_parser("train", help="train the grounding model")
    _common(p)
    p.add_argument("--seeds", help="comma-separated seeds, one independent run each")

    p = sub.add_parser("eval", help="evaluate checkpoints on the test split")
    _common(p)
    p.add_argument("--checkpoint", nargs="+", required=True, help="one or more checkpoints (mean report if several)")
    p.add_argument("--allow-config-mismatch", action="store_true")
    p.add_argument("--overlays", action="store_true", help="write heatmap overlays per test image")

    p = sub.add_parser("predict", help="heatmap for one image and affordance query")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--query", required=True, help="affordance, e.g. hold")
    p.add_argument("--out", required=True, help="output .npy heatmap")
    p.add_argument("--overlay", help="optional overlay PNG")

    p = sub.add_parser("grasp-select", help="pick the grasp candidate on the hottest pixel")
    _common(p)
    p.add_argument("--heatmap", required=True, help=".npy heatmap or grayscale PNG")
    p.add_argument("--candidates", required=True, help="text file with 'id u v [score]' rows")
    return parser


def _load_heatmap(path):
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    return read_gray(path).astype(np.float64)


def run(args) -> int:
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"fixture_seed={args.seed}")
    if getattr(args, "seeds", None):
        overrides.append(f"seeds={args.seeds}")
    cfg = pipeline.load_config(args.config, overrides)
    ws = pipeline.Workspace(Path(args.workdir), cfg)
    cmd = args.command
    if cmd == "fixture":
        index = pipeline.stage_fixture(ws)
        print(f"fixture: {len(index)} images under {ws.data_root}")
    elif cmd == "gen-labels":
        n, n_deg = pipeline.stage_gen_labels(ws)
        print(f"labels: {n} written to {ws.labels} ({n_deg} degenerate)")
    elif cmd == "pair":
        pairs = pipeline.stage_pair(ws)
        print(f"pairs: {len(pairs)} egocentric images indexed in {ws.pairs}")
    elif cmd == "refine":
        result, refined = pipeline.stage_refine(ws)
        n_fb = sum(p.extra["fallback"] for _, p in refined.values())
        print(f"refine: {len(refined)} labels in {ws.labels_refined} ({n_fb} fallbacks); "
              f"epoch losses {[round(x, 5) for x in result.epoch_losses]}")
    elif cmd == "train":
        results = pipeline.stage_train(ws)
        for seed, res in results.items():
            first, last = res.epochs[0].l_kl, res.epochs[-1].l_kl
            print(f"train seed {seed}: l_kl {first:.4f} -> {last:.4f}; checkpoint {ws.checkpoints / f'seed{seed}.pt'}")
    elif cmd == "eval":
        reports = pipeline.stage_eval(ws, args.checkpoint, args.allow_config_mismatch, args.overlays)
        for name, rep in reports.items():
            print(f"{name}: KLD={rep.kld:.4f} SIM={rep.sim:.4f} NSS={rep.nss:.4f} (n={rep.n})")
    elif cmd == "predict":
        heat = pipeline.stage_predict(args.checkpoint, args.image, args.query, args.out, args.overlay)
        print(f"predict: wrote {args.out} (sum {heat.sum():.6f})")
    elif cmd == "grasp-select":
        best = select_grasp(_load_heatmap(args.heatmap), load_candidates(args.candidates))
        print(f"{best.id} {best.u} {best.v}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except (OSError, ValueError, KeyError, RuntimeError) as err:
        print(f"wsag {args.command}: error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
