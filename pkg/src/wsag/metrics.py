"""Saliency metrics (KLD, SIM, NSS) and evaluation reports."""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Sequence

import numpy as np

from ._io import atomic_write_text, resize_map, write_png
from .data import Sample

logger = logging.getLogger(__name__)

EPS = 1e-12
EVAL_SIZE = 224
FIXATION_THRESHOLD = 0.1


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, gt


def kld_metric(pred, gt, eps=EPS) -> float:
    """KL(gt || pred), the same expression as the training KL loss."""
    pred, gt = _pair(pred, gt)
    return float(np.sum(gt * np.log((gt + eps) / (pred + eps))))


def sim_metric(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    return float(np.sum(np.minimum(pred, gt)))


def nss_metric(pred, gt, threshold=FIXATION_THRESHOLD) -> float:
    """Mean z-scored prediction over gt fixations (gt min-max scaled, > threshold).

    Uses the population standard deviation; a constant prediction scores 0 and
    a gt without fixations yields NaN.
    """
    pred, gt = _pair(pred, gt)
    lo, hi = gt.min(), gt.max()
    if hi <= lo:
        return math.nan
    fix = (gt - lo) / (hi - lo) > threshold
    if not fix.any():
        return math.nan
    std = pred.std()
    if std == 0 or pred.max() == pred.min():
        return 0.0
    z = (pred - pred.mean()) / std
    return float(z[fix].mean())


def to_eval_size(heatmap, size=EVAL_SIZE):
    """Bilinear resize to ``size`` x ``size`` followed by renormalization."""
    h = np.asarray(heatmap, dtype=np.float64)
    if h.shape != (size, size):
        h = np.clip(resize_map(h, (size, size)), 0, None)
    total = h.sum()
    return h / total if total > 0 else h


@dataclass
class MetricReport:
    kld: float
    sim: float
    nss: float
    n: int
    per_class: Dict[str, dict] = field(default_factory=dict)
    excluded_zero_mass: list = field(default_factory=list)
    excluded_nss: int = 0
    per_sample: Dict[str, dict] = field(default_factory=dict)
    header: dict = field(default_factory=dict)

    def to_dict(self, samples=False):
        d = {"kld": self.kld, "sim": self.sim, "nss": self.nss, "n": self.n, "per_class": self.per_class,
             "excluded_zero_mass": self.excluded_zero_mass, "excluded_nss": self.excluded_nss, **self.header}
        if samples:
            d["per_sample"] = self.per_sample
        return d

    def to_text(self):
        lines = [f"# nss_std=population eval_size={self.header.get('eval_size', EVAL_SIZE)}"]
        for k, v in sorted(self.header.items()):
            if k != "eval_size":
                lines.append(f"# {k}={v}")
        lines.append(f"overall  n={self.n}  KLD={self.kld:.4f}  SIM={self.sim:.4f}  NSS={self.nss:.4f}")
        if self.excluded_zero_mass or self.excluded_nss:
            lines.append(f"excluded: zero-mass gt={len(self.excluded_zero_mass)}  no-fixation nss={self.excluded_nss}")
        lines.append("")
        lines.append(f"{'class':<32}{'n':>4}{'KLD':>9}{'SIM':>9}{'NSS':>9}")
        for cls, row in sorted(self.per_class.items()):
            lines.append(f"{cls:<32}{row['n']:>4}{row['kld']:>9.4f}{row['sim']:>9.4f}{row['nss']:>9.4f}")
        return "\n".join(lines) + "\n"

    def to_kv(self):
        rows = [f"kld={self.kld!r}", f"sim={self.sim!r}", f"nss={self.nss!r}", f"n={self.n}",
                f"excluded_zero_mass={len(self.excluded_zero_mass)}", f"excluded_nss={self.excluded_nss}"]
        rows += [f"{k}={v}" for k, v in sorted(self.header.items())]
        for cls, row in sorted(self.per_class.items()):
            rows += [f"{cls}.{m}={row[m]!r}" for m in ("kld", "sim", "nss", "n")]
        return "\n".join(rows) + "\n"

    def write(self, out_dir, stem="report"):
        out = Path(out_dir)
        atomic_write_text(out / f"{stem}.txt", self.to_text())
        atomic_write_text(out / f"{stem}.kv", self.to_kv())
        atomic_write_text(out / f"{stem}.json", json.dumps(self.to_dict(samples=True), indent=1, sort_keys=True))


def _nanmean(values):
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else math.nan


def evaluate(predict: Callable[[Sample], np.ndarray], samples: Sequence[Sample], gt_heatmaps: Dict[str, np.ndarray],
             size=EVAL_SIZE, overlay_dir=None, header=None) -> MetricReport:
    """Score ``predict(sample)`` against ground truth over ``samples``.

    Samples are processed in id order so the averages do not depend on input
    ordering. Zero-mass ground truths and NSS without fixations are excluded
    and counted.
    """
    missing = [s.id for s in samples if s.id not in gt_heatmaps]
    if missing:
        raise FileNotFoundError(f"missing ground truth for {len(missing)} samples: {missing[:10]}")
    per_sample, zero_mass, no_fix = {}, [], 0
    for s in sorted(samples, key=lambda s: s.id):
        gt_raw = np.asarray(gt_heatmaps[s.id], dtype=np.float64)
        if gt_raw.sum() <= 0:
            zero_mass.append(s.id)
            continue
        gt = to_eval_size(gt_raw, size)
        pred = to_eval_size(predict(s), size)
        nss = nss_metric(pred, gt)
        no_fix += math.isnan(nss)
        per_sample[s.id] = {"kld": kld_metric(pred, gt), "sim": sim_metric(pred, gt), "nss": nss,
                            "class": f"{s.object}/{s.affordance}"}
        if overlay_dir is not None:
            write_png(Path(overlay_dir) / f"{s.id}.png", overlay(s.image, pred))
    if zero_mass:
        logger.warning("excluded %d samples with zero-mass ground truth", len(zero_mass))
    if no_fix:
        logger.warning("NSS undefined for %d samples without fixations", no_fix)
    per_class: Dict[str, dict] = {}
    for row in per_sample.values():
        per_class.setdefault(row["class"], []).append(row)
    per_class = {
        cls: {"kld": float(np.mean([r["kld"] for r in rows])), "sim": float(np.mean([r["sim"] for r in rows])),
              "nss": _nanmean([r["nss"] for r in rows]), "n": len(rows)}
        for cls, rows in per_class.items()
    }
    rows = list(per_sample.values())
    return MetricReport(
        kld=float(np.mean([r["kld"] for r in rows])) if rows else math.nan,
        sim=float(np.mean([r["sim"] for r in rows])) if rows else math.nan,
        nss=_nanmean([r["nss"] for r in rows]),
        n=len(rows), per_class=per_class, excluded_zero_mass=zero_mass, excluded_nss=no_fix,
        per_sample=per_sample, header={"eval_size": size, **(header or {})},
    )


def mean_report(reports: Sequence[MetricReport]) -> MetricReport:
    """Average of per-seed reports (overall and per class)."""
    classes = sorted(set().union(*(r.per_class for r in reports)))
    per_class = {
        c: {m: float(np.mean([r.per_class[c][m] for r in reports if c in r.per_class])) for m in ("kld", "sim", "nss")}
        for c in classes
    }
    for c in classes:
        per_class[c]["n"] = max(r.per_class[c]["n"] for r in reports if c in r.per_class)
    return MetricReport(
        kld=float(np.mean([r.kld for r in reports])), sim=float(np.mean([r.sim for r in reports])),
        nss=float(np.mean([r.nss for r in reports])), n=reports[0].n, per_class=per_class,
        excluded_zero_mass=reports[0].excluded_zero_mass, excluded_nss=reports[0].excluded_nss,
        header={**reports[0].header, "seeds_averaged": len(reports)},
    )


def overlay(image, heatmap, alpha=0.5):
    """Alpha-blend a red heatmap (scaled by its max) onto an RGB image."""
    image = np.asarray(image, dtype=np.float64)
    h = resize_map(heatmap, image.shape[:2]) if np.shape(heatmap) != image.shape[:2] else np.asarray(heatmap)
    h = np.clip(h, 0, None)
    h = h / h.max() if h.max() > 0 else h
    red = np.zeros_like(image)
    red[..., 0] = 255.0
    a = alpha * h[..., None]
    return np.clip(image * (1 - a) + red * a, 0, 255).astype(np.uint8)
