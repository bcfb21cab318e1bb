"""Initial pseudo labels for egocentric images and exocentric pairing."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import heatmaps
from ._io import atomic_write_json, atomic_write_text, heatmap_to_uint8, read_gray, write_png
from .backends import DetectionBox, background_sanity_fix, filter_boxes
from .data import PartMapping, Sample
from .heatmaps import EmptyLabelError, mask_to_heatmap  # noqa: F401  (re-exported)

logger = logging.getLogger(__name__)

N_EXO_POOL = 10


class EmptyPoolingRegion(ValueError):
    pass


@dataclass
class LabelProvenance:
    sample_id: str
    query: str
    boxes: List[list] = field(default_factory=list)
    kept: List[list] = field(default_factory=list)
    inverted: List[bool] = field(default_factory=list)
    degenerate: bool = False
    backend: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "sample_id": self.sample_id, "query": self.query, "boxes": self.boxes, "kept": self.kept,
            "inverted": self.inverted, "degenerate": self.degenerate, "backend": self.backend, **self.extra,
        }


def part_mask_from_backends(image, query, detector, segmenter, image_id=None):
    """Detect -> filter -> segment each box -> sanity fix -> union.

    Returns ``(mask or None, provenance fields)``; ``None`` when nothing was
    detected.
    """
    boxes = detector.detect(image, query, image_id=image_id)
    kept = filter_boxes(boxes)
    info = {"boxes": [b.to_json() for b in boxes], "kept": [b.to_json() for b in kept], "inverted": []}
    if not kept:
        return None, info
    union = np.zeros(np.shape(image)[:2], dtype=bool)
    for box in kept:
        raw = np.asarray(segmenter.segment_box(image, box, image_id=image_id), dtype=bool)
        fixed = background_sanity_fix(raw, box)
        info["inverted"].append(bool(np.any(fixed != raw)))
        union |= fixed
    return union, info


def generate_initial_label(sample: Sample, mapping: PartMapping, detector, segmenter,
                           blur_sigma: float = 1.0, label_size=None) -> Tuple[np.ndarray, LabelProvenance]:
    """Pseudo label for one egocentric image from the part-name query.

    Falls back to a uniform map (``degenerate=True``) when the detector finds
    nothing or the masks are empty.
    """
    if sample.view != "ego":
        raise ValueError(f"{sample.id}: initial labels are only generated for egocentric images")
    query = mapping(sample.object, sample.affordance)
    mask, info = part_mask_from_backends(sample.image, query, detector, segmenter, image_id=sample.id)
    prov = LabelProvenance(sample.id, query, info["boxes"], info["kept"], info["inverted"],
                           backend=getattr(detector, "backend_id", ""))
    size = tuple(label_size) if label_size is not None else sample.image.shape[:2]
    if mask is None or not mask.any():
        prov.degenerate = True
        return heatmaps.uniform(size), prov
    try:
        return mask_to_heatmap(mask, blur_sigma, size=size), prov
    except EmptyLabelError:
        prov.degenerate = True
        return heatmaps.uniform(size), prov


def write_label(labels_dir, sample_id: str, heatmap: np.ndarray, provenance: dict):
    base = Path(labels_dir) / sample_id
    write_png(base.with_suffix(".png"), heatmap_to_uint8(heatmap))
    atomic_write_json(base.with_suffix(".json"), provenance)


def read_label(labels_dir, sample_id: str) -> np.ndarray:
    return heatmaps.normalize(read_gray((Path(labels_dir) / sample_id).with_suffix(".png")).astype(np.float64))


def read_provenance(labels_dir, sample_id: str) -> dict:
    return json.loads((Path(labels_dir) / sample_id).with_suffix(".json").read_text())


def load_labels(labels_dir, sample_ids: Sequence[str]) -> Dict[str, np.ndarray]:
    missing = [sid for sid in sample_ids if not (Path(labels_dir) / sid).with_suffix(".png").exists()]
    if missing:
        raise FileNotFoundError(f"missing label files for {len(missing)} samples: {missing[:10]}")
    return {sid: read_label(labels_dir, sid) for sid in sample_ids}


# ---------------------------------------------------------------------------
# Patch masks and pairing
# ---------------------------------------------------------------------------


def object_patchmask(box: DetectionBox, image_size, grid) -> np.ndarray:
    """Cell (i, j) is 1 iff its patch rectangle intersects ``box``.

    ``image_size`` and ``grid`` are (H, W) and (h, w); patches tile the image
    evenly, so with a 224 image and a 14 grid each cell is 16 x 16 pixels.
    """
    H, W = image_size
    h, w = grid
    box.check_bounds((H, W))
    rows = np.arange(h)
    cols = np.arange(w)
    r0, r1 = rows * H / h, (rows + 1) * H / h
    c0, c1 = cols * W / w, (cols + 1) * W / w
    row_hit = (r0 < box.y1) & (r1 > box.y0)
    col_hit = (c0 < box.x1) & (c1 > box.x0)
    return (row_hit[:, None] & col_hit[None, :]).astype(np.uint8)


def masked_average_pool(features: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean of the d-dim feature vectors over cells where ``mask`` is set."""
    features = np.asarray(features, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    total = mask.sum()
    if total <= 0:
        raise EmptyPoolingRegion("empty pooling region")
    return np.einsum("dhw,hw->d", features, mask) / total


def cosine(u, v) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def pair_score(ego_features, ego_mask, exo_features, exo_mask) -> float:
    """Cosine similarity of the masked-average-pooled feature maps."""
    return cosine(masked_average_pool(exo_features, exo_mask), masked_average_pool(ego_features, ego_mask))


class ExoPairIndex:
    """Ranked exocentric candidate pool per egocentric image."""

    def __init__(self, pools: Dict[str, List[Tuple[str, float]]] = None):
        self.pools = dict(pools or {})

    def __getitem__(self, ego_id):
        return self.pools[ego_id]

    def __contains__(self, ego_id):
        return ego_id in self.pools

    def __len__(self):
        return len(self.pools)

    def __eq__(self, other):
        return isinstance(other, ExoPairIndex) and self.pools == other.pools

    def to_tsv(self) -> str:
        lines = ["ego_id\texo_id\tscore"]
        for ego_id in sorted(self.pools):
            for exo_id, score in self.pools[ego_id]:
                lines.append(f"{ego_id}\t{exo_id}\t{score!r}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        atomic_write_text(path, self.to_tsv())

    @classmethod
    def load(cls, path) -> "ExoPairIndex":
        pools: Dict[str, List[Tuple[str, float]]] = {}
        for line in Path(path).read_text().splitlines()[1:]:
            if not line.strip():
                continue
            ego_id, exo_id, score = line.split("\t")
            pools.setdefault(ego_id, []).append((exo_id, float(score)))
        return cls(pools)


def build_pair_index(ego_samples: Sequence[Sample], exo_samples: Sequence[Sample], features: Dict[str, np.ndarray],
                     masks: Dict[str, np.ndarray], pool_size: int = N_EXO_POOL) -> ExoPairIndex:
    """Keep the ``pool_size`` most similar same-class exo images per ego image.

    ``features`` maps sample id to a (d, h, w) patch feature grid and
    ``masks`` to its (h, w) object patch mask. Ties are broken by exo id.
    """
    by_cls: Dict[Tuple[str, str], List[Sample]] = {}
    for s in exo_samples:
        by_cls.setdefault(s.cls, []).append(s)
    missing = sorted({s.cls for s in ego_samples if s.cls not in by_cls})
    if missing:
        raise ValueError(f"no exocentric partners for classes: {missing}")

    pooled = {}

    def vec(s):
        if s.id not in pooled:
            pooled[s.id] = masked_average_pool(features[s.id], masks[s.id])
        return pooled[s.id]

    pools = {}
    for ego in ego_samples:
        scored = [(exo.id, cosine(vec(exo), vec(ego))) for exo in by_cls[ego.cls]]
        scored.sort(key=lambda t: (-t[1], t[0]))
        pools[ego.id] = scored[:pool_size]
    return ExoPairIndex(pools)


def sample_partner(index: ExoPairIndex, ego_id: str, rng: np.random.Generator) -> str:
    pool = index[ego_id]
    return pool[int(rng.integers(len(pool)))][0]
