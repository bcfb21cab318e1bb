"""Part detection / promptable segmentation backends and their sanity rules.

Backends are selected by name (``create_backend("mock", ...)``). The mock
backend answers from fixture geometry so the whole pipeline runs without
pretrained weights; ``external`` is an adapter slot that wraps user-supplied
callables (e.g. an open-vocabulary part detector and a promptable
segmenter). ``CachedBackend`` stores results on disk, keyed by image id,
query/box and backend id.
"""

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ._io import atomic_save, atomic_write_json, image_digest, read_gray, write_png
from .data import DatasetIndex, FixtureRecord

CACHE_ENV = "WSAG_CACHE_DIR"
BOX_THRESHOLD = 0.5
DEFAULT_MIN_AREA = 100


class BackendUnavailable(RuntimeError):
    """A backend could not be reached; the call may be retried."""


@dataclass(frozen=True)
class DetectionBox:
    """Pixel box, half-open: columns ``[x0, x1)``, rows ``[y0, y1)``."""

    x0: int
    y0: int
    x1: int
    y1: int
    confidence: float = 1.0

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {self}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def width(self):
        return self.x1 - self.x0

    @property
    def height(self):
        return self.y1 - self.y0

    @property
    def area(self):
        return self.width * self.height

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)

    def check_bounds(self, shape):
        h, w = shape[:2]
        if self.x0 < 0 or self.y0 < 0 or self.x1 > w or self.y1 > h:
            raise ValueError(f"box {self.as_tuple()} outside image of size {h}x{w}")

    def slices(self):
        return slice(self.y0, self.y1), slice(self.x0, self.x1)

    def iou(self, other) -> float:
        ix = max(0, min(self.x1, other.x1) - max(self.x0, other.x0))
        iy = max(0, min(self.y1, other.y1) - max(self.y0, other.y0))
        inter = ix * iy
        return inter / (self.area + other.area - inter)

    def to_json(self):
        return [self.x0, self.y0, self.x1, self.y1, self.confidence]

    @classmethod
    def from_json(cls, row):
        return cls(int(row[0]), int(row[1]), int(row[2]), int(row[3]), float(row[4]))


@dataclass
class SegmentSet:
    regions: List[np.ndarray]
    min_area: int = DEFAULT_MIN_AREA

    def __len__(self):
        return len(self.regions)

    def __iter__(self):
        return iter(self.regions)

    def validate(self):
        claimed = None
        for r in self.regions:
            if r.sum() < self.min_area:
                raise ValueError("segment smaller than min_area")
            if claimed is not None and np.any(claimed & r):
                raise ValueError("segments overlap")
            claimed = r.copy() if claimed is None else claimed | r


def make_segment_set(masks: Sequence[np.ndarray], min_area: int = DEFAULT_MIN_AREA) -> SegmentSet:
    """Resolve overlapping masks into disjoint regions and drop small ones.

    Larger masks claim pixels first, mirroring how automatic mask generators
    are usually flattened into a partition.
    """
    masks = [np.asarray(m, dtype=bool) for m in masks]
    order = sorted(range(len(masks)), key=lambda i: (-int(masks[i].sum()), i))
    claimed = None
    regions = []
    for i in order:
        region = masks[i] if claimed is None else masks[i] & ~claimed
        if region.sum() >= min_area:
            regions.append(region)
            claimed = region.copy() if claimed is None else claimed | region
    return SegmentSet(regions, min_area)


def filter_boxes(boxes: Sequence[DetectionBox], threshold: float = BOX_THRESHOLD) -> List[DetectionBox]:
    """Keep boxes scoring at least ``threshold``; otherwise keep the single best one."""
    boxes = list(boxes)
    if not boxes:
        return []
    kept = [b for b in boxes if b.confidence >= threshold]
    if kept:
        return kept
    return [max(boxes, key=lambda b: b.confidence)]


def boundary_ring(box: DetectionBox, shape) -> np.ndarray:
    """Boolean mask of the outermost one-pixel ring inside ``box``."""
    ring = np.zeros(shape[:2], dtype=bool)
    ys, xs = box.slices()
    ring[ys, xs] = True
    if box.height > 2 and box.width > 2:
        ring[box.y0 + 1 : box.y1 - 1, box.x0 + 1 : box.x1 - 1] = False
    return ring


def background_sanity_fix(mask: np.ndarray, box: DetectionBox) -> np.ndarray:
    """Invert the mask inside ``box`` when more than half its boundary ring is on.

    A prompt box normally has background on its border, so a mask that
    covers most of the border has most likely segmented the background.
    """
    mask = np.asarray(mask)
    box.check_bounds(mask.shape)
    ring = boundary_ring(box, mask.shape)
    perim = int(ring.sum())
    edge_sum = float(mask[ring].sum())
    out = mask.copy()
    if edge_sum > perim / 2:
        ys, xs = box.slices()
        out[ys, xs] = 1 - mask[ys, xs] if mask.dtype != bool else ~mask[ys, xs]
    return out


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class MockBackend:
    """Deterministic detector + segmenter driven by fixture geometry.

    Parameters
    ----------
    records : dict
        Fixture records keyed by sample id.
    images : dict, optional
        Sample images keyed by id; lets calls without ``image_id`` be
        resolved by content digest.
    decoy : bool
        Add a low-confidence (0.3) box away from the object to every detection.
    adversarial : bool
        Return the in-box complement of the true mask from ``segment_box``.
    part_as_object : bool
        Answer part queries with the whole-object box (an oversized detector).
    """

    confidence = 0.9
    decoy_confidence = 0.3

    def __init__(self, records: Dict[str, FixtureRecord], images=None, decoy=False, adversarial=False,
                 part_as_object=False, min_area=20):
        self.records = dict(records)
        self.decoy = decoy
        self.adversarial = adversarial
        self.part_as_object = part_as_object
        self.min_area = min_area
        self._by_digest = {image_digest(img): sid for sid, img in (images or {}).items() if sid in self.records}
        flags = [n for n in ("decoy", "adversarial", "part_as_object") if getattr(self, n)]
        self.backend_id = "mock" + (f"[{','.join(flags)}]" if flags else "")

    @classmethod
    def from_index(cls, index: DatasetIndex, **kwargs):
        images = {s.id: s.image for s in index.samples if s.id in index.fixture}
        return cls(index.fixture, images, **kwargs)

    def _record(self, image, image_id) -> Optional[FixtureRecord]:
        if image_id is not None and image_id in self.records:
            return self.records[image_id]
        sid = self._by_digest.get(image_digest(image))
        return self.records.get(sid)

    def _decoy_box(self, record, shape):
        h, w = shape[:2]
        x0, y0, x1, y1 = record.object_box
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        side = max(8, min(h, w) // 6)
        corners = [(0, 0), (w - side, 0), (0, h - side), (w - side, h - side)]
        bx, by = max(corners, key=lambda c: (c[0] + side / 2 - cx) ** 2 + (c[1] + side / 2 - cy) ** 2)
        return DetectionBox(bx, by, bx + side, by + side, self.decoy_confidence)

    def detect(self, image, query: str, image_id=None) -> List[DetectionBox]:
        if not query:
            raise ValueError("empty detection query")
        record = self._record(image, image_id)
        if record is None:
            return []
        if query == record.part_name:
            box = record.object_box if self.part_as_object else record.part_box
        elif query == record.object:
            box = record.object_box
        else:
            return []
        boxes = [DetectionBox(*box, confidence=self.confidence)]
        if self.decoy:
            boxes.append(self._decoy_box(record, np.shape(image)))
        return boxes

    def segment_box(self, image, box: DetectionBox, image_id=None) -> np.ndarray:
        shape = np.shape(image)[:2]
        box.check_bounds(shape)
        record = self._record(image, image_id)
        inside = np.zeros(shape, dtype=bool)
        ys, xs = box.slices()
        inside[ys, xs] = True
        if record is None:
            return np.zeros(shape, dtype=bool)
        candidates = [
            (DetectionBox(*record.part_box), record.part_mask),
            (DetectionBox(*record.object_box), record.object_mask),
        ]
        best_iou, region = max(((box.iou(b), m) for b, m in candidates), key=lambda t: t[0])
        if best_iou < 0.5:
            region = record.object_mask
        mask = region & inside
        if self.adversarial:
            mask = inside & ~mask
        return mask

    def auto_segment(self, image, image_id=None, min_area=None) -> SegmentSet:
        min_area = self.min_area if min_area is None else min_area
        record = self._record(image, image_id)
        shape = np.shape(image)[:2]
        if record is None:
            return SegmentSet([np.ones(shape, bool)] if shape[0] * shape[1] >= min_area else [], min_area)
        fg = [record.part_mask, record.body_mask & ~record.occluder_mask, record.occluder_mask]
        bg = ~(record.object_mask | record.occluder_mask)
        h, w = shape
        quads = []
        for ys in (slice(0, h // 2), slice(h // 2, h)):
            for xs in (slice(0, w // 2), slice(w // 2, w)):
                q = np.zeros(shape, dtype=bool)
                q[ys, xs] = True
                quads.append(bg & q)
        regions = [r.copy() for r in fg + quads if r.sum() >= min_area]
        return SegmentSet(regions, min_area)


class ExternalBackend:
    """Adapter slot for real foundation models.

    ``detect_fn(image, query) -> [(x0, y0, x1, y1, score), ...]``,
    ``segment_fn(image, (x0, y0, x1, y1)) -> mask`` and
    ``auto_fn(image) -> [mask, ...]``. Any missing callable raises
    :class:`BackendUnavailable` when used.
    """

    def __init__(self, detect_fn: Callable = None, segment_fn: Callable = None, auto_fn: Callable = None,
                 name="external", min_area=DEFAULT_MIN_AREA):
        self.detect_fn, self.segment_fn, self.auto_fn = detect_fn, segment_fn, auto_fn
        self.min_area = min_area
        self.backend_id = name

    def detect(self, image, query, image_id=None):
        if not query:
            raise ValueError("empty detection query")
        if self.detect_fn is None:
            raise BackendUnavailable(f"{self.backend_id}: no detector configured")
        h, w = np.shape(image)[:2]
        out = []
        for x0, y0, x1, y1, score in self.detect_fn(image, query):
            x0, y0 = max(0, int(np.floor(x0))), max(0, int(np.floor(y0)))
            x1, y1 = min(w, int(np.ceil(x1))), min(h, int(np.ceil(y1)))
            if x0 < x1 and y0 < y1:
                out.append(DetectionBox(x0, y0, x1, y1, float(np.clip(score, 0, 1))))
        return out

    def segment_box(self, image, box, image_id=None):
        if self.segment_fn is None:
            raise BackendUnavailable(f"{self.backend_id}: no segmenter configured")
        box.check_bounds(np.shape(image))
        mask = np.asarray(self.segment_fn(image, box.as_tuple())) > 0.5
        inside = np.zeros(mask.shape, bool)
        inside[box.slices()] = True
        return mask & inside

    def auto_segment(self, image, image_id=None, min_area=None):
        if self.auto_fn is None:
            raise BackendUnavailable(f"{self.backend_id}: no automatic mask generator configured")
        return make_segment_set(self.auto_fn(image), self.min_area if min_area is None else min_area)


_REGISTRY: Dict[str, Callable] = {"mock": MockBackend, "external": ExternalBackend}


def register_backend(name: str, factory: Callable):
    _REGISTRY[name] = factory


def create_backend(name: str, **kwargs):
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown backend {name!r}; known: {sorted(_REGISTRY)}") from None
    return factory(**kwargs)


class CachedBackend:
    """On-disk cache around a backend.

    The cache directory defaults to ``$WSAG_CACHE_DIR``; with neither set, calls
    pass straight through. Detections are JSON, masks 1-bit PNGs, automatic
    segment sets packed bit arrays. One writer at a time is assumed; files are
    replaced atomically so concurrent readers never see partial entries.
    """

    def __init__(self, inner, cache_dir=None):
        self.inner = inner
        cache_dir = cache_dir or os.environ.get(CACHE_ENV)
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.backend_id = inner.backend_id
        self.hits = 0
        self.misses = 0

    def _path(self, kind, image, image_id, extra, suffix):
        key = image_id if image_id is not None else image_digest(image)
        digest = hashlib.sha1(f"{kind}|{key}|{extra}|{self.backend_id}".encode()).hexdigest()
        return self.cache_dir / kind / digest[:2] / f"{digest}{suffix}"

    def detect(self, image, query, image_id=None):
        if self.cache_dir is None:
            return self.inner.detect(image, query, image_id=image_id)
        path = self._path("detect", image, image_id, query, ".json")
        if path.exists():
            self.hits += 1
            return [DetectionBox.from_json(r) for r in json.loads(path.read_text())]
        self.misses += 1
        boxes = self.inner.detect(image, query, image_id=image_id)
        atomic_write_json(path, [b.to_json() for b in boxes])
        return boxes

    def segment_box(self, image, box, image_id=None):
        if self.cache_dir is None:
            return self.inner.segment_box(image, box, image_id=image_id)
        path = self._path("segment", image, image_id, box.as_tuple(), ".png")
        if path.exists():
            self.hits += 1
            return read_gray(path) > 127
        self.misses += 1
        mask = np.asarray(self.inner.segment_box(image, box, image_id=image_id), dtype=bool)
        write_png(path, mask)
        return mask

    def auto_segment(self, image, image_id=None, min_area=None):
        if self.cache_dir is None:
            return self.inner.auto_segment(image, image_id=image_id, min_area=min_area)
        path = self._path("auto", image, image_id, min_area, ".npz")
        shape = np.shape(image)[:2]
        if path.exists():
            self.hits += 1
            n = shape[0] * shape[1]
            with np.load(path) as z:
                keys = sorted((k for k in z.files if k.startswith("r")), key=lambda k: int(k[1:]))
                regions = [np.unpackbits(z[k])[:n].reshape(shape).astype(bool) for k in keys]
                return SegmentSet(regions, int(z["min_area"]))
        self.misses += 1
        segs = self.inner.auto_segment(image, image_id=image_id, min_area=min_area)
        arrays = {f"r{i}": np.packbits(r) for i, r in enumerate(segs.regions)}
        arrays["min_area"] = np.array(segs.min_area)
        atomic_save(path, lambda tmp: np.savez(tmp, **arrays), suffix=".npz")
        return segs
