"""Datasets, the part-name mapping and the synthetic desk-scale fixture.

On-disk layout (AGD20K style)::

    root/{setting}/{trainset|testset}/{egocentric|exocentric}/{affordance}/{object}/{file}
    root/{setting}/testset/GT/{affordance}/{object}/{stem}.png

Ground-truth maps are 8-bit grayscale images normalized to unit mass at load.
"""

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import heatmaps
from ._io import atomic_write_json, atomic_write_text, atomic_save, heatmap_to_uint8, read_gray, read_image, write_png

logger = logging.getLogger(__name__)

VIEWS = ("ego", "exo")
SPLITS = ("train", "test")
_VIEW_DIRS = {"ego": "egocentric", "exo": "exocentric"}
_SPLIT_DIRS = {"train": "trainset", "test": "testset"}
_IMAGE_EXTS = {".jpg", ".jpeg", ".png"}
MIN_IMAGE_SIZE = 64

Box = Tuple[int, int, int, int]


@dataclass
class Sample:
    id: str
    image: np.ndarray
    view: str
    object: str
    affordance: str
    split: str

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if not self.object or not self.affordance:
            raise ValueError(f"sample {self.id}: object and affordance must be non-empty")
        h, w = self.image.shape[:2]
        if h < MIN_IMAGE_SIZE or w < MIN_IMAGE_SIZE:
            raise ValueError(f"sample {self.id}: image {h}x{w} smaller than {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}")

    @property
    def cls(self) -> Tuple[str, str]:
        return (self.object, self.affordance)


class PartMapping:
    """The (object, affordance) -> part-name lookup used to query detectors."""

    def __init__(self, entries: Optional[Dict[Tuple[str, str], str]] = None):
        self.entries: Dict[Tuple[str, str], str] = {}
        for key, part in (entries or {}).items():
            self.add(key[0], key[1], part)

    def add(self, obj: str, affordance: str, part: str):
        if not part:
            raise ValueError(f"empty part name for ({obj}, {affordance})")
        if (obj, affordance) in self.entries:
            raise ValueError(f"duplicate mapping for ({obj}, {affordance})")
        self.entries[(obj, affordance)] = part

    def __call__(self, obj: str, affordance: str) -> str:
        try:
            return self.entries[(obj, affordance)]
        except KeyError:
            raise KeyError(f"no part mapping for ({obj}, {affordance})") from None

    def __contains__(self, key) -> bool:
        return tuple(key) in self.entries

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return isinstance(other, PartMapping) and self.entries == other.entries

    def to_text(self) -> str:
        lines = [f"{o}\t{a}\t{p}" for (o, a), p in sorted(self.entries.items())]
        return "\n".join(lines) + "\n"


def load_part_mapping(path) -> PartMapping:
    """Read a UTF-8 ``object<TAB>affordance<TAB>part`` file.

    Blank lines and lines starting with ``#`` are ignored. Duplicate keys and
    empty part names are fatal and report the offending line number.
    """
    mapping = PartMapping()
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(cols)}: {line!r}")
        obj, aff, part = (c.strip() for c in cols)
        if not obj or not aff:
            raise ValueError(f"{path}:{lineno}: empty object or affordance: {line!r}")
        if not part:
            raise ValueError(f"{path}:{lineno}: empty part name: {line!r}")
        if (obj, aff) in mapping.entries:
            raise ValueError(f"{path}:{lineno}: duplicate mapping for ({obj}, {aff}): {line!r}")
        mapping.add(obj, aff, part)
    return mapping


def example_mapping_path() -> Path:
    """Path of the bundled hand-written mapping excerpt."""
    return Path(str(resources.files("wsag") / "resources" / "part_mapping_examples.tsv"))


@dataclass
class LoadReport:
    n_loaded: int = 0
    skipped: List[str] = field(default_factory=list)

    @property
    def n_skipped(self):
        return len(self.skipped)


@dataclass
class FixtureRecord:
    """Known geometry of one synthetic image; mock backends answer from it."""

    id: str
    view: str
    object: str
    affordance: str
    part_name: str
    part_mask: np.ndarray  # visible part pixels
    object_mask: np.ndarray  # visible object pixels (body + part, minus occluder)
    body_mask: np.ndarray
    occluder_mask: np.ndarray
    part_box: Box  # full part geometry, (x0, y0, x1, y1) half-open
    object_box: Box
    full_part_mask: np.ndarray = None

    def __post_init__(self):
        if self.full_part_mask is None:
            self.full_part_mask = self.part_mask


@dataclass
class DatasetIndex:
    samples: List[Sample]
    gt_heatmaps: Dict[str, np.ndarray] = field(default_factory=dict)
    fixture: Dict[str, FixtureRecord] = field(default_factory=dict)
    report: LoadReport = field(default_factory=LoadReport)

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids are not unique")
        self._by_id = {s.id: s for s in self.samples}

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, sample_id) -> Sample:
        return self._by_id[sample_id]

    def __contains__(self, sample_id):
        return sample_id in self._by_id

    def select(self, view=None, split=None) -> List[Sample]:
        return [
            s for s in self.samples
            if (view is None or s.view == view) and (split is None or s.split == split)
        ]

    def classes(self, view=None, split=None):
        return sorted({s.cls for s in self.select(view, split)})

    def affordances(self):
        return sorted({s.affordance for s in self.samples})

    def objects(self):
        return sorted({s.object for s in self.samples})

    def merge(self, other: "DatasetIndex") -> "DatasetIndex":
        report = LoadReport(self.report.n_loaded + other.report.n_loaded, self.report.skipped + other.report.skipped)
        return DatasetIndex(
            self.samples + other.samples,
            {**self.gt_heatmaps, **other.gt_heatmaps},
            {**self.fixture, **other.fixture},
            report,
        )


def _gt_path(base: Path, affordance: str, obj: str, stem: str) -> Path:
    return base / "testset" / "GT" / affordance / obj / f"{stem}.png"


def load_dataset(root, split: str, setting: str = "Seen", fixture_meta: bool = True) -> DatasetIndex:
    """Index every image of one split under ``root/setting``.

    Files whose path does not parse as ``view/affordance/object/file`` are
    skipped and listed in ``index.report``. Test-split ground truth maps are
    loaded and normalized; an all-zero map is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    base = root / setting
    split_dir = base / _SPLIT_DIRS[split]
    if not split_dir.is_dir():
        raise FileNotFoundError(f"missing split directory {split_dir}")

    view_of = {v: k for k, v in _VIEW_DIRS.items()}
    samples, gts, report = [], {}, LoadReport()
    for path in sorted(p for p in split_dir.rglob("*") if p.is_file()):
        rel = path.relative_to(split_dir).parts
        if rel and rel[0] == "GT":
            continue
        if len(rel) != 4 or rel[0] not in view_of or path.suffix.lower() not in _IMAGE_EXTS:
            report.skipped.append(str(path.relative_to(root)))
            continue
        view_dir, affordance, obj, _ = rel
        sample_id = str(path.relative_to(root).with_suffix("")).replace("\\", "/")
        try:
            sample = Sample(sample_id, read_image(path), view_of[view_dir], obj, affordance, split)
        except (OSError, ValueError) as err:
            logger.warning("skipping %s: %s", path, err)
            report.skipped.append(str(path.relative_to(root)))
            continue
        samples.append(sample)
        if split == "test" and sample.view == "ego":
            gt_file = _gt_path(base, affordance, obj, path.stem)
            if gt_file.exists():
                gt = read_gray(gt_file).astype(np.float64)
                if gt.sum() <= 0:
                    raise heatmaps.DegenerateHeatmapError(f"degenerate ground truth: {gt_file}")
                gts[sample_id] = heatmaps.normalize(gt)
    report.n_loaded = len(samples)
    if report.skipped:
        logger.warning("load_dataset: skipped %d unparseable paths", report.n_skipped)

    fixture = {}
    if fixture_meta and (base / FIXTURE_META).exists():
        ids = {s.id for s in samples}
        fixture = {k: v for k, v in load_fixture_meta(root, setting).items() if k in ids}
    return DatasetIndex(samples, gts, fixture, report)


def load_all(root, setting: str = "Seen") -> DatasetIndex:
    return load_dataset(root, "train", setting).merge(load_dataset(root, "test", setting))


# ---------------------------------------------------------------------------
# Synthetic fixture
# ---------------------------------------------------------------------------

FIXTURE_META = "fixture_meta.json"
FIXTURE_MASKS = "fixture_masks.npz"
MAPPING_FILE = "part_mapping.tsv"

OBJECT_NAMES = ["knife", "cup", "bottle", "hammer", "scissors", "spoon", "racket", "drum", "kettle", "axe"]
AFFORDANCE_PARTS = [
    ("hold", "handle"), ("open", "cap"), ("cut_with", "blade"), ("pour", "spout"),
    ("beat", "head"), ("swing", "grip"), ("drink_with", "rim"), ("press", "button"),
]
BODY_COLORS = [
    (200, 60, 60), (60, 160, 70), (60, 90, 210), (210, 170, 40), (150, 60, 180),
    (40, 170, 170), (170, 110, 60), (120, 120, 200), (200, 100, 150), (90, 140, 40),
]
PART_COLORS = [
    (245, 245, 245), (20, 20, 20), (250, 220, 0), (0, 230, 255),
    (255, 0, 200), (0, 255, 90), (255, 140, 0), (140, 0, 255),
]
OCCLUDER_COLOR = (224, 172, 138)
OCCLUSION_MIN = 0.6
BOX_MARGIN = 2  # detector-style slack around recorded boxes


def _ellipse(shape, cy, cx, ry, rx):
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0


def mask_box(mask) -> Box:
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise ValueError("empty mask has no bounding box")
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def pad_box(box: Box, margin: int, shape) -> Box:
    x0, y0, x1, y1 = box
    return (max(0, x0 - margin), max(0, y0 - margin), min(shape[1], x1 + margin), min(shape[0], y1 + margin))


def _background(rng, size):
    yy, xx = np.mgrid[:size, :size] / size
    base = rng.uniform(90, 130)
    fx, fy, ph = rng.uniform(1, 3), rng.uniform(1, 3), rng.uniform(0, 2 * np.pi)
    smooth = 12 * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)
    tint = rng.uniform(-10, 10, size=3)
    bg = base + smooth[..., None] + tint + rng.normal(0, 4, size=(size, size, 3))
    return bg


def _paint(canvas, mask, color, rng, noise=6.0):
    vals = np.asarray(color, dtype=np.float64) + rng.normal(0, noise, size=(int(mask.sum()), 3))
    canvas[mask] = vals


def _draw_object(rng, size, margin=3):
    """Sample a body ellipse with one part ellipse attached on a random side."""
    for _ in range(100):
        brx, bry = rng.uniform(0.16, 0.22) * size, rng.uniform(0.11, 0.15) * size
        if rng.random() < 0.5:
            brx, bry = bry, brx
        prx, pry = rng.uniform(0.09, 0.12) * size, rng.uniform(0.09, 0.12) * size
        side = rng.integers(4)
        dy, dx = [(0, 1), (0, -1), (1, 0), (-1, 0)][side]
        cy, cx = rng.uniform(0.25, 0.75) * size, rng.uniform(0.25, 0.75) * size
        pcy = cy + dy * (bry + 0.45 * pry)
        pcx = cx + dx * (brx + 0.45 * prx)
        body = _ellipse((size, size), cy, cx, bry, brx)
        part = _ellipse((size, size), pcy, pcx, pry, prx)
        obj = body | part
        x0, y0, x1, y1 = mask_box(obj)
        if x0 >= margin and y0 >= margin and x1 <= size - margin and y1 <= size - margin:
            return body & ~part, part, (pcy, pcx, pry, prx, dy, dx)
    raise RuntimeError("could not place fixture object")


def _draw_occluder(rng, size, part, geom):
    pcy, pcx, pry, prx, dy, dx = geom
    for _ in range(100):
        hy = pcy + rng.uniform(-0.25, 0.25) * pry
        hx = pcx + rng.uniform(-0.25, 0.25) * prx
        hand = _ellipse((size, size), hy, hx, pry * rng.uniform(1.0, 1.3), prx * rng.uniform(1.0, 1.3))
        # the arm reaches the hand from the image border on the part's side
        yy, xx = np.mgrid[:size, :size] + 0.5
        half = 0.3 * min(pry, prx)
        if dx != 0:
            arm = (np.abs(yy - hy) <= half) & ((xx - hx) * dx >= 0)
        else:
            arm = (np.abs(xx - hx) <= half) & ((yy - hy) * dy >= 0)
        occ = hand | arm
        if (occ & part).sum() >= OCCLUSION_MIN * part.sum():
            return occ
    raise RuntimeError("could not place occluder")


def _render(rng, size, cls_idx, view, with_occluder):
    o_idx, a_idx = cls_idx
    body, part, geom = _draw_object(rng, size)
    occ = _draw_occluder(rng, size, part, geom) if with_occluder else np.zeros_like(part)
    canvas = _background(rng, size)
    _paint(canvas, body, BODY_COLORS[o_idx % len(BODY_COLORS)], rng)
    _paint(canvas, part, PART_COLORS[a_idx % len(PART_COLORS)], rng)
    if with_occluder:
        _paint(canvas, occ, OCCLUDER_COLOR, rng)
    image = np.clip(np.round(canvas), 0, 255).astype(np.uint8)
    return image, body, part, occ


def generate_fixture(
    seed: int = 0,
    n_objects: int = 4,
    n_affordances: int = 2,
    n_ego: int = 6,
    n_exo: int = 6,
    n_test: int = 3,
    image_size: int = 64,
    gt_sigma: float = 2.0,
    setting: str = "Seen",
):
    """Build a deterministic synthetic dataset and its part mapping.

    Every (object, affordance) combination becomes a class. Egocentric images
    show a two-part object (body + part); exocentric images show the same kind
    of object with at least 60% of the part hidden behind a hand-like
    occluder. Test images carry ground-truth heatmaps built from the part
    pixels. Returns ``(DatasetIndex, PartMapping)``.
    """
    if n_objects < 2 or n_affordances < 1:
        raise ValueError("need n_objects >= 2 and n_affordances >= 1")
    if n_objects > len(OBJECT_NAMES) or n_affordances > len(AFFORDANCE_PARTS):
        raise ValueError("fixture vocabulary too small for the requested class count")
    if image_size < MIN_IMAGE_SIZE:
        raise ValueError(f"image_size must be >= {MIN_IMAGE_SIZE}")
    rng = np.random.default_rng(seed)
    mapping = PartMapping()
    samples, gts, records = [], {}, {}
    plan = [("train", "ego", n_ego), ("train", "exo", n_exo), ("test", "ego", n_test)]
    for o_idx in range(n_objects):
        obj = OBJECT_NAMES[o_idx]
        for a_idx in range(n_affordances):
            aff, part_word = AFFORDANCE_PARTS[a_idx]
            part_name = f"{part_word} of the {obj}"
            mapping.add(obj, aff, part_name)
            for split, view, count in plan:
                for k in range(count):
                    image, body, part, occ = _render(rng, image_size, (o_idx, a_idx), view, view == "exo")
                    sid = f"{setting}/{_SPLIT_DIRS[split]}/{_VIEW_DIRS[view]}/{aff}/{obj}/{obj}_{view}_{k:04d}"
                    visible_part = part & ~occ
                    records[sid] = FixtureRecord(
                        id=sid, view=view, object=obj, affordance=aff, part_name=part_name,
                        part_mask=visible_part, object_mask=(body | part) & ~occ, body_mask=body,
                        occluder_mask=occ, part_box=pad_box(mask_box(part), BOX_MARGIN, part.shape),
                        object_box=pad_box(mask_box(body | part), BOX_MARGIN, part.shape),
                        full_part_mask=part,
                    )
                    samples.append(Sample(sid, image, view, obj, aff, split))
                    if split == "test":
                        gts[sid] = heatmaps.mask_to_heatmap(part, gt_sigma)
    return DatasetIndex(samples, gts, records), mapping


def write_dataset(index: DatasetIndex, root, mapping: Optional[PartMapping] = None, setting: str = "Seen"):
    """Write ``index`` to ``root`` in the loader's layout (PNG images)."""
    root = Path(root)
    base = root / setting
    for s in index.samples:
        if not s.id.startswith(f"{setting}/"):
            raise ValueError(f"sample id {s.id} is not under setting {setting}")
        write_png(root / f"{s.id}.png", s.image)
        if s.id in index.gt_heatmaps:
            stem = Path(s.id).name
            write_png(_gt_path(base, s.affordance, s.object, stem), heatmap_to_uint8(index.gt_heatmaps[s.id]))
    if mapping is not None:
        atomic_write_text(root / MAPPING_FILE, mapping.to_text())
    if index.fixture:
        save_fixture_meta(index.fixture, root, setting)


def save_fixture_meta(records: Dict[str, FixtureRecord], root, setting="Seen"):
    base = Path(root) / setting
    meta, arrays = [], {}
    for i, (sid, r) in enumerate(sorted(records.items())):
        meta.append({
            "key": i, "id": sid, "view": r.view, "object": r.object, "affordance": r.affordance,
            "part_name": r.part_name, "part_box": list(r.part_box), "object_box": list(r.object_box),
        })
        for name in ("part_mask", "object_mask", "body_mask", "occluder_mask", "full_part_mask"):
            arrays[f"m{i}_{name}"] = np.packbits(getattr(r, name))
    shape = next(iter(records.values())).part_mask.shape
    atomic_write_json(base / FIXTURE_META, {"shape": list(shape), "records": meta})
    atomic_save(base / FIXTURE_MASKS, lambda tmp: np.savez_compressed(tmp, **arrays), suffix=".npz")


def load_fixture_meta(root, setting="Seen") -> Dict[str, FixtureRecord]:
    base = Path(root) / setting
    meta = json.loads((base / FIXTURE_META).read_text())
    shape = tuple(meta["shape"])
    n = shape[0] * shape[1]
    out = {}
    with np.load(base / FIXTURE_MASKS) as arrays:
        for m in meta["records"]:
            i = m["key"]
            masks = {
                name: np.unpackbits(arrays[f"m{i}_{name}"])[:n].reshape(shape).astype(bool)
                for name in ("part_mask", "object_mask", "body_mask", "occluder_mask", "full_part_mask")
            }
            out[m["id"]] = FixtureRecord(
                id=m["id"], view=m["view"], object=m["object"], affordance=m["affordance"],
                part_name=m["part_name"], part_box=tuple(m["part_box"]), object_box=tuple(m["object_box"]),
                **masks,
            )
    return out
