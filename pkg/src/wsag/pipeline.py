"""Workspace-based pipeline stages shared by the command line and the demos.

A run lives in one working directory::

    <workdir>/dataset/            fixture or symlinked dataset (unless data_root is set)
    <workdir>/labels/             initial pseudo labels (PNG + provenance JSON)
    <workdir>/labels_refined/     refined labels for the scoped classes
    <workdir>/pairs.tsv           exocentric candidate pools
    <workdir>/object_masks.json   object patch masks used for pooling
    <workdir>/checkpoints/        seed<N>.pt
    <workdir>/logs/               seed<N>.jsonl step log, seed<N>.epochs.json
    <workdir>/reports/            evaluation reports
"""

import hashlib
import io
import json
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import heatmaps
from ._io import atomic_write_bytes, atomic_write_json, atomic_write_text, read_image, write_png
from .backends import CachedBackend, MockBackend, create_backend, filter_boxes
from .data import MAPPING_FILE, DatasetIndex, Sample, generate_fixture, load_dataset, load_part_mapping, write_dataset
from .labeler import (ExoPairIndex, build_pair_index, generate_initial_label, load_labels, object_patchmask,
                      read_provenance, write_label)
from .metrics import MetricReport, evaluate, mean_report, overlay
from .model import ModelConfig, base_config, load_checkpoint, predict_heatmap, tiny_config
from .objectives import TrainConfig, train
from .refiner import FrozenViTEncoder, make_aux_encoder, refine_labels, train_refinement

logger = logging.getLogger(__name__)

# key -> (type, default). Defaults follow the reference training recipe.
CONFIG_SCHEMA = {
    "model": (str, "base"),
    "image_size": (int, 0),  # 0 keeps the model preset's value
    "patch_size": (int, 0),
    "text_provider": (str, "hash"),
    "backend": (str, "mock"),
    "backend_flags": (str, ""),
    "data_root": (str, ""),
    "setting": (str, "Seen"),
    "fixture_seed": (int, 0),
    "fixture_objects": (int, 4),
    "fixture_affordances": (int, 2),
    "fixture_ego": (int, 6),
    "fixture_exo": (int, 6),
    "fixture_test": (int, 3),
    "fixture_size": (int, 64),
    "blur_sigma": (float, 1.0),
    "pool_size": (int, 10),
    "epochs": (int, 40),
    "batch": (int, 20),
    "lr": (float, 1e-4),
    "encoder_lr": (float, 1e-5),
    "beta1": (float, 0.9),
    "beta2": (float, 0.95),
    "weight_decay": (float, 0.01),
    "stitch_prob": (float, 0.5),
    "margin": (float, 0.1),
    "lambda1": (float, 10.0),
    "lambda2": (float, 1.0),
    "alignment": (bool, True),
    "reasoning": (bool, True),
    "stitching": (bool, True),
    "crop": (bool, True),
    "flip": (bool, True),
    "eq7_as_printed": (bool, False),
    "degenerate_weight": (float, 1.0),
    "seeds": (str, "1,10,100,1000,10000"),
    "refine_epochs": (int, 20),
    "refine_scope": (str, "all"),
    "refine_encoder": (str, "vit"),
    "use_refined": (bool, False),
    "eval_size": (int, 224),
    "cache_dir": (str, ""),
}
# Keys that do not change any artifact and are left out of the config hash.
RUNTIME_KEYS = {"cache_dir", "seeds"}


def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


class Config(dict):
    """Flat key=value configuration with typed values."""

    @classmethod
    def defaults(cls):
        return cls({k: v for k, (_, v) in CONFIG_SCHEMA.items()})

    def set(self, key, value):
        if key not in CONFIG_SCHEMA:
            raise KeyError(f"unknown config key {key!r}")
        typ = CONFIG_SCHEMA[key][0]
        self[key] = _parse_bool(value) if typ is bool else typ(value)

    def update_text(self, text, source="<config>"):
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{source}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                self.set(key, value)
            except (KeyError, ValueError) as err:
                raise ValueError(f"{source}:{lineno}: {err}") from None

    def to_text(self):
        return "".join(f"{k} = {self[k]}\n" for k in sorted(self))

    def hash(self):
        text = "".join(f"{k}={self[k]!r}\n" for k in sorted(self) if k not in RUNTIME_KEYS)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def seed_list(self) -> List[int]:
        return [int(s) for s in str(self["seeds"]).split(",") if s.strip()]

    def model_config(self, affordances) -> ModelConfig:
        make = {"tiny": tiny_config, "base": base_config}.get(self["model"])
        if make is None:
            raise ValueError(f"unknown model preset {self['model']!r} (expected 'tiny' or 'base')")
        sizes = {k: self[k] for k in ("image_size", "patch_size") if self[k]}
        return make(affordances=tuple(affordances), text_provider=self["text_provider"], **sizes)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self["epochs"], batch=self["batch"], lr=self["lr"], encoder_lr=self["encoder_lr"],
            betas=(self["beta1"], self["beta2"]), weight_decay=self["weight_decay"], seeds=tuple(self.seed_list()),
            stitch_prob=self["stitch_prob"], margin=self["margin"], lambda1=self["lambda1"], lambda2=self["lambda2"],
            alignment=self["alignment"], reasoning=self["reasoning"], stitching=self["stitching"], crop=self["crop"],
            flip=self["flip"], eq7_as_printed=self["eq7_as_printed"], degenerate_weight=self["degenerate_weight"],
        )


def preset_path(name):
    return resources.files("wsag") / "resources" / f"{name}.cfg"


def load_config(path=None, overrides: Sequence[str] = ()) -> Config:
    """Defaults, then the config file (a path or a bundled preset name), then overrides."""
    cfg = Config.defaults()
    if path:
        p = Path(path)
        if not p.exists() and preset_path(path).is_file():
            p = preset_path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file {path} not found")
        cfg.update_text(p.read_text(), str(p))
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    return cfg


@dataclass
class Workspace:
    root: Path
    cfg: Config

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def data_root(self):
        return Path(self.cfg["data_root"]) if self.cfg["data_root"] else self.root / "dataset"

    labels = property(lambda self: self.root / "labels")
    labels_refined = property(lambda self: self.root / "labels_refined")
    pairs = property(lambda self: self.root / "pairs.tsv")
    object_masks = property(lambda self: self.root / "object_masks.json")
    checkpoints = property(lambda self: self.root / "checkpoints")
    logs = property(lambda self: self.root / "logs")
    reports = property(lambda self: self.root / "reports")
    refine_dir = property(lambda self: self.root / "refine")

    def stamp(self, stage, **extra):
        """Record the config used by ``stage`` next to its outputs."""
        self.root.mkdir(parents=True, exist_ok=True)
        atomic_write_text(self.root / "config.used", self.cfg.to_text())
        atomic_write_json(self.root / f"{stage}.stamp.json", {"config_hash": self.cfg.hash(), **extra})

    # -- inputs ------------------------------------------------------------

    def load(self, split) -> DatasetIndex:
        return load_dataset(self.data_root, split, self.cfg["setting"])

    def mapping(self):
        return load_part_mapping(self.data_root / MAPPING_FILE)

    def backend(self, index: DatasetIndex):
        name = self.cfg["backend"]
        flags = {f.strip(): True for f in self.cfg["backend_flags"].split(",") if f.strip()}
        if name == "mock":
            if not index.fixture:
                raise ValueError("the mock backend needs fixture metadata next to the dataset")
            inner = MockBackend.from_index(index, **flags)
        else:
            inner = create_backend(name, **flags)
        return CachedBackend(inner, self.cfg["cache_dir"] or None)

    def affordances(self, train_index: DatasetIndex):
        return train_index.affordances()


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def stage_fixture(ws: Workspace):
    cfg = ws.cfg
    index, mapping = generate_fixture(
        seed=cfg["fixture_seed"], n_objects=cfg["fixture_objects"], n_affordances=cfg["fixture_affordances"],
        n_ego=cfg["fixture_ego"], n_exo=cfg["fixture_exo"], n_test=cfg["fixture_test"],
        image_size=cfg["fixture_size"], setting=cfg["setting"],
    )
    write_dataset(index, ws.data_root, mapping, cfg["setting"])
    ws.stamp("fixture", n_samples=len(index))
    return index


def stage_gen_labels(ws: Workspace):
    index = ws.load("train")
    mapping = ws.mapping()
    backend = ws.backend(index)
    n_degenerate = 0
    ego = index.select("ego", "train")
    for s in ego:
        heat, prov = generate_initial_label(s, mapping, backend, backend, blur_sigma=ws.cfg["blur_sigma"])
        prov.extra["config_hash"] = ws.cfg.hash()
        n_degenerate += prov.degenerate
        write_label(ws.labels, s.id, heat, prov.to_json())
    ws.stamp("gen-labels", n_labels=len(ego), n_degenerate=n_degenerate)
    logger.info("wrote %d labels (%d degenerate)", len(ego), n_degenerate)
    return len(ego), n_degenerate


def _object_box(backend, s: Sample):
    kept = filter_boxes(backend.detect(s.image, s.object, image_id=s.id))
    return max(kept, key=lambda b: b.confidence) if kept else None


def object_patch_masks(samples: Sequence[Sample], backend, grid) -> Dict[str, np.ndarray]:
    """Object patch mask per sample; the whole grid when nothing is detected."""
    out = {}
    for s in samples:
        box = _object_box(backend, s)
        if box is None:
            logger.warning("%s: no object detected, pooling over the whole image", s.id)
            out[s.id] = np.ones((grid, grid), dtype=np.uint8)
        else:
            out[s.id] = object_patchmask(box, s.image.shape[:2], (grid, grid))
    return out


def pair_encoder(model_cfg: ModelConfig):
    """Frozen encoder used only to rank exocentric candidates."""
    return FrozenViTEncoder(ModelConfig(**{**model_cfg.to_dict(), "seed": 0}))


def stage_pair(ws: Workspace):
    index = ws.load("train")
    backend = ws.backend(index)
    model_cfg = ws.cfg.model_config(index.affordances())
    ego, exo = index.select("ego", "train"), index.select("exo", "train")
    masks = object_patch_masks(ego + exo, backend, model_cfg.grid)
    encoder = pair_encoder(model_cfg)
    features = {s.id: encoder(s.image) for s in ego + exo}
    pairs = build_pair_index(ego, exo, features, masks, pool_size=ws.cfg["pool_size"])
    pairs.save(ws.pairs)
    atomic_write_json(ws.object_masks, {sid: m.tolist() for sid, m in sorted(masks.items())})
    ws.stamp("pair", n_ego=len(ego), n_exo=len(exo))
    return pairs


def _load_pairs(ws: Workspace):
    if not ws.pairs.exists() or not ws.object_masks.exists():
        logger.info("no pair index in %s, building it", ws.root)
        stage_pair(ws)
    masks = {k: np.asarray(v, dtype=np.float64) for k, v in json.loads(ws.object_masks.read_text()).items()}
    return ExoPairIndex.load(ws.pairs), masks


def stage_refine(ws: Workspace):
    index = ws.load("train")
    mapping = ws.mapping()
    backend = ws.backend(index)
    pairs, _ = _load_pairs(ws)
    ego, exo = index.select("ego", "train"), index.select("exo", "train")
    model_cfg = ws.cfg.model_config(index.affordances())
    result = train_refinement(
        ego, exo, pairs, mapping, backend, backend, model_cfg, ws.cfg.train_config(),
        encoder=make_aux_encoder(ws.cfg["refine_encoder"]), scope=ws.cfg["refine_scope"],
        epochs=ws.cfg["refine_epochs"], seed=ws.cfg.seed_list()[0],
        checkpoint_path=ws.refine_dir / "checkpoint.pt",
    )
    initial = load_labels(ws.labels, sorted(result.masks))
    refined = refine_labels(result, backend, initial, ws.cfg["blur_sigma"])
    for sid, (heat, prov) in refined.items():
        prov.extra["config_hash"] = ws.cfg.hash()
        write_label(ws.labels_refined, sid, heat, prov.to_json())
    atomic_write_json(ws.refine_dir / "losses.json", result.epoch_losses)
    ws.stamp("refine", n_refined=len(refined), epoch_losses=result.epoch_losses)
    return result, refined


def training_labels(ws: Workspace, ego: Sequence[Sample]):
    """Initial labels, replaced by refined ones where available and enabled."""
    ids = [s.id for s in ego]
    labels = load_labels(ws.labels, ids)
    degenerate = {sid: bool(read_provenance(ws.labels, sid).get("degenerate")) for sid in ids}
    if ws.cfg["use_refined"]:
        for sid in ids:
            if (ws.labels_refined / sid).with_suffix(".png").exists():
                labels[sid] = load_labels(ws.labels_refined, [sid])[sid]
                degenerate[sid] = False
    return labels, degenerate


def stage_train(ws: Workspace, seeds: Optional[Sequence[int]] = None):
    cfg = ws.cfg
    index = ws.load("train")
    mapping = ws.mapping()
    ego, exo = index.select("ego", "train"), index.select("exo", "train")
    labels, degenerate = training_labels(ws, ego)
    tcfg = cfg.train_config()
    pairs, masks = _load_pairs(ws) if tcfg.use_alignment else (None, None)
    model_cfg = cfg.model_config(index.affordances())
    results = {}
    for seed in seeds or cfg.seed_list():
        res = train(model_cfg, tcfg, ego, labels, seed=seed, mapping=mapping, exo=exo, exo_masks=masks,
                    pair_index=pairs, degenerate=degenerate, log_path=ws.logs / f"seed{seed}.jsonl",
                    checkpoint_path=ws.checkpoints / f"seed{seed}.pt",
                    checkpoint_meta={"config_hash": cfg.hash()})
        atomic_write_json(ws.logs / f"seed{seed}.epochs.json", [r.__dict__ for r in res.epochs])
        results[seed] = res
    ws.stamp("train", seeds=list(results))
    return results


class ConfigMismatch(RuntimeError):
    pass


def argmax_in_part_rate(preds: Dict[str, np.ndarray], index: DatasetIndex) -> Optional[float]:
    """Fraction of predictions whose peak lies on the (full) fixture part."""
    hits = []
    for sid, pred in preds.items():
        rec = index.fixture.get(sid)
        if rec is None:
            continue
        part = rec.full_part_mask if rec.full_part_mask is not None else rec.part_mask
        y, x = np.unravel_index(np.argmax(pred), pred.shape)
        hits.append(bool(part[y, x]))
    return float(np.mean(hits)) if hits else None


def stage_eval(ws: Workspace, checkpoints: Sequence, allow_mismatch=False, overlays=False) -> Dict[str, MetricReport]:
    index = ws.load("test")
    test = index.select("ego", "test")
    reports = {}
    for ckpt in checkpoints:
        ckpt = Path(ckpt)
        model, payload = load_checkpoint(ckpt)
        stored = payload["meta"].get("config_hash")
        if stored != ws.cfg.hash() and not allow_mismatch:
            raise ConfigMismatch(f"{ckpt} was trained with config {stored}, current config is {ws.cfg.hash()} "
                                 f"(pass --allow-config-mismatch to evaluate anyway)")
        reasoning = bool(payload["meta"].get("train_config", {}).get("reasoning", True)) and \
            payload["meta"].get("train_config", {}).get("lambda2", 1.0) != 0
        preds = {s.id: predict_heatmap(model, s.image, s.affordance, size=s.image.shape[:2], reasoning=reasoning)
                 for s in test}
        header = {"checkpoint": ckpt.name, "config_hash": ws.cfg.hash()}
        rate = argmax_in_part_rate(preds, index)
        if rate is not None:
            header["argmax_in_part"] = rate
        overlay_dir = ws.reports / "overlays" / ckpt.stem if overlays else None
        report = evaluate(lambda s: preds[s.id], test, index.gt_heatmaps, size=ws.cfg["eval_size"],
                          overlay_dir=overlay_dir, header=header)
        report.write(ws.reports, ckpt.stem)
        reports[ckpt.stem] = report
    if len(reports) > 1:
        mean = mean_report(list(reports.values()))
        mean.write(ws.reports, "mean")
        reports["mean"] = mean
    return reports


def stage_predict(checkpoint, image_path, query, out_path, overlay_path=None):
    model, payload = load_checkpoint(checkpoint)
    if query not in model.cfg.affordances:
        logger.warning("query %r is not one of the training affordances %s", query, list(model.cfg.affordances))
    image = read_image(image_path)
    heat = predict_heatmap(model, image, query, size=image.shape[:2])
    heat = heatmaps.normalize(heat)
    buf = io.BytesIO()
    np.save(buf, heat)
    atomic_write_bytes(out_path, buf.getvalue())
    if overlay_path is not None:
        write_png(overlay_path, overlay(image, heat))
    return heat
