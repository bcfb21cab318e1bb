"""Training losses, augmentation and the main training loop."""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import heatmaps
from ._io import atomic_write_text, resize_image, resize_map
from .data import PartMapping, Sample
from .labeler import ExoPairIndex, sample_partner
from .model import GroundingModel, ModelConfig, log_heatmap_from_logits, preprocess, save_checkpoint

logger = logging.getLogger(__name__)

EPS = 1e-12
REASON_OBJ_WEIGHT = 0.1


@dataclass
class TrainConfig:
    epochs: int = 40
    batch: int = 20
    lr: float = 1e-4
    encoder_lr: float = 1e-5
    betas: Tuple[float, float] = (0.9, 0.95)
    weight_decay: float = 0.01
    seeds: Tuple[int, ...] = (1, 10, 100, 1000, 10000)
    stitch_prob: float = 0.5
    margin: float = 0.1
    lambda1: float = 10.0
    lambda2: float = 1.0
    alignment: bool = True
    reasoning: bool = True
    stitching: bool = True
    crop: bool = True
    flip: bool = True
    crop_scale: float = 256 / 224
    eq7_as_printed: bool = False
    degenerate_weight: float = 1.0
    deterministic: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.encoder_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.stitch_prob <= 1.0:
            raise ValueError("stitch_prob must lie in [0, 1]")
        self.betas = tuple(self.betas)
        self.seeds = tuple(self.seeds)

    @property
    def use_alignment(self):
        return self.alignment and self.lambda1 != 0

    @property
    def use_reasoning(self):
        return self.reasoning and self.lambda2 != 0


@dataclass
class LossReport:
    l_kl: float
    l_align: float
    l_exo_cls: float
    l_reason: float
    l_total: float
    lambda1: float = 10.0
    lambda2: float = 1.0

    def combination(self) -> float:
        return self.l_kl + self.lambda1 * (self.l_align + self.l_exo_cls) + self.lambda2 * self.l_reason


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def kl_loss(pred, target, eps=EPS):
    """KL(target || pred) summed over pixels; batched over leading dims.

    Accepts numpy arrays or tensors of identical shape. For batched input
    (B, H, W) the per-sample values are averaged.
    """
    if tuple(pred.shape) != tuple(target.shape):
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    if isinstance(pred, torch.Tensor) or isinstance(target, torch.Tensor):
        pred = torch.as_tensor(pred)
        target = torch.as_tensor(target, dtype=pred.dtype)
        per = (target * torch.log((target + eps) / (pred + eps))).flatten(-2).sum(-1)
        return per.mean() if per.ndim else per
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    per = (target * np.log((target + eps) / (pred + eps))).reshape(*target.shape[:-2], -1).sum(-1)
    return float(np.mean(per))


def _check_nonzero(*vectors):
    for v in vectors:
        if torch.any(torch.linalg.vector_norm(v, dim=-1) == 0):
            raise ValueError("cosine similarity of a zero vector")


def align_loss(f_a, f_e, margin=0.1):
    """max(0, 1 - cos(f_A, stopgrad(f_E)) - margin), averaged over the batch."""
    f_e = f_e.detach()
    _check_nonzero(f_a, f_e)
    cos = F.cosine_similarity(f_a, f_e, dim=-1, eps=0.0)
    return torch.clamp(1.0 - cos - margin, min=0.0).mean()


def exo_cls_loss(f_e, target, head):
    target = torch.as_tensor(target, dtype=torch.long)
    logits = head(f_e)
    k = logits.shape[-1]
    if torch.any((target < 0) | (target >= k)):
        raise IndexError(f"affordance index out of range for {k} classes")
    return F.cross_entropy(logits, target)


def reason_loss(f_obj, f_part, emb_obj, emb_part, eq7_as_printed=False):
    """Part term plus 0.1 x object term, both 1 - cosine.

    By default the predicted part is compared with the part-name embedding and
    the predicted object with the object-name embedding; ``eq7_as_printed``
    swaps the two targets.
    """
    if eq7_as_printed:
        emb_obj, emb_part = emb_part, emb_obj
    _check_nonzero(emb_obj, emb_part)
    part = 1.0 - F.cosine_similarity(f_part, emb_part, dim=-1, eps=0.0)
    obj = 1.0 - F.cosine_similarity(f_obj, emb_obj, dim=-1, eps=0.0)
    return (part + REASON_OBJ_WEIGHT * obj).mean()


def masked_average_pool(features, mask):
    """(B, d, h, w) x (B, h, w) -> (B, d); mask may be soft."""
    total = mask.flatten(1).sum(1)
    if torch.any(total <= 0):
        raise ValueError("empty pooling region")
    return torch.einsum("bdhw,bhw->bd", features, mask) / total[:, None]


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def stitch_augment(image, label, others: Sequence[np.ndarray], rng: np.random.Generator):
    """Place ``image`` in a random quadrant of a 2x2 mosaic with three distractors.

    Returns ``(composite, label, quadrant)`` with the label confined to the
    target's quadrant, or ``None`` when fewer than three distractors exist.
    Quadrants are numbered row-major: 0 top-left ... 3 bottom-right.
    """
    if len(others) < 3:
        return None
    h, w = image.shape[:2]
    th, tw = h // 2, w // 2
    quadrant = int(rng.integers(4))
    tiles = list(others[:3])
    tiles.insert(quadrant, image)
    composite = np.zeros((2 * th, 2 * tw, 3), dtype=np.uint8)
    for q, tile in enumerate(tiles):
        r, c = divmod(q, 2)
        composite[r * th : (r + 1) * th, c * tw : (c + 1) * tw] = resize_image(tile, (th, tw))
    out = np.zeros((2 * th, 2 * tw))
    r, c = divmod(quadrant, 2)
    out[r * th : (r + 1) * th, c * tw : (c + 1) * tw] = np.clip(resize_map(label, (th, tw)), 0, None)
    if (2 * th, 2 * tw) != (h, w):
        composite = resize_image(composite, (h, w))
        out = np.clip(resize_map(out, (h, w)), 0, None)
    return composite, out / out.sum(), quadrant


def random_crop_flip(image, label, size, rng, crop=True, flip=True, scale=256 / 224):
    """Resize to ``size * scale`` and take a random ``size`` crop; random h-flip."""
    if crop:
        big = int(round(size * scale))
        image = resize_image(image, (big, big))
        label = resize_map(label, (big, big))
        y0, x0 = int(rng.integers(big - size + 1)), int(rng.integers(big - size + 1))
        image = image[y0 : y0 + size, x0 : x0 + size]
        label = label[y0 : y0 + size, x0 : x0 + size]
    else:
        image = resize_image(image, (size, size))
        label = resize_map(label, (size, size))
    if flip and rng.random() < 0.5:
        image, label = image[:, ::-1], label[:, ::-1]
    label = np.clip(label, 0, None)
    if label.sum() <= 0:
        label = heatmaps.uniform(label.shape)
    return np.ascontiguousarray(image), np.ascontiguousarray(label / label.sum())


# ---------------------------------------------------------------------------
# Batches and the loss composition
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    images: torch.Tensor  # (B, 3, S, S)
    labels: torch.Tensor  # (B, S, S)
    text: torch.Tensor  # (B, d) affordance embeddings
    stitched: torch.Tensor  # (B,) bool
    weights: torch.Tensor  # (B,)
    affordance_idx: Optional[torch.Tensor] = None
    obj_emb: Optional[torch.Tensor] = None
    part_emb: Optional[torch.Tensor] = None
    exo_images: Optional[torch.Tensor] = None
    exo_masks: Optional[torch.Tensor] = None


def compute_losses(model: GroundingModel, batch: Batch, cfg: TrainConfig):
    """The full objective; returns ``(total, LossReport)``."""
    out = model(batch.images, batch.text, reasoning=cfg.use_reasoning)
    log_pred = log_heatmap_from_logits(out["logits"], batch.labels.shape[-2:])
    pred = log_pred.exp()
    per_kl = (batch.labels * torch.log((batch.labels + EPS) / (pred + EPS))).flatten(1).sum(1)
    l_kl = (per_kl * batch.weights).sum() / batch.weights.sum()
    zero = l_kl.new_zeros(())
    l_align, l_exo, l_reason = zero, zero, zero
    if cfg.use_alignment and batch.exo_images is not None:
        exo = model.encode(batch.exo_images)
        f_e = masked_average_pool(exo.patches, batch.exo_masks)
        keep = ~batch.stitched
        if keep.any():
            l_align = align_loss(out["f_a"][keep], f_e[keep], cfg.margin)
        l_exo = exo_cls_loss(f_e, batch.affordance_idx, model.exo_head)
    if cfg.use_reasoning and batch.obj_emb is not None:
        l_reason = reason_loss(out["f_obj"], out["f_part"], batch.obj_emb, batch.part_emb, cfg.eq7_as_printed)
    total = l_kl + cfg.lambda1 * (l_align + l_exo) + cfg.lambda2 * l_reason
    report = LossReport(*(float(t.detach()) for t in (l_kl, l_align, l_exo, l_reason, total)),
                        cfg.lambda1, cfg.lambda2)
    return total, report


class BatchBuilder:
    """Assembles augmented training batches.

    Independent generators drive shuffling, crop/flip, stitching and partner
    sampling so toggling one feature leaves the other streams untouched.
    """

    def __init__(self, model: GroundingModel, cfg: TrainConfig, ego: Sequence[Sample], labels: Dict[str, np.ndarray],
                 seed: int, mapping: Optional[PartMapping] = None, exo: Sequence[Sample] = (),
                 exo_masks: Optional[Dict[str, np.ndarray]] = None, pair_index: Optional[ExoPairIndex] = None,
                 degenerate: Optional[Dict[str, bool]] = None):
        self.model, self.cfg = model, cfg
        self.ego = list(ego)
        self.labels = labels
        self.mapping = mapping
        self.exo = {s.id: s for s in exo}
        self.exo_masks = exo_masks or {}
        self.pair_index = pair_index
        self.degenerate = degenerate or {}
        self.size = model.cfg.image_size
        self.aff_index = {a: i for i, a in enumerate(model.cfg.affordances)}
        streams = np.random.SeedSequence(seed).spawn(4)
        self.rng_order, self.rng_aug, self.rng_stitch, self.rng_pair = (np.random.default_rng(s) for s in streams)
        missing = [s.id for s in self.ego if s.id not in labels]
        if missing:
            raise FileNotFoundError(f"missing labels for {len(missing)} training images: {missing[:10]}")
        if cfg.use_alignment:
            if pair_index is None:
                raise ValueError("alignment needs a pair index")
            absent = [s.id for s in self.ego if s.id not in pair_index]
            if absent:
                raise ValueError(f"pair index has no entry for {absent[:10]}")

    def epoch(self) -> List[Batch]:
        order = self.rng_order.permutation(len(self.ego))
        return [self._build([self.ego[i] for i in order[k : k + self.cfg.batch]])
                for k in range(0, len(order), self.cfg.batch)]

    def _distractors(self, sample):
        pool = [s for s in self.ego if s.cls != sample.cls] or [s for s in self.ego if s.id != sample.id]
        if len(pool) < 3:
            return []
        idx = self.rng_stitch.choice(len(pool), size=3, replace=False)
        return [pool[i].image for i in idx]

    def _build(self, samples: Sequence[Sample]) -> Batch:
        cfg, dtype = self.cfg, self.model.dtype
        images, labels, stitched, weights = [], [], [], []
        for s in samples:
            label = resize_map(self.labels[s.id], (self.size, self.size))
            img, lab = random_crop_flip(s.image, np.clip(label, 0, None), self.size, self.rng_aug,
                                        cfg.crop, cfg.flip, cfg.crop_scale)
            did_stitch = False
            if cfg.stitching and cfg.stitch_prob > 0 and self.rng_stitch.random() < cfg.stitch_prob:
                res = stitch_augment(img, lab, self._distractors(s), self.rng_stitch)
                if res is not None:
                    img, lab, _ = res
                    did_stitch = True
            images.append(img)
            labels.append(lab)
            stitched.append(did_stitch)
            weights.append(cfg.degenerate_weight if self.degenerate.get(s.id) else 1.0)
        batch = Batch(
            images=preprocess(np.stack(images), self.size, dtype),
            labels=torch.as_tensor(np.stack(labels), dtype=dtype),
            text=self.model.embed_text([s.affordance for s in samples]),
            stitched=torch.tensor(stitched, dtype=torch.bool),
            weights=torch.tensor(weights, dtype=dtype),
        )
        if cfg.use_alignment:
            partners = [self.exo[sample_partner(self.pair_index, s.id, self.rng_pair)] for s in samples]
            batch.exo_images = preprocess(np.stack([p.image for p in partners]), self.size, dtype)
            batch.exo_masks = torch.as_tensor(np.stack([self.exo_masks[p.id] for p in partners]), dtype=dtype)
            batch.affordance_idx = torch.tensor([self.aff_index[s.affordance] for s in samples])
        if cfg.use_reasoning:
            if self.mapping is None:
                raise ValueError("reasoning needs the part mapping")
            batch.obj_emb = self.model.embed_text([s.object for s in samples])
            batch.part_emb = self.model.embed_text([self.mapping(s.object, s.affordance) for s in samples])
        return batch


def make_optimizer(model: GroundingModel, cfg: TrainConfig):
    enc = list(model.encoder.parameters())
    enc_ids = {id(p) for p in enc}
    rest = [p for p in model.parameters() if id(p) not in enc_ids]
    return torch.optim.AdamW(
        [{"params": enc, "lr": cfg.encoder_lr}, {"params": rest, "lr": cfg.lr}],
        betas=cfg.betas, weight_decay=cfg.weight_decay,
    )


@dataclass
class TrainResult:
    model: GroundingModel
    epochs: List[LossReport]
    steps: List[dict] = field(default_factory=list)


def _mean_report(reports: Sequence[LossReport]) -> LossReport:
    keys = ("l_kl", "l_align", "l_exo_cls", "l_reason", "l_total")
    means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    return LossReport(**means, lambda1=reports[0].lambda1, lambda2=reports[0].lambda2)


def train(model_cfg: ModelConfig, cfg: TrainConfig, ego: Sequence[Sample], labels: Dict[str, np.ndarray],
          seed: int = 1, mapping: Optional[PartMapping] = None, exo: Sequence[Sample] = (),
          exo_masks: Optional[Dict[str, np.ndarray]] = None, pair_index: Optional[ExoPairIndex] = None,
          degenerate: Optional[Dict[str, bool]] = None, log_path=None, checkpoint_path=None,
          checkpoint_meta=None, dtype=torch.float32) -> TrainResult:
    """Train one model from scratch with ``seed`` driving init and data order."""
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    model_cfg = ModelConfig(**{**model_cfg.to_dict(), "seed": seed})
    model = GroundingModel(model_cfg).to(dtype)
    builder = BatchBuilder(model, cfg, ego, labels, seed, mapping, exo, exo_masks, pair_index, degenerate)
    opt = make_optimizer(model, cfg)
    epoch_reports, steps = [], []
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        reports = []
        for batch in builder.epoch():
            total, report = compute_losses(model, batch, cfg)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            reports.append(report)
            steps.append({"epoch": epoch, "step": step, "l_kl": report.l_kl, "l_align": report.l_align,
                          "l_exo_cls": report.l_exo_cls, "l_reason": report.l_reason, "l_total": report.l_total})
            step += 1
        epoch_reports.append(_mean_report(reports))
        logger.info("epoch %d: %s", epoch, epoch_reports[-1])
    model.eval()
    if log_path is not None:
        atomic_write_text(log_path, "".join(json.dumps(s, sort_keys=True) + "\n" for s in steps))
    if checkpoint_path is not None:
        meta = {"train_config": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()},
                "seed": seed, **(checkpoint_meta or {})}
        save_checkpoint(checkpoint_path, model, mode="grounding", meta=meta)
    return TrainResult(model, epoch_reports, steps)
