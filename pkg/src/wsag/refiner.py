"""Label refinement from occlusion cues in exocentric images.

A sigmoid-output copy of the grounding model predicts a part mask on each
egocentric image. The object region *outside* that mask is compared, in the
feature space of a frozen auxiliary encoder, with the visible object region of
exocentric images where a person hides the part. Regions of an automatic
segmentation that agree with the learned mask become the refined label.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import heatmaps
from ._io import resize_image
from .backends import DetectionBox, SegmentSet, filter_boxes
from .data import PartMapping, Sample
from .labeler import ExoPairIndex, LabelProvenance
from .model import GroundingModel, ModelConfig, VisualEncoder, mask_from_logits, preprocess, save_checkpoint, tiny_config
from .objectives import TrainConfig, make_optimizer

logger = logging.getLogger(__name__)

CROP_SIZE = 224
FEATURE_GRID = 14
N_PARTNERS = 3
MIN_RATIO = 0.1
RATIO_FRACTION = 0.9


class DegenerateCrop(ValueError):
    pass


# ---------------------------------------------------------------------------
# Cropping and auxiliary encoders
# ---------------------------------------------------------------------------


def pad_to_square(array):
    """Zero-pad the shorter side symmetrically (extra row/column goes last)."""
    h, w = array.shape[:2]
    side = max(h, w)
    top, left = (side - h) // 2, (side - w) // 2
    pad = [(top, side - h - top), (left, side - w - left)] + [(0, 0)] * (array.ndim - 2)
    return np.pad(array, pad)


def _crop(array, box: DetectionBox):
    if box.area < 4:
        raise DegenerateCrop("degenerate crop")
    box.check_bounds(array.shape[:2])
    ys, xs = box.slices()
    return array[ys, xs]


def crop_square(image, box: DetectionBox, size=CROP_SIZE):
    """crop -> pad to square -> resize to ``size`` x ``size`` (uint8 RGB)."""
    return resize_image(pad_to_square(_crop(np.asarray(image), box)), (size, size))


def _pad_square_torch(mask):
    h, w = mask.shape[-2:]
    side = max(h, w)
    top, left = (side - h) // 2, (side - w) // 2
    return F.pad(mask, (left, side - w - left, top, side - h - top))


def crop_mask(mask, box: DetectionBox, grid=FEATURE_GRID):
    """crop -> pad to square -> area-resize to ``grid`` x ``grid``; differentiable."""
    mask = torch.as_tensor(mask)
    if box.area < 4:
        raise DegenerateCrop("degenerate crop")
    box.check_bounds(tuple(mask.shape[-2:]))
    ys, xs = box.slices()
    sq = _pad_square_torch(mask[..., ys, xs])
    return F.adaptive_avg_pool2d(sq[None, None], grid)[0, 0]


class ColorPoolEncoder:
    """Frozen encoder: mean colour per cell followed by a fixed random projection.

    A cheap stand-in that keeps the colour layout of the crop, which is what
    separates the parts of fixture objects.
    """

    name = "color"

    def __init__(self, dim=32, grid=FEATURE_GRID, seed=0):
        rng = np.random.default_rng(seed)
        self.grid = grid
        self.weight = rng.normal(size=(dim, 3)) * 3.0
        self.bias = rng.normal(size=dim)

    def __call__(self, crop) -> np.ndarray:
        t = torch.as_tensor(np.asarray(crop), dtype=torch.float64).permute(2, 0, 1)[None] / 255.0
        cells = F.adaptive_avg_pool2d(t, self.grid)[0].numpy()  # (3, g, g)
        centered = cells - 0.5
        return np.tanh(np.einsum("dc,chw->dhw", self.weight, centered) + self.bias[:, None, None])


class FrozenViTEncoder:
    """Frozen transformer encoder returning its projected patch grid."""

    name = "vit"

    def __init__(self, cfg: Optional[ModelConfig] = None, state_dict=None):
        cfg = cfg or tiny_config(image_size=CROP_SIZE, patch_size=CROP_SIZE // FEATURE_GRID)
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.net = VisualEncoder(cfg).double()
        if state_dict is not None:
            self.net.load_state_dict(state_dict)
        self.net.eval().requires_grad_(False)

    @torch.no_grad()
    def __call__(self, crop) -> np.ndarray:
        x = preprocess(crop, self.cfg.image_size, torch.float64)
        return self.net(x).patches[0].numpy()


def make_aux_encoder(name: str, seed=0):
    if name == "color":
        return ColorPoolEncoder(seed=seed)
    if name == "vit":
        return FrozenViTEncoder(tiny_config(image_size=CROP_SIZE, patch_size=CROP_SIZE // FEATURE_GRID, seed=seed))
    raise ValueError(f"unknown auxiliary encoder {name!r} (expected 'color' or 'vit')")


def crop_encode(image, box: DetectionBox, encoder) -> np.ndarray:
    return encoder(crop_square(image, box))


# ---------------------------------------------------------------------------
# The occlusion-similarity loss
# ---------------------------------------------------------------------------


def _pool(mask14, feats):
    total = mask14.sum()
    if total <= 0:
        raise ValueError("empty pooling region")
    return torch.einsum("hw,dhw->d", mask14, feats) / total


def exo_vector(m_obj_exo, b_exo: DetectionBox, g_exo) -> torch.Tensor:
    """Pooled feature of the visible exocentric object (mask binarized at 0.5)."""
    g_exo = torch.as_tensor(g_exo, dtype=torch.float64)
    m = crop_mask(torch.as_tensor(np.asarray(m_obj_exo), dtype=torch.float64), b_exo, g_exo.shape[-1])
    return _pool((m >= 0.5).to(g_exo.dtype), g_exo)


def ego_vector(m_pred, b_ego: DetectionBox, g_ego) -> torch.Tensor:
    """Pooled feature of the object region the predicted part mask leaves out."""
    g_ego = torch.as_tensor(g_ego, dtype=m_pred.dtype)
    return _pool(crop_mask(1.0 - m_pred, b_ego, g_ego.shape[-1]), g_ego)


def _one_minus_cos(u, v):
    nu, nv = torch.linalg.vector_norm(u), torch.linalg.vector_norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine similarity of a zero vector")
    return 1.0 - torch.clamp(torch.dot(u, v) / (nu * nv), -1.0, 1.0)


def pretrain_loss(m_pred, b_ego: DetectionBox, g_ego, partners: Sequence[Tuple[np.ndarray, DetectionBox, np.ndarray]]):
    """1 - cos between the ego remainder and each exo object, averaged over partners.

    ``partners`` holds ``(M_obj_exo, b_exo, G_exo)`` triples. ``m_pred`` is a
    tensor in [0, 1] at the ego image resolution.
    """
    if not partners:
        raise ValueError("at least one exocentric partner is required")
    v_ego = ego_vector(m_pred, b_ego, g_ego)
    losses = [_one_minus_cos(v_ego, exo_vector(m, b, g).to(v_ego.dtype)) for m, b, g in partners]
    return torch.stack(losses).mean()


# ---------------------------------------------------------------------------
# Post-processing
# ---------------------------------------------------------------------------


@dataclass
class PostprocessInfo:
    ratios: List[float]
    selected: List[int]
    fallback: bool


def segment_ratios(m_pred, m_obj_ego, segments) -> List[float]:
    candidate = (np.asarray(m_pred) >= 0.5) & np.asarray(m_obj_ego, dtype=bool)
    return [float((r & candidate).sum() / r.sum()) for r in (np.asarray(r, bool) for r in segments)]


def select_regions(ratios: Sequence[float]) -> List[int]:
    if not ratios:
        return []
    threshold = max(MIN_RATIO, RATIO_FRACTION * max(ratios))
    return [i for i, r in enumerate(ratios) if r > threshold]


def postprocess(m_pred, m_obj_ego, segments, fallback, blur_sigma=1.0, return_info=False):
    """Union of segments that mostly lie inside the predicted part, as a heatmap."""
    regions = [np.asarray(r, dtype=bool) for r in (segments.regions if isinstance(segments, SegmentSet) else segments)]
    ratios = segment_ratios(m_pred, m_obj_ego, regions)
    selected = select_regions(ratios)
    if selected:
        union = np.zeros(regions[0].shape, dtype=bool)
        for i in selected:
            union |= regions[i]
        out = heatmaps.mask_to_heatmap(union, blur_sigma, size=np.shape(fallback))
    else:
        out = np.asarray(fallback)
    if return_info:
        return out, PostprocessInfo(ratios, selected, not selected)
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class RefineItem:
    sample: Sample
    box: DetectionBox
    object_mask: np.ndarray
    g_ego: torch.Tensor
    exo_vectors: torch.Tensor  # (n_partners, d)


@dataclass
class RefineResult:
    model: Optional[GroundingModel]
    epoch_losses: List[float]
    masks: Dict[str, np.ndarray] = field(default_factory=dict)
    items: Dict[str, RefineItem] = field(default_factory=dict)


def object_box(detector, sample: Sample) -> Optional[DetectionBox]:
    kept = filter_boxes(detector.detect(sample.image, sample.object, image_id=sample.id))
    return max(kept, key=lambda b: b.confidence) if kept else None


def parse_scope(scope, known) -> List[Tuple[str, str]]:
    """``None``/"all" selects every class; otherwise a list of (object, affordance)."""
    if scope is None or scope == "all":
        return sorted(known)
    if isinstance(scope, str):
        scope = [tuple(part.split(":")) for part in scope.split(",") if part.strip()]
    scope = [tuple(c) for c in scope]
    unknown = [c for c in scope if c not in set(known)]
    if unknown:
        raise ValueError(f"refinement scope lists unknown classes: {unknown}")
    return sorted(set(scope))


def prepare_items(ego: Sequence[Sample], exo: Dict[str, Sample], pair_index: ExoPairIndex, detector, segmenter,
                  encoder, n_partners=N_PARTNERS) -> Dict[str, RefineItem]:
    """Detect, segment and encode everything the frozen side of the loss needs."""
    exo_cache: Dict[str, Optional[torch.Tensor]] = {}

    def exo_vec(sid):
        if sid not in exo_cache:
            s = exo[sid]
            box = object_box(detector, s)
            if box is None or box.area < 4:
                exo_cache[sid] = None
            else:
                mask = segmenter.segment_box(s.image, box, image_id=s.id)
                try:
                    exo_cache[sid] = exo_vector(mask, box, crop_encode(s.image, box, encoder))
                except ValueError:
                    exo_cache[sid] = None
        return exo_cache[sid]

    items = {}
    for s in ego:
        box = object_box(detector, s)
        if box is None or box.area < 4:
            logger.warning("%s: no object box, skipped", s.id)
            continue
        partners = [exo_id for exo_id, _ in pair_index[s.id]]
        vecs = [v for v in (exo_vec(p) for p in partners) if v is not None][:n_partners]
        if not vecs:
            logger.warning("%s: no usable exocentric partner, skipped", s.id)
            continue
        items[s.id] = RefineItem(
            sample=s, box=box,
            object_mask=np.asarray(segmenter.segment_box(s.image, box, image_id=s.id), dtype=bool),
            g_ego=torch.as_tensor(crop_encode(s.image, box, encoder)),
            exo_vectors=torch.stack(vecs),
        )
    return items


def _item_loss(m_pred, item: RefineItem):
    v = ego_vector(m_pred, item.box, item.g_ego.to(m_pred.dtype))
    return torch.stack([_one_minus_cos(v, e.to(m_pred.dtype)) for e in item.exo_vectors]).mean()


def train_refinement(ego: Sequence[Sample], exo: Sequence[Sample], pair_index: ExoPairIndex, mapping: PartMapping,
                     detector, segmenter, model_cfg: ModelConfig, cfg: TrainConfig, encoder=None, scope=None,
                     epochs=20, seed=1, checkpoint_path=None) -> RefineResult:
    """Fit a sigmoid mask model to the occlusion-similarity loss.

    Returns per-epoch mean losses and the final predicted mask for every
    in-scope egocentric image.
    """
    classes = parse_scope(scope, {s.cls for s in ego})
    ego = [s for s in ego if s.cls in set(classes)]
    if not ego:
        return RefineResult(None, [])
    encoder = encoder or make_aux_encoder("color")
    items = prepare_items(ego, {s.id: s for s in exo}, pair_index, detector, segmenter, encoder)
    ids = sorted(items)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    model_cfg = ModelConfig(**{**model_cfg.to_dict(), "seed": seed})
    model = GroundingModel(model_cfg)
    opt = make_optimizer(model, cfg)
    rng = np.random.default_rng(seed)
    size = model_cfg.image_size
    images = {sid: preprocess(items[sid].sample.image, size)[0] for sid in ids}
    texts = {sid: model.embed_text([mapping(items[sid].sample.object, items[sid].sample.affordance)])[0] for sid in ids}
    epoch_losses = []
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(len(ids))
        losses = []
        for k in range(0, len(order), cfg.batch):
            chunk = [ids[i] for i in order[k : k + cfg.batch]]
            logits = model.forward_refine(torch.stack([images[s] for s in chunk]), torch.stack([texts[s] for s in chunk]))
            total = 0.0
            for j, sid in enumerate(chunk):
                m = mask_from_logits(logits[j : j + 1], items[sid].sample.image.shape[:2])[0]
                loss = _item_loss(m, items[sid])
                total = total + loss
                losses.append(float(loss.detach()))
            opt.zero_grad(set_to_none=True)
            (total / len(chunk)).backward()
            opt.step()
        epoch_losses.append(float(np.mean(losses)))
        logger.info("refine epoch %d: %.5f", epoch, epoch_losses[-1])
    model.eval()
    masks = {}
    with torch.no_grad():
        for sid in ids:
            logits = model.forward_refine(images[sid][None], texts[sid][None])
            masks[sid] = mask_from_logits(logits, items[sid].sample.image.shape[:2])[0].double().numpy()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model, mode="refine",
                        meta={"epochs": epochs, "seed": seed, "scope": [list(c) for c in classes],
                              "aux_encoder": getattr(encoder, "name", type(encoder).__name__)})
    return RefineResult(model, epoch_losses, masks, items)


def refine_labels(result: RefineResult, segmenter, initial: Dict[str, np.ndarray], blur_sigma=1.0):
    """Post-process every predicted mask; returns ``{id: (heatmap, provenance)}``."""
    out = {}
    for sid, m_pred in result.masks.items():
        item = result.items[sid]
        segments = segmenter.auto_segment(item.sample.image, image_id=sid)
        fallback = initial[sid]
        heat, info = postprocess(m_pred, item.object_mask, segments, fallback, blur_sigma, return_info=True)
        prov = LabelProvenance(sid, "", degenerate=False, backend=getattr(segmenter, "backend_id", ""),
                               extra={"refined": True, "selected_regions": len(info.selected),
                                      "fallback": info.fallback, "ratios": info.ratios})
        out[sid] = (heat, prov)
    return out
