"""The grounding network.

Image -> ViT encoder (class token + patch grid, projected to ``dim``)
affordance text -> frozen text embedding -> (optional reasoning residual)
-> cross-attention fuser -> affordance feature ``f_A``
-> two-way transformer decoder with a dynamic classifier -> logits at 4x the patch grid.

The same network in "refine" mode skips the fuser: the decoder query is
the class token plus the part-name embedding and the logits go through a
sigmoid instead of a spatial softmax.
"""

import hashlib
import math
from dataclasses import asdict, dataclass, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ._io import atomic_save, resize_image

CHECKPOINT_FORMAT = "wsag-checkpoint"
CHECKPOINT_VERSION = 1

# CLIP image normalization
PIXEL_MEAN = (0.48145466, 0.4578275, 0.40821073)
PIXEL_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    enc_width: int = 768
    enc_depth: int = 12
    enc_heads: int = 12
    dim: int = 512
    fuser_blocks: int = 4
    fuser_heads: int = 8
    decoder_blocks: int = 2
    decoder_heads: int = 8
    mlp_ratio: float = 4.0
    affordances: Tuple[str, ...] = ()
    text_provider: str = "hash"
    text_salt: str = "wsag"
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        self.affordances = tuple(self.affordances)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def logit_size(self) -> int:
        return 4 * self.grid

    def to_dict(self):
        d = asdict(self)
        d["affordances"] = list(self.affordances)
        return d


def base_config(**overrides) -> ModelConfig:
    """ViT-B/16 encoder with a 512-d projection."""
    return replace(ModelConfig(), **overrides)


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale model: 2 encoder layers of width 32, d = 32."""
    cfg = ModelConfig(image_size=64, patch_size=16, enc_width=32, enc_depth=2, enc_heads=2, dim=32,
                      fuser_blocks=4, fuser_heads=2, decoder_blocks=2, decoder_heads=2, mlp_ratio=2.0)
    return replace(cfg, **overrides)


# ---------------------------------------------------------------------------
# Text embeddings
# ---------------------------------------------------------------------------


class HashTextEmbedder:
    """Frozen deterministic text table: each string seeds its own unit vector."""

    def __init__(self, dim: int, salt: str = "wsag"):
        self.dim = dim
        self.salt = salt
        self._cache: Dict[str, np.ndarray] = {}

    def __call__(self, text: str) -> np.ndarray:
        if text not in self._cache:
            seed = int.from_bytes(hashlib.sha256(f"{self.salt}\x00{text}".encode()).digest()[:8], "little")
            v = np.random.default_rng(seed).standard_normal(self.dim)
            self._cache[text] = v / np.linalg.norm(v)
        return self._cache[text].copy()


class TableTextEmbedder:
    """Pre-extracted text features (e.g. from a CLIP text encoder) in an ``.npz``."""

    def __init__(self, path):
        with np.load(path) as z:
            self.table = {k: z[k].astype(np.float64) for k in z.files}
        dims = {v.shape[0] for v in self.table.values()}
        if len(dims) != 1:
            raise ValueError("text table has inconsistent dimensions")
        self.dim = dims.pop()

    def __call__(self, text: str) -> np.ndarray:
        try:
            return self.table[text].copy()
        except KeyError:
            raise KeyError(f"no pre-extracted text feature for {text!r}") from None


def make_text_embedder(cfg: ModelConfig):
    if cfg.text_provider == "hash":
        return HashTextEmbedder(cfg.dim, cfg.text_salt)
    if cfg.text_provider.startswith("table:"):
        emb = TableTextEmbedder(cfg.text_provider[len("table:"):])
        if emb.dim != cfg.dim:
            raise ValueError(f"text table dim {emb.dim} != model dim {cfg.dim}")
        return emb
    raise ValueError(f"unknown text provider {cfg.text_provider!r}")


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x):
        b, n, c = x.shape
        return x.reshape(b, n, self.heads, c // self.heads).transpose(1, 2)

    def forward(self, q, k, v):
        q, k, v = self._split(self.q_proj(q)), self._split(self.k_proj(k)), self._split(self.v_proj(v))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1]), dim=-1)
        out = (attn @ v).transpose(1, 2).flatten(2)
        return self.out_proj(out)


class MLP(nn.Module):
    def __init__(self, in_dim, hidden, out_dim, layers=2, act=nn.GELU):
        super().__init__()
        dims = [in_dim] + [hidden] * (layers - 1) + [out_dim]
        mods = []
        for i in range(layers):
            mods.append(nn.Linear(dims[i], dims[i + 1]))
            if i < layers - 1:
                mods.append(act())
        self.net = nn.Sequential(*mods)

    def forward(self, x):
        return self.net(x)


class EncoderBlock(nn.Module):
    def __init__(self, width, heads, mlp_ratio):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = Attention(width, heads)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = MLP(width, int(width * mlp_ratio), width)

    def forward(self, x):
        h = self.ln1(x)
        x = x + self.attn(h, h, h)
        return x + self.mlp(self.ln2(x))


@dataclass
class FeatureBundle:
    cls: torch.Tensor  # (B, d)
    patches: torch.Tensor  # (B, d, h, w)


class VisualEncoder(nn.Module):
    """Plain ViT; the final LayerNorm + projection is applied to every token."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.enc_width
        self.patch_embed = nn.Conv2d(3, w, cfg.patch_size, cfg.patch_size, bias=False)
        self.cls_token = nn.Parameter(torch.randn(1, 1, w) * w ** -0.5)
        self.pos_embed = nn.Parameter(torch.randn(1, cfg.grid ** 2 + 1, w) * w ** -0.5)
        self.ln_pre = nn.LayerNorm(w)
        self.blocks = nn.ModuleList(EncoderBlock(w, cfg.enc_heads, cfg.mlp_ratio) for _ in range(cfg.enc_depth))
        self.ln_post = nn.LayerNorm(w)
        self.proj = nn.Linear(w, cfg.dim, bias=False)

    def forward(self, x) -> FeatureBundle:
        b, _, H, W = x.shape
        if H != self.cfg.image_size or W != self.cfg.image_size:
            raise ValueError(f"expected {self.cfg.image_size}px input, got {H}x{W}")
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        tokens = torch.cat([self.cls_token.expand(b, -1, -1), tokens], dim=1) + self.pos_embed
        tokens = self.ln_pre(tokens)
        for blk in self.blocks:
            tokens = blk(tokens)
        tokens = self.proj(self.ln_post(tokens))
        g = self.cfg.grid
        return FeatureBundle(tokens[:, 0], tokens[:, 1:].transpose(1, 2).reshape(b, -1, g, g))


class Reasoner(nn.Module):
    """Object prediction from the class token, then part prediction from [object, query]."""

    def __init__(self, dim):
        super().__init__()
        self.noun = MLP(dim, dim, dim, act=nn.ReLU)
        self.part = MLP(2 * dim, dim, dim, act=nn.ReLU)

    def forward(self, cls, f_text):
        f_obj = self.noun(cls)
        f_part = self.part(torch.cat([f_obj, f_text], dim=-1))
        return f_obj, f_part


class FuserBlock(nn.Module):
    """Cross-attention block: query tokens attend to key/value tokens."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.ln_q = nn.LayerNorm(dim)
        self.ln_kv = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), dim)

    def forward(self, q, kv):
        kv = self.ln_kv(kv)
        q = q + self.attn(self.ln_q(q), kv, kv)
        return q + self.mlp(self.ln2(q))


class Fuser(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(FuserBlock(cfg.dim, cfg.fuser_heads, cfg.mlp_ratio) for _ in range(cfg.fuser_blocks))
        self.ln = nn.LayerNorm(cfg.dim)

    def forward(self, query, feats: FeatureBundle):
        kv = torch.cat([feats.cls[:, None], feats.patches.flatten(2).transpose(1, 2)], dim=1)
        q = query[:, None]
        for blk in self.blocks:
            q = blk(q, kv)
        return self.ln(q)[:, 0]


def grid_positional_encoding(h, w, dim, dtype=torch.float32):
    """Fixed sinusoidal 2-D encoding, shape (h*w, dim)."""
    quarter = dim // 4
    freqs = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float64) / max(quarter, 1)))
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w * 2 * math.pi
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    ay = gy.reshape(-1, 1) * freqs
    ax = gx.reshape(-1, 1) * freqs
    pe = torch.cat([ay.sin(), ay.cos(), ax.sin(), ax.cos()], dim=1)
    if pe.shape[1] < dim:
        pe = F.pad(pe, (0, dim - pe.shape[1]))
    return pe.to(dtype)


class TwoWayBlock(nn.Module):
    """Self-attn on A, cross-attn A->B, MLP on A, cross-attn B->A."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.self_attn = Attention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_a2b = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio), dim, act=nn.ReLU)
        self.norm3 = nn.LayerNorm(dim)
        self.cross_b2a = Attention(dim, heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, a, b, a_pe, b_pe):
        q = a + a_pe
        a = self.norm1(a + self.self_attn(q, q, a))
        a = self.norm2(a + self.cross_a2b(a + a_pe, b + b_pe, b))
        a = self.norm3(a + self.mlp(a))
        b = self.norm4(b + self.cross_b2a(b + b_pe, a + a_pe, a))
        return a, b


class LayerNorm2d(nn.Module):
    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        u = x.mean(1, keepdim=True)
        s = (x - u).pow(2).mean(1, keepdim=True)
        x = (x - u) / torch.sqrt(s + self.eps)
        return self.weight[:, None, None] * x + self.bias[:, None, None]


class UpStage(nn.Module):
    """2x bilinear upsampling followed by a pointwise projection."""

    def __init__(self, c_in, c_out, norm=True):
        super().__init__()
        self.proj = nn.Conv2d(c_in, c_out, 1)
        self.norm = LayerNorm2d(c_out) if norm else nn.Identity()
        self.act = nn.GELU()

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.act(self.norm(self.proj(x)))


class MaskDecoder(nn.Module):
    """Token set A = [f_A, c_V, x]; token set B = patch tokens."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.mask_token = nn.Parameter(torch.randn(1, 1, d) * d ** -0.5)
        self.blocks = nn.ModuleList(TwoWayBlock(d, cfg.decoder_heads, cfg.mlp_ratio) for _ in range(cfg.decoder_blocks))
        self.final_attn = Attention(d, cfg.decoder_heads)
        self.norm_final = nn.LayerNorm(d)
        self.up1 = UpStage(d, d // 2)
        self.up2 = UpStage(d // 2, d // 4, norm=False)
        self.hyper = MLP(d, d, d // 4, layers=3, act=nn.ReLU)

    def forward(self, patches, f_a, cls, pe=None):
        """``patches`` (B, d, h, w); ``pe`` (h*w, d) positional encoding of the patch grid."""
        bsz, d, h, w = patches.shape
        if pe is None:
            pe = grid_positional_encoding(h, w, d, patches.dtype)
        a = torch.stack([f_a, cls, self.mask_token[0, 0].expand(bsz, -1)], dim=1)
        a_pe = a
        b = patches.flatten(2).transpose(1, 2)
        b_pe = pe.to(patches.dtype)[None].expand(bsz, -1, -1)
        for blk in self.blocks:
            a, b = blk(a, b, a_pe, b_pe)
        a = self.norm_final(a + self.final_attn(a + a_pe, b + b_pe, b))
        grid = b.transpose(1, 2).reshape(bsz, d, h, w)
        up = self.up2(self.up1(grid))
        weight = self.hyper(a[:, 2])
        logits = torch.einsum("bc,bchw->bhw", weight, up)
        return logits, weight


class GroundingModel(nn.Module):
    def __init__(self, cfg: ModelConfig, text_embedder=None):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.encoder = VisualEncoder(cfg)
            self.reasoner = Reasoner(cfg.dim)
            self.fuser = Fuser(cfg)
            self.decoder = MaskDecoder(cfg)
            self.exo_head = nn.Linear(cfg.dim, max(1, len(cfg.affordances)))
        self.text = text_embedder if text_embedder is not None else make_text_embedder(cfg)

    @property
    def dtype(self):
        return self.encoder.proj.weight.dtype

    def embed_text(self, texts: Sequence[str]) -> torch.Tensor:
        return torch.as_tensor(np.stack([self.text(t) for t in texts]), dtype=self.dtype)

    def encode(self, images) -> FeatureBundle:
        return self.encoder(images)

    def forward(self, images, f_text, reasoning=True, feats: Optional[FeatureBundle] = None):
        """Affordance grounding pass; returns a dict of logits and intermediate features."""
        feats = self.encode(images) if feats is None else feats
        out = {"cls": feats.cls, "patches": feats.patches}
        query = f_text
        if reasoning:
            f_obj, f_part = self.reasoner(feats.cls, f_text)
            out["f_obj"], out["f_part"] = f_obj, f_part
            query = f_text + f_part
        f_a = self.fuser(query, feats)
        logits, weight = self.decoder(feats.patches, f_a, feats.cls)
        out.update(f_a=f_a, logits=logits, dyn_weight=weight)
        return out

    def forward_refine(self, images, f_part_text):
        feats = self.encode(images)
        f_a = feats.cls + f_part_text
        logits, _ = self.decoder(feats.patches, f_a, feats.cls)
        return logits


# ---------------------------------------------------------------------------
# Pre/post-processing and inference
# ---------------------------------------------------------------------------


def preprocess(images, size, dtype=torch.float32) -> torch.Tensor:
    """uint8 (B?, H, W, 3) -> normalized (B, 3, size, size) tensor."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    batch = np.stack([resize_image(im, (size, size)) for im in images])
    t = torch.as_tensor(batch, dtype=dtype).permute(0, 3, 1, 2) / 255.0
    mean = torch.tensor(PIXEL_MEAN, dtype=dtype)[None, :, None, None]
    std = torch.tensor(PIXEL_STD, dtype=dtype)[None, :, None, None]
    return (t - mean) / std


def heatmap_from_logits(logits: torch.Tensor, size) -> torch.Tensor:
    """Bilinear upsample (B, h, w) logits to ``size`` then softmax over all pixels."""
    up = F.interpolate(logits[:, None], size=tuple(size), mode="bilinear", align_corners=False)[:, 0]
    flat = torch.softmax(up.flatten(1), dim=1)
    return flat.reshape(up.shape)


def log_heatmap_from_logits(logits: torch.Tensor, size) -> torch.Tensor:
    up = F.interpolate(logits[:, None], size=tuple(size), mode="bilinear", align_corners=False)[:, 0]
    return torch.log_softmax(up.flatten(1), dim=1).reshape(up.shape)


def mask_from_logits(logits: torch.Tensor, size) -> torch.Tensor:
    up = F.interpolate(logits[:, None], size=tuple(size), mode="bilinear", align_corners=False)[:, 0]
    return torch.sigmoid(up)


@torch.no_grad()
def predict_heatmap(model: GroundingModel, image, affordance: str, size=(224, 224), reasoning=True) -> np.ndarray:
    model.eval()
    x = preprocess(image, model.cfg.image_size, model.dtype)
    out = model(x, model.embed_text([affordance]), reasoning=reasoning)
    return heatmap_from_logits(out["logits"], size)[0].double().numpy()


@torch.no_grad()
def predict_mask(model: GroundingModel, image, part: str, size=None) -> np.ndarray:
    model.eval()
    size = np.shape(image)[:2] if size is None else size
    x = preprocess(image, model.cfg.image_size, model.dtype)
    logits = model.forward_refine(x, model.embed_text([part]))
    return mask_from_logits(logits, size)[0].double().numpy()


def save_checkpoint(path, model: GroundingModel, mode="grounding", meta=None):
    """Write a self-describing checkpoint (format tag, version, config, tensors)."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "mode": mode,
        "config": model.cfg.to_dict(),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "meta": dict(meta or {}),
    }
    atomic_save(path, lambda tmp: torch.save(payload, tmp))


def load_checkpoint(path, text_embedder=None):
    """Returns ``(model, payload)``; raises ``ValueError`` for foreign files."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as err:
        raise ValueError(f"unknown checkpoint format: {path}: {err}") from err
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT or "version" not in payload:
        raise ValueError(f"unknown checkpoint format: {path}")
    if payload["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {payload['version']} is newer than supported {CHECKPOINT_VERSION}")
    cfg = ModelConfig(**payload["config"])
    model = GroundingModel(cfg, text_embedder)
    state = payload["state_dict"]
    dtype = next(iter(state.values())).dtype
    model.to(dtype)
    model.load_state_dict(state)
    model.eval()
    return model, payload
