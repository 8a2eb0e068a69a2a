"""Slice-transformer classifier: a ViT slice encoder feeding a transformer
aggregator over the 38 slice embeddings, with a linear classification head
and attention extraction (slice attention via rollout over the aggregator,
area attention from the encoder's cls-to-patch attention)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .volume import SequenceStack, channels_to_rgb

N_SLICES = 38
IMAGE_SIZE = 224


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 28
    embed_dim: int = 192
    encoder_depth: int = 4
    encoder_heads: int = 4
    aggregator_depth: int = 2
    aggregator_heads: int = 6
    mlp_ratio: float = 4.0
    n_classes: int = 2
    frozen_encoder: bool = True
    attention_mode: str = "rollout"  # or "last_layer"

    @property
    def patch_grid(self):
        g = IMAGE_SIZE // self.patch_size
        return (g, g)


class SelfAttention(nn.Module):
    """Multi-head self-attention that also returns the attention matrices."""

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, d // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, t, d)
        return self.proj(out), attn


class Block(nn.Module):
    """Pre-norm transformer block with GELU feedforward."""

    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim)
        )

    def forward(self, x):
        h, attn = self.attn(self.norm1(x))
        x = x + h
        x = x + self.mlp(self.norm2(x))
        return x, attn


def attention_rollout(attn_layers, mode="rollout"):
    """Aggregate per-layer attention into token-to-token attribution.

    Heads are averaged; each layer's matrix is residual-corrected
    (0.5*A + 0.5*I) and row-normalized before the cross-layer product.
    mode="last_layer" uses only the final layer instead.
    """
    if mode == "last_layer":
        layers = attn_layers[-1:]
    else:
        layers = attn_layers
    rollout = None
    for a in layers:
        a = a.mean(dim=1)  # (B, T, T)
        eye = torch.eye(a.shape[-1], device=a.device, dtype=a.dtype)
        a = 0.5 * a + 0.5 * eye
        a = a / a.sum(dim=-1, keepdim=True)
        rollout = a if rollout is None else rollout @ a
    return rollout


class ViTSliceEncoder(nn.Module):
    """Small vision transformer mapping (3, 224, 224) slices to embeddings
    plus cls-to-patch attention. Stands in for a pretrained backbone at desk
    scale; any module with the same encode() contract can replace it."""

    def __init__(self, patch_size=28, embed_dim=192, depth=4, heads=4,
                 mlp_ratio=4.0, attention_mode="rollout"):
        super().__init__()
        if IMAGE_SIZE % patch_size:
            raise ValueError(f"patch size {patch_size} does not divide {IMAGE_SIZE}")
        g = IMAGE_SIZE // patch_size
        self.patch_grid = (g, g)
        self.embed_dim = embed_dim
        self.attention_mode = attention_mode
        self.patch_embed = nn.Conv2d(3, embed_dim, patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, g * g + 1, embed_dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(
            [Block(embed_dim, heads, mlp_ratio) for _ in range(depth)]
        )
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, images):
        b = images.shape[0]
        x = self.patch_embed(images).flatten(2).transpose(1, 2)  # (B, G, D)
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1)
        x = x + self.pos_embed
        attns = []
        for blk in self.blocks:
            x, a = blk(x)
            attns.append(a)
        return self.norm(x), attns

    def encode(self, images):
        """(B, 3, 224, 224) -> embeddings (B, D), patch attention (B, Gy*Gx)
        normalized to sum 1 per image."""
        x, attns = self.forward(images)
        # cls token plus max- and mean-pooled patch tokens: the max pool keeps
        # small high-contrast structures visible through the random-init
        # backbone, and the mean pool is sensitive to how much of the slice
        # they cover
        emb = x[:, 0] + x[:, 1:].max(dim=1).values + x[:, 1:].mean(dim=1)
        rollout = attention_rollout(attns, self.attention_mode)
        patch_attn = rollout[:, 0, 1:]
        patch_attn = patch_attn / patch_attn.sum(dim=-1, keepdim=True)
        return emb, patch_attn


class MstClassifier(nn.Module):
    """Per-slice encoder, learned slice position embeddings, transformer
    aggregation with a classification token, and a linear head to 2 logits."""

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.encoder = ViTSliceEncoder(
            config.patch_size, d, config.encoder_depth, config.encoder_heads,
            config.mlp_ratio, config.attention_mode,
        )
        self.slice_pos_embed = nn.Parameter(torch.zeros(1, N_SLICES, d))
        nn.init.trunc_normal_(self.slice_pos_embed, std=0.02)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.aggregator = nn.ModuleList(
            [Block(d, config.aggregator_heads, config.mlp_ratio)
             for _ in range(config.aggregator_depth)]
        )
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.n_classes)
        # per-dimension standardization of slice embeddings, set from the
        # training split; identity until set_embedding_stats is called
        self.register_buffer("emb_mean", torch.zeros(d))
        self.register_buffer("emb_sd", torch.ones(d))
        self.set_encoder_frozen(config.frozen_encoder)

    @torch.no_grad()
    def set_embedding_stats(self, mean, sd):
        mean = torch.as_tensor(mean, dtype=torch.float32)
        sd = torch.as_tensor(sd, dtype=torch.float32)
        if mean.shape != self.emb_mean.shape or sd.shape != self.emb_sd.shape:
            raise ValueError("embedding stats must have shape (embed_dim,)")
        if not torch.all(sd > 0):
            raise ValueError("embedding sd must be strictly positive")
        self.emb_mean.copy_(mean)
        self.emb_sd.copy_(sd)

    def set_encoder_frozen(self, frozen: bool):
        for p in self.encoder.parameters():
            p.requires_grad_(not frozen)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def encode_slices(self, stacks):
        """(B, C, 38, 224, 224) -> slice embeddings (B, 38, D)."""
        stacks = _to_tensor(stacks)
        b, c = stacks.shape[:2]
        if c == 1:
            rgb = stacks.expand(-1, 3, -1, -1, -1)
        elif c == 2:
            rgb = stacks[:, [0, 1, 0]]
        elif c == 3:
            rgb = stacks
        else:
            raise ValueError(f"cannot map {c} channels to 3")
        slices = rgb.permute(0, 2, 1, 3, 4).reshape(b * N_SLICES, 3, IMAGE_SIZE, IMAGE_SIZE)
        emb, _ = self.encoder.encode(slices)
        return emb.reshape(b, N_SLICES, -1)

    def aggregate(self, slice_emb):
        """(B, 38, D) slice embeddings -> logits (B, 2) and per-layer
        aggregator attention."""
        b = slice_emb.shape[0]
        x = (slice_emb - self.emb_mean) / self.emb_sd + self.slice_pos_embed
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1)
        attns = []
        for blk in self.aggregator:
            x, a = blk(x)
            attns.append(a)
        x = self.norm(x)
        return self.head(x[:, 0]), attns

    def forward(self, stacks):
        logits, _ = self.aggregate(self.encode_slices(stacks))
        return logits

    @torch.no_grad()
    def scores(self, stacks):
        """Softmax probability of the suspicious class, per exam."""
        self.eval()
        return torch.softmax(self.forward(stacks), dim=-1)[:, 1]

    @torch.no_grad()
    def slice_attention(self, stack_or_emb):
        """cls-to-slice attention over the aggregator (rollout by default);
        38 nonnegative weights summing to 1."""
        self.eval()
        emb = self._as_embeddings(stack_or_emb)
        _, attns = self.aggregate(emb)
        rollout = attention_rollout(attns, self.config.attention_mode)
        w = rollout[:, 0, 1:]
        return w / w.sum(dim=-1, keepdim=True)

    @torch.no_grad()
    def area_attention(self, stack, slice_idx: int):
        """Encoder cls-to-patch attention on one slice, upsampled to 224x224
        and min-max normalized (constant maps become all zeros)."""
        self.eval()
        if not 0 <= slice_idx < N_SLICES:
            raise ValueError(f"slice_idx {slice_idx} outside 0-{N_SLICES - 1}")
        stacks = _to_tensor(stack).unsqueeze(0)
        rgb = channels_to_rgb_torch(stacks[0])  # (3, 38, H, W)
        img = rgb[:, slice_idx].unsqueeze(0)
        _, patch_attn = self.encoder.encode(img)
        gy, gx = self.encoder.patch_grid
        heat = patch_attn.reshape(1, 1, gy, gx)
        heat = F.interpolate(heat, size=(IMAGE_SIZE, IMAGE_SIZE), mode="bilinear",
                             align_corners=False)[0, 0]
        lo, hi = heat.min(), heat.max()
        if hi - lo <= 0:
            return torch.zeros_like(heat)
        return (heat - lo) / (hi - lo)

    @torch.no_grad()
    def attention_bundle(self, stack):
        """Slice weights plus all 38 per-slice area maps for one stack."""
        slice_w = self.slice_attention(stack)[0]
        maps = torch.stack(
            [self.area_attention(stack, i) for i in range(N_SLICES)]
        )
        return AttentionBundle(
            slice_weights=slice_w.numpy().astype(np.float64),
            area_maps=maps.numpy().astype(np.float64),
        )

    def _as_embeddings(self, stack_or_emb):
        t = _to_tensor(stack_or_emb)
        if t.ndim == 2:  # (38, D)
            return t.unsqueeze(0)
        if t.ndim == 3 and t.shape[-2:] != (IMAGE_SIZE, IMAGE_SIZE):  # (B, 38, D)
            return t
        if t.ndim == 4:  # one stack (C, 38, H, W)
            return self.encode_slices(t.unsqueeze(0))
        return self.encode_slices(t)


@dataclass(frozen=True)
class AttentionBundle:
    slice_weights: np.ndarray  # (38,), nonneg, sums to 1
    area_maps: np.ndarray  # (38, 224, 224), each in [0, 1]


def channels_to_rgb_torch(stack: torch.Tensor) -> torch.Tensor:
    """(C, 38, H, W) -> (3, 38, H, W) by the channel replication rule."""
    c = stack.shape[0]
    if c == 1:
        return stack.expand(3, -1, -1, -1)
    if c == 2:
        return stack[[0, 1, 0]]
    if c == 3:
        return stack
    raise ValueError(f"cannot map {c} channels to 3")


def _to_tensor(x):
    if isinstance(x, SequenceStack):
        return torch.from_numpy(np.ascontiguousarray(x.channels))
    if isinstance(x, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(x))
    return x


# ---------------------------------------------------------------------------
# checkpoints


def _state_hash(state_dict) -> str:
    h = hashlib.sha256()
    for k in sorted(state_dict):
        h.update(k.encode())
        h.update(state_dict[k].numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(model: MstClassifier, out_dir, channel_map, config_hash="",
                    fold="", extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out_dir / "weights.pt")
    manifest = {
        "architecture": asdict(model.config),
        "channel_map": list(channel_map),
        "encoder_hash": _state_hash(model.encoder.state_dict()),
        "config_hash": config_hash,
        "fold": str(fold),
    }
    if extra:
        manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_checkpoint(ckpt_dir):
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    config = ModelConfig(**manifest["architecture"])
    model = MstClassifier(config)
    model.load_state_dict(torch.load(ckpt_dir / "weights.pt", weights_only=True))
    model.eval()
    return model, manifest
