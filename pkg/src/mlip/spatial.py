"""Patch embedding, attention blocks, the Guide and the Spatial Stage."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import BlockSpec, GuideConfig, ModelConfig
from .merge import merge_diagnostics, merge_step
from .nn import ParamBuilder, attend, linear, merge_heads, mlp, norm, self_attention, split_heads
from .tensor import Tensor, concat
from .tokens import AttentionRecord, TokenSet


class SpatialConfigError(ValueError):
    pass


@dataclass
class GuideOutput:
    coarse_cls: Tensor  # (B, 1, Cg)
    tokens: Tensor  # (B, m, Cg)

    def keys(self) -> Tensor:
        return concat([self.coarse_cls, self.tokens], axis=1)


@dataclass
class StageHistory:
    """Per spatial block: kind, token count after the block and class attention."""

    kinds: list = field(default_factory=list)
    token_counts: list = field(default_factory=list)
    mergeable_counts: list = field(default_factory=list)
    records: list = field(default_factory=list)
    merges: list = field(default_factory=list)

    @property
    def acceleration_counts(self) -> list:
        return [n for k, n in zip(self.kinds, self.mergeable_counts) if k == "acc"]


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, H, W, 3)`` images to ``(B, h*w, patch*patch*3)`` rows, row-major grid."""
    b, hh, ww, c = images.shape
    if hh % patch or ww % patch:
        raise SpatialConfigError(f"image {hh}x{ww} not divisible by patch size {patch}")
    h, w = hh // patch, ww // patch
    x = images.reshape(b, h, patch, w, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h * w, patch * patch * c)


def init_patch_embed(pb: ParamBuilder, prefix: str, patch: int, width: int, n_tokens: int):
    pb.normal(f"{prefix}.weight", (patch * patch * 3, width))
    pb.normal(f"{prefix}.pos", (n_tokens, width))


def sincos_2d(grid: int, width: int) -> np.ndarray:
    """Fixed 2D sine-cosine table: half the channels encode rows, half columns."""
    quarter = width // 4
    freqs = 1.0 / (100.0 ** (np.arange(quarter) / max(quarter, 1)))
    coords = np.arange(grid, dtype=np.float64)
    ang = coords[:, None] * freqs[None, :]
    axis = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)  # (grid, width/2)
    rows = np.repeat(axis, grid, axis=0)
    cols = np.tile(axis, (grid, 1))
    table = np.zeros((grid * grid, width))
    table[:, :2 * quarter] = rows
    table[:, 2 * quarter:4 * quarter] = cols
    return table


# amplitude of the fixed table; comparable to patch content at init
POS_SCALE = 0.1


def patch_embed(images: np.ndarray, p: dict, prefix: str, patch: int) -> TokenSet:
    """Bias-free linear map of each patch plus fixed and learned positional tables."""
    images = np.asarray(images)
    rows = Tensor(patchify(images, patch))
    w = p[f"{prefix}.weight"]
    fixed = Tensor(POS_SCALE * sincos_2d(images.shape[1] // patch, w.shape[1]))
    return TokenSet.fresh(rows @ w + p[f"{prefix}.pos"] + fixed)


def class_attention(probs: Tensor, cls_index) -> AttentionRecord:
    return AttentionRecord(np.asarray(probs.data[:, :, cls_index, :], dtype=np.float64))


def mhsa_block_forward(ts: TokenSet, p: dict, prefix: str, heads: int, mask=None):
    """Pre-norm self-attention and MLP, both residual."""
    x = ts.tokens
    if x.shape[-1] % heads:
        raise SpatialConfigError(f"{heads} heads do not divide width {x.shape[-1]}")
    attn, probs = self_attention(norm(x, p, f"{prefix}.ln1"), p, f"{prefix}.attn", heads, mask)
    x = x + attn
    x = x + mlp(norm(x, p, f"{prefix}.ln2"), p, f"{prefix}.mlp")
    record = class_attention(probs, ts.cls_index) if ts.cls_index is not None else None
    return ts.replace(x), record


# -------------------------------------------------------------------- the Guide
def init_guide(pb: ParamBuilder, prefix: str, g: GuideConfig, low_res: int, ratio: int):
    n = (low_res // g.patch_size) ** 2
    init_patch_embed(pb, f"{prefix}.patch", g.patch_size, g.width, n)
    pb.normal(f"{prefix}.cls", (1, 1, g.width))
    pb.normal(f"{prefix}.cls_pos", (1, 1, g.width))
    for i in range(g.depth):
        pb.attention_block(f"{prefix}.blocks.{i}", g.width, ratio)
    pb.norm(f"{prefix}.ln_out", g.width)


def guide_forward(low_res: np.ndarray, p: dict, g: GuideConfig, prefix: str = "image.guide") -> GuideOutput:
    """Small ViT over the low-resolution counterpart; returns C^c and its tokens."""
    low_res = np.asarray(low_res)
    if low_res.shape[1] % g.patch_size or low_res.shape[2] % g.patch_size:
        raise SpatialConfigError(f"guide input {low_res.shape[1:3]} not divisible by {g.patch_size}")
    patches = patch_embed(low_res, p, f"{prefix}.patch", g.patch_size).tokens
    b = patches.shape[0]
    cls = (p[f"{prefix}.cls"] + p[f"{prefix}.cls_pos"]) * Tensor(np.ones((b, 1, 1)))
    ts = TokenSet.fresh(concat([cls, patches], axis=1), cls_index=0)
    for i in range(g.depth):
        ts, _ = mhsa_block_forward(ts, p, f"{prefix}.blocks.{i}", g.heads)
    x = norm(ts.tokens, p, f"{prefix}.ln_out")
    return GuideOutput(x[:, 0:1, :], x[:, 1:, :])


# -------------------------------------------------------------- cross-attention
def init_cross_attention(pb: ParamBuilder, prefix: str, width: int, guide_width: int):
    pb.norm(f"{prefix}.ln_q", width)
    pb.norm(f"{prefix}.ln_kv", guide_width)
    pb.linear(f"{prefix}.q", width, width)
    pb.linear(f"{prefix}.k", guide_width, width)
    pb.linear(f"{prefix}.v", guide_width, width)
    pb.linear(f"{prefix}.proj", width, width)


def cross_attention(ts: TokenSet, guide: GuideOutput, p: dict, prefix: str, heads: int,
                    return_probs: bool = False):
    """Image tokens and C^f query the Guide's class token and features."""
    if ts.cls_index is None:
        raise SpatialConfigError("cross-attention needs the fine class token")
    x = ts.tokens
    kv = norm(guide.keys(), p, f"{prefix}.ln_kv")
    q = split_heads(linear(norm(x, p, f"{prefix}.ln_q"), p, f"{prefix}.q"), heads)
    k = split_heads(linear(kv, p, f"{prefix}.k"), heads)
    v = split_heads(linear(kv, p, f"{prefix}.v"), heads)
    mixed, probs = attend(q, k, v)
    out = ts.replace(x + linear(merge_heads(mixed), p, f"{prefix}.proj"))
    return (out, probs) if return_probs else out


# ------------------------------------------------------------ the Spatial Stage
def validate_schedule(schedule):
    if not schedule or schedule[0].kind != "mhsa":
        raise SpatialConfigError("an Acceleration Block cannot precede every MHSA Block")
    for spec in schedule:
        if spec.kind not in ("mhsa", "acc"):
            raise SpatialConfigError(f"unknown block kind {spec.kind!r}")


def init_spatial_stage(pb: ParamBuilder, prefix: str, cfg: ModelConfig):
    pb.normal(f"{prefix}.cls", (1, 1, cfg.width))
    for i, spec in enumerate(cfg.spatial_schedule):
        block = f"{prefix}.blocks.{i}"
        if spec.kind == "acc":
            init_cross_attention(pb, f"{block}.cross", cfg.width, cfg.guide.width)
        pb.attention_block(block, cfg.width, cfg.mlp_ratio)


def acceleration_block_forward(ts: TokenSet, guide: GuideOutput, p: dict, prefix: str,
                               heads: int, keep_ratio: float):
    """Cross-attention, self-attention (recording C^f), merge, then MLP."""
    ts = cross_attention(ts, guide, p, f"{prefix}.cross", heads)
    x = ts.tokens
    attn, probs = self_attention(norm(x, p, f"{prefix}.ln1"), p, f"{prefix}.attn", heads)
    ts = ts.replace(x + attn)
    record = class_attention(probs, ts.cls_index)
    merged = merge_step(ts, record, keep_ratio)
    stats = merge_diagnostics(ts, merged, keep_ratio)
    x = merged.tokens
    return merged.replace(x + mlp(norm(x, p, f"{prefix}.ln2"), p, f"{prefix}.mlp")), record, stats


def spatial_stage_forward(freq_tokens: TokenSet, low_res: np.ndarray, p: dict, cfg: ModelConfig,
                          prefix: str = "image.spatial"):
    """Append C^f, run the block schedule; returns the final tokens and history."""
    schedule = cfg.spatial_schedule
    validate_schedule(schedule)
    x = freq_tokens.tokens
    b, n = x.shape[:2]
    cls = p[f"{prefix}.cls"] * Tensor(np.ones((b, 1, 1)))
    ts = TokenSet(concat([x, cls], axis=1),
                  np.concatenate([freq_tokens.sizes, np.ones((b, 1))], axis=1), cls_index=n)
    guide = None
    if any(s.kind == "acc" for s in schedule):
        guide = guide_forward(low_res, p, cfg.guide)
    history = StageHistory()
    for i, spec in enumerate(schedule):
        block = f"{prefix}.blocks.{i}"
        if spec.kind == "mhsa":
            ts, record = mhsa_block_forward(ts, p, block, cfg.heads)
        else:
            ts, record, stats = acceleration_block_forward(ts, guide, p, block, cfg.heads,
                                                           spec.keep_ratio)
            history.merges.append(stats)
        history.kinds.append(spec.kind)
        history.token_counts.append(ts.count)
        history.mergeable_counts.append(ts.mergeable_count)
        history.records.append(record)
    return ts, history
