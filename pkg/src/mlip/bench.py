"""Analytic multiply-accumulate accounting for the image encoder.

Counts are per image. Attention over ``n`` tokens of width ``C`` costs
``2 n^2 C`` (scores and mixing) plus ``4 n C^2`` (q, k, v and output
projections); an MLP with 4x expansion costs ``8 n C^2``. A Fourier Block
counts its radix-2 transforms as ``2 n log2(n) C`` real multiply-adds each
way, plus the power spectrum and the Lego modulation on ``n/2`` entries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .config import BlockSpec, ModelConfig
from .merge import merge_count


def attention_macs(n: int, c: int) -> int:
    return 2 * n * n * c + 4 * n * c * c


def mlp_macs(n: int, c: int, ratio: int = 4) -> int:
    return 2 * ratio * n * c * c


def fourier_macs(n: int, c: int, pieces: int, ratio: int = 4) -> int:
    half = n // 2
    transforms = 2 * (2 * n * int(math.log2(n)) * c)
    spectrum = 2 * half * c + pieces * half * c
    return transforms + spectrum + mlp_macs(n, c, ratio)


def cross_attention_macs(n: int, keys: int, c: int, cg: int) -> int:
    """Queries from ``n`` tokens, keys/values from ``keys`` guide tokens."""
    return 2 * n * c * c + 2 * keys * cg * c + 2 * n * keys * c


def merge_macs(merged: int, c: int) -> int:
    return merged * merged * c


@dataclass
class BlockCost:
    index: int
    kind: str
    tokens_in: int  # including the fine class token
    mergeable_out: int
    macs: int


@dataclass
class BenchReport:
    blocks: list
    embed_macs: int
    fourier_macs: int
    guide_macs: int
    reference_total: int  # same config with every keep ratio set to 1
    token_counts: list = field(default_factory=list)  # mergeable tokens after each acc block

    @property
    def total(self) -> int:
        return self.embed_macs + self.fourier_macs + self.guide_macs + sum(b.macs for b in self.blocks)

    @property
    def savings(self) -> float:
        return 1.0 - self.total / self.reference_total

    @property
    def speedup(self) -> float:
        return self.reference_total / self.total

    def lines(self) -> list:
        out = [f"patch_embed macs={self.embed_macs}",
               f"frequency_stage macs={self.fourier_macs}",
               f"guide macs={self.guide_macs}"]
        for b in self.blocks:
            out.append(f"block={b.index} kind={b.kind} tokens_in={b.tokens_in} "
                       f"mergeable_out={b.mergeable_out} macs={b.macs}")
        out.append(f"total_with_merging={self.total}")
        out.append(f"total_without_merging={self.reference_total}")
        out.append(f"ratio={self.speedup:.4f} savings={self.savings:.4f}")
        out.append("tokens=" + ",".join(str(t) for t in self.token_counts))
        return out


def _spatial_costs(cfg: ModelConfig):
    c, r, g = cfg.width, cfg.mlp_ratio, cfg.guide
    keys = (cfg.low_res_size // g.patch_size) ** 2 + 1
    mergeable = cfg.grid * cfg.grid
    blocks = []
    for i, spec in enumerate(cfg.spatial_schedule):
        n = mergeable + 1
        if spec.kind == "mhsa":
            macs = attention_macs(n, c) + mlp_macs(n, c, r)
        else:
            removed = merge_count(mergeable, spec.keep_ratio) if spec.keep_ratio < 1 else 0
            after = n - removed
            macs = cross_attention_macs(n, keys, c, g.width) + attention_macs(n, c) \
                + merge_macs(removed, c) + mlp_macs(after, c, r)
            mergeable -= removed
        blocks.append(BlockCost(i, spec.kind, n, mergeable, macs))
    return blocks


def _guide_macs(cfg: ModelConfig) -> int:
    if not any(s.kind == "acc" for s in cfg.spatial_schedule):
        return 0
    g = cfg.guide
    m = (cfg.low_res_size // g.patch_size) ** 2
    embed = m * 3 * g.patch_size ** 2 * g.width
    return embed + g.depth * (attention_macs(m + 1, g.width) + mlp_macs(m + 1, g.width, cfg.mlp_ratio))


def without_merging(cfg: ModelConfig) -> ModelConfig:
    schedule = tuple(BlockSpec(s.kind, 1.0) for s in cfg.spatial_schedule)
    return replace(cfg, spatial_schedule=schedule)


def _total(cfg: ModelConfig, blocks) -> tuple:
    n = cfg.grid * cfg.grid
    embed = n * 3 * cfg.patch_size ** 2 * cfg.width
    freq = cfg.freq_blocks * fourier_macs(n, cfg.width, cfg.lego_pieces, cfg.mlp_ratio)
    guide = _guide_macs(cfg)
    return embed, freq, guide, embed + freq + guide + sum(b.macs for b in blocks)


def bench(cfg: ModelConfig) -> BenchReport:
    cfg.validate()
    blocks = _spatial_costs(cfg)
    embed, freq, guide, _ = _total(cfg, blocks)
    ref = without_merging(cfg)
    *_, reference = _total(ref, _spatial_costs(ref))
    counts = [b.mergeable_out for b in blocks if b.kind == "acc"]
    return BenchReport(blocks, embed, freq, guide, reference, counts)


def observed_token_counts(cfg: ModelConfig, seed: int = 0, batch: int = 2) -> list:
    """Mergeable token counts after each Acceleration Block in a real forward pass."""
    from .model import encode_image, init_model
    from .rng import generator
    from .tensor import no_grad

    state = init_model(cfg, seed)
    images = generator(seed, "bench").random((batch, cfg.image_size, cfg.image_size, 3))
    with no_grad():
        enc = encode_image(images.astype(np.float32), state)
    return enc.history.acceleration_counts
