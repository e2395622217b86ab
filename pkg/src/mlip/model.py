"""The full dual encoder: Frequency Stage, Spatial Stage with Guide, text encoder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import align
from .config import LOSS_NAMES, ModelConfig
from .data import END_ID, PAD_ID, low_resolution
from .nn import ParamBuilder, causal_mask, linear, mlp, norm
from .rng import generator
from .spatial import (StageHistory, init_guide, init_patch_embed, init_spatial_stage,
                      mhsa_block_forward, patch_embed, spatial_stage_forward)
from .spectral import LegoFilter, fourier_mix
from .tensor import Tensor, exp, l2_normalize
from .tokens import TokenSet

TAU_MIN, TAU_MAX = 0.01, 100.0


class ModelInputError(ValueError):
    pass


@dataclass
class ModelState:
    config: ModelConfig
    params: dict  # hierarchical name -> Tensor

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def tau(self) -> float:
        return float(np.exp(self.params["log_tau"].data))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def clamp_tau(self):
        t = self.params["log_tau"]
        t.data[...] = np.clip(t.data, math.log(TAU_MIN), math.log(TAU_MAX))


def init_model(cfg: ModelConfig, seed: int) -> ModelState:
    cfg.validate()
    pb = ParamBuilder(generator(seed, "init"))
    c, ratio = cfg.width, cfg.mlp_ratio
    init_patch_embed(pb, "image.patch", cfg.patch_size, c, cfg.grid * cfg.grid)
    half = (cfg.grid, cfg.grid // 2, c)
    for i in range(cfg.freq_blocks):
        block = f"image.fourier.{i}"
        pb.norm(f"{block}.ln1", c)
        pb.normal(f"{block}.lego", (cfg.lego_pieces,) + half)
        pb.norm(f"{block}.ln2", c)
        pb.mlp(f"{block}.mlp", c, ratio)
    pb.norm("image.ln_fre", c)
    pb.linear("image.proj_fre", c, cfg.proj_dim, bias=False)
    init_spatial_stage(pb, "image.spatial", cfg)
    if any(s.kind == "acc" for s in cfg.spatial_schedule):
        init_guide(pb, "image.guide", cfg.guide, cfg.low_res_size, ratio)
    pb.norm("image.ln_spa", c)
    pb.linear("image.proj_spa", c, cfg.proj_dim, bias=False)

    t = cfg.text
    pb.normal("text.embed", (t.vocab_size, t.width))
    pb.normal("text.pos", (t.context_length, t.width))
    for i in range(t.depth):
        pb.attention_block(f"text.blocks.{i}", t.width, ratio)
    pb.norm("text.ln_out", t.width)
    pb.linear("text.proj", t.width, cfg.proj_dim, bias=False)
    pb._add("log_tau", np.array(math.log(cfg.tau_init)))
    return ModelState(cfg, pb.params)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form number of scalar parameters for ``cfg``."""
    c, r, g, t = cfg.width, cfg.mlp_ratio, cfg.guide, cfg.text

    def block(width):
        return 4 * width + (3 * width * width + 3 * width) + (width * width + width) \
            + 2 * r * width * width + r * width + width

    n = cfg.grid * cfg.grid
    total = 3 * cfg.patch_size ** 2 * c + n * c
    total += cfg.freq_blocks * (4 * c + cfg.lego_pieces * n // 2 * c + 2 * r * c * c + r * c + c)
    total += 2 * c + c * cfg.proj_dim
    total += c
    for spec in cfg.spatial_schedule:
        total += block(c)
        if spec.kind == "acc":
            total += 2 * c + 2 * g.width + (c * c + c) + 2 * (g.width * c + c) + (c * c + c)
    if any(s.kind == "acc" for s in cfg.spatial_schedule):
        m = (cfg.low_res_size // g.patch_size) ** 2
        total += 3 * g.patch_size ** 2 * g.width + m * g.width + 2 * g.width
        total += g.depth * block(g.width) + 2 * g.width
    total += 2 * c + c * cfg.proj_dim
    total += t.vocab_size * t.width + t.context_length * t.width + t.depth * block(t.width)
    total += 2 * t.width + t.width * cfg.proj_dim + 1
    return total


# -------------------------------------------------------------------- encoders
@dataclass
class ImageEncoding:
    freq_tokens: Tensor  # (B, n, C)
    spatial: TokenSet
    y_fre: Tensor  # (B, d) unit norm
    y_spa: Tensor
    a: Tensor  # projected frequency tokens (B, n, d)
    c: Tensor  # projected spatial tokens without C^f (B, l3, d)
    history: StageHistory


def fourier_block_forward(ts: TokenSet, p: dict, prefix: str, grid: int) -> TokenSet:
    """Pre-norm spectral mixing and MLP, both residual, on an ``h x w`` grid."""
    x = ts.tokens
    b, n, c = x.shape
    grid_x = x.reshape(b, grid, grid, c)
    mixed = fourier_mix(norm(grid_x, p, f"{prefix}.ln1"), LegoFilter(p[f"{prefix}.lego"]))
    x = x + mixed.reshape(b, n, c)
    x = x + mlp(norm(x, p, f"{prefix}.ln2"), p, f"{prefix}.mlp")
    return ts.replace(x)


def _check_images(images: np.ndarray, cfg: ModelConfig):
    if images.ndim != 4 or images.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ModelInputError(f"expected (B, {cfg.image_size}, {cfg.image_size}, 3) images, got {images.shape}")


def encode_image(images: np.ndarray, state: ModelState, low_res=None) -> ImageEncoding:
    cfg, p = state.config, state.params
    images = np.asarray(images, dtype=np.float32)
    _check_images(images, cfg)
    if low_res is None:
        low_res = low_resolution(images)
    ts = patch_embed(images, p, "image.patch", cfg.patch_size)
    for i in range(cfg.freq_blocks):
        ts = fourier_block_forward(ts, p, f"image.fourier.{i}", cfg.grid)
    freq = ts.tokens
    a = linear(norm(freq, p, "image.ln_fre"), p, "image.proj_fre")
    y_fre = l2_normalize(a.mean(axis=1))
    spatial, history = spatial_stage_forward(ts, low_res, p, cfg)
    out = linear(norm(spatial.tokens, p, "image.ln_spa"), p, "image.proj_spa")
    y_spa = l2_normalize(out[:, spatial.cls_index, :])
    c = out[:, spatial.mergeable_indices(), :]
    return ImageEncoding(freq, spatial, y_fre, y_spa, a, c, history)


@dataclass
class TextEncoding:
    b: Tensor  # per-position projected embeddings (B, L, d)
    z: Tensor  # (B, d) unit norm
    lengths: np.ndarray  # non-padded token count per caption


def caption_lengths(token_ids: np.ndarray) -> np.ndarray:
    return (np.asarray(token_ids) != PAD_ID).sum(axis=1)


def encode_text(token_ids: np.ndarray, state: ModelState) -> TextEncoding:
    cfg, p = state.config.text, state.params
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] > cfg.context_length:
        raise ModelInputError(f"token ids must be (B, <= {cfg.context_length}), got {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ModelInputError(f"token id outside vocabulary of {cfg.vocab_size}")
    length = ids.shape[1]
    lengths = caption_lengths(ids)
    if (lengths < 1).any():
        raise ModelInputError("empty caption")
    x = p["text.embed"][ids] + p["text.pos"][:length]
    ts = TokenSet.fresh(x)
    mask = causal_mask(length)
    for i in range(cfg.depth):
        ts, _ = mhsa_block_forward(ts, p, f"text.blocks.{i}", cfg.heads, mask)
    b = linear(norm(ts.tokens, p, "text.ln_out"), p, "text.proj")
    eos = np.array([np.flatnonzero(row == END_ID)[0] if (row == END_ID).any() else n - 1
                    for row, n in zip(ids, lengths)])
    z = l2_normalize(b[np.arange(len(ids)), eos])
    return TextEncoding(b, z, lengths)


# ---------------------------------------------------------------------- losses
@dataclass
class Forward:
    losses: dict  # name -> Tensor, or 0.0 when the term is switched off
    total: Tensor
    image: ImageEncoding
    text: TextEncoding


def forward_losses(images, token_ids, state: ModelState, coeffs, tok_spa_strategy: str = "o2o") -> Forward:
    """All four alignment losses and their weighted total for one batch."""
    img = encode_image(images, state)
    txt = encode_text(token_ids, state)
    tau = exp(state.params["log_tau"])
    active = dict(zip(LOSS_NAMES, coeffs))
    losses = {name: 0.0 for name in LOSS_NAMES}
    if active["ins_fre"]:
        losses["ins_fre"] = align.info_nce(img.y_fre, txt.z, tau)
    if active["ins_spa"]:
        losses["ins_spa"] = align.info_nce(img.y_spa, txt.z, tau)
    if active["tok_fre"]:
        losses["tok_fre"] = align.one_to_many_align(img.a, txt.b, txt.lengths)
    if active["tok_spa"]:
        if tok_spa_strategy == "o2m":
            losses["tok_spa"] = align.one_to_many_align(img.c, txt.b, txt.lengths)
        else:
            losses["tok_spa"] = align.spatial_token_loss(txt.b, img.c, txt.lengths)
    total = align.mlip_total_loss(*(losses[n] for n in LOSS_NAMES), coeffs)
    return Forward(losses, total, img, txt)


# -------------------------------------------------------------- gradient check
MAX_GRADCHECK_WIDTH = 32


def gradcheck_model(cfg, seed: int, batch: int = None, eps: float = 1e-4, tolerance: float = 1e-3,
                    max_entries: int = None, tok_spa_strategy: str = "o2o"):
    """Finite-difference check of the full MLIP loss at a random batch.

    ``cfg`` is a RunConfig. Runs in float64 with discrete selections frozen.
    """
    from .data import all_captions, pad_captions
    from .gradcheck import finite_diff_check
    from .tensor import precision

    mc = cfg.model
    widths = (mc.width, mc.guide.width, mc.text.width)
    if max(widths) > MAX_GRADCHECK_WIDTH:
        raise ModelInputError(f"gradcheck needs widths <= {MAX_GRADCHECK_WIDTH}, got {widths}")
    batch = batch or cfg.train.batch_size
    rng = generator(seed, "gradcheck")
    images = rng.random((batch, mc.image_size, mc.image_size, 3))
    templates = all_captions()
    ids = pad_captions([templates[i] for i in rng.choice(len(templates), batch, replace=False)],
                       mc.text.context_length)
    coeffs = cfg.coefficients()
    with precision(np.float64):
        state = init_model(mc, seed)
        # random gains and biases so every parameter has a generic gradient
        for name, p in state.params.items():
            if name.endswith(".gain"):
                p.data[...] = 1.0 + 0.1 * rng.standard_normal(p.shape)
            elif name.endswith(".bias"):
                p.data[...] = 0.1 * rng.standard_normal(p.shape)

        def loss():
            return forward_losses(images, ids, state, coeffs, tok_spa_strategy).total

        return finite_diff_check(loss, state.params, eps=eps, tolerance=tolerance,
                                 max_entries=max_entries, seed=seed)
