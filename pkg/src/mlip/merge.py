"""Token merging with a controllable compression rate.

Tokens are ranked by how much the fine class token attends to them; the 2C
least-attended ones are split alternately into sets A and B, every A token
is matched to its most cosine-similar B token, and matched groups collapse
into their size-weighted mean. Selection and matching are computed on
detached values; gradients flow through the weighted averaging only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import choices
from .tensor import Tensor
from .tokens import AttentionRecord, TokenSet


class MergeConfigError(ValueError):
    pass


def merge_count(n_mergeable: int, keep_ratio: float) -> int:
    """Number of tokens removed: ``round((1 - keep_ratio) * n)``, halves rounded up."""
    return int(math.floor((1.0 - keep_ratio) * n_mergeable + 0.5))


def rank_by_class_attention(attn: Union[AttentionRecord, np.ndarray], keep_ratio: float,
                            n_mergeable: int, cls_index=None) -> np.ndarray:
    """Indices of the ``2C`` lowest-ranked mergeable tokens, ``(B, 2C)``.

    Tokens are sorted by head-mean class attention, largest first, ties going
    to the lower index; the tail of that order is returned in order.
    """
    if not 0.5 <= keep_ratio < 1.0:
        raise MergeConfigError(f"keep ratio must lie in [0.5, 1), got {keep_ratio}")
    scores = attn.mean if isinstance(attn, AttentionRecord) else np.asarray(attn, dtype=np.float64)
    squeeze = scores.ndim == 1
    scores = np.atleast_2d(scores)
    candidates = np.arange(scores.shape[1])
    if cls_index is not None:
        candidates = candidates[candidates != cls_index]
    if len(candidates) != n_mergeable:
        raise MergeConfigError(f"{len(candidates)} candidate tokens, expected {n_mergeable}")
    c = merge_count(n_mergeable, keep_ratio)
    if 2 * c > n_mergeable:
        raise MergeConfigError(f"cannot take the last 2C={2 * c} of {n_mergeable} tokens")

    def compute():
        sel = np.empty((scores.shape[0], 2 * c), dtype=np.intp)
        for row in range(scores.shape[0]):
            s = scores[row, candidates]
            order = np.lexsort((candidates, -s))
            sel[row] = candidates[order[len(candidates) - 2 * c:]]
        return sel

    sel = choices.decide(compute)
    return sel[0] if squeeze else sel


@dataclass
class MergePlan:
    """``a``/``b`` are the odd/even entries of ``selection``; ``target[i, j]``
    is the token index in ``b[i]`` that ``a[i, j]`` merges into."""

    selection: np.ndarray
    a: np.ndarray
    b: np.ndarray
    target: np.ndarray

    @property
    def merge_count(self) -> int:
        return self.a.shape[1]


def _cosine_matrix(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    na = np.linalg.norm(xa, axis=-1, keepdims=True)
    nb = np.linalg.norm(xb, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = (xa @ np.swapaxes(xb, -1, -2)) / (na * np.swapaxes(nb, -1, -2))
    zero = (na == 0) | (np.swapaxes(nb, -1, -2) == 0)
    return np.where(zero, -1.0, sim)


def bipartite_soft_match(tokens: Union[TokenSet, Tensor, np.ndarray], selection: np.ndarray) -> MergePlan:
    """Match each A token (1st, 3rd, ... selected) to its most similar B token."""
    if isinstance(tokens, TokenSet):
        tokens = tokens.tokens
    x = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens, dtype=np.float64)
    selection = np.atleast_2d(np.asarray(selection, dtype=np.intp))
    if selection.shape[1] % 2:
        raise MergeConfigError(f"selection size {selection.shape[1]} is odd")
    a, b = selection[:, 0::2], selection[:, 1::2]

    def compute():
        if a.shape[1] == 0:
            return np.zeros_like(a)
        rows = np.arange(x.shape[0])[:, None]
        sim = _cosine_matrix(x[rows, a], x[rows, b])
        return np.take_along_axis(b, np.argmax(sim, axis=-1), axis=1)

    return MergePlan(selection, a, b, choices.decide(compute))


def merge_tokens(ts: TokenSet, plan: MergePlan) -> TokenSet:
    """Collapse each A token into its B target by size-weighted averaging."""
    bsz, n = ts.tokens.shape[:2]
    if plan.merge_count == 0:
        return ts
    for name in ("a", "b", "target"):
        arr = getattr(plan, name)
        if arr.min() < 0 or arr.max() >= n:
            raise MergeConfigError(f"merge plan {name} indexes outside {n} tokens")
    n_out = n - plan.merge_count
    P = np.zeros((bsz, n_out, n), dtype=np.float64)
    cls_out = None
    for row in range(bsz):
        keep = np.ones(n, dtype=bool)
        keep[plan.a[row]] = False
        survivors = np.flatnonzero(keep)
        if len(survivors) != n_out:
            raise MergeConfigError("merge plan removes a token more than once")
        pos = np.full(n, -1)
        pos[survivors] = np.arange(n_out)
        if (pos[plan.target[row]] < 0).any():
            raise MergeConfigError("merge target is itself being merged away")
        P[row, pos[survivors], survivors] = 1.0
        P[row, pos[plan.target[row]], plan.a[row]] = 1.0
        if ts.cls_index is not None:
            cls_out = int(pos[ts.cls_index])
    sizes = ts.sizes.astype(np.float64)
    new_sizes = np.einsum("bij,bj->bi", P, sizes)
    weighted = ts.tokens * Tensor(sizes[..., None])
    merged = (Tensor(P) @ weighted) / Tensor(new_sizes[..., None])
    return TokenSet(merged, new_sizes, cls_out)


def merge_step(ts: TokenSet, record: AttentionRecord, keep_ratio: float) -> TokenSet:
    """Rank, match and merge in one call."""
    if keep_ratio >= 1.0:
        return ts
    sel = rank_by_class_attention(record, keep_ratio, ts.mergeable_count, ts.cls_index)
    sel = np.atleast_2d(sel)
    return merge_tokens(ts, bipartite_soft_match(ts, sel))


@dataclass
class MergeStats:
    """Conservation check of one merge step (all values from detached data)."""

    removed: int
    expected_removed: int
    size_drift: float
    centroid_drift: float


def merge_diagnostics(before: TokenSet, after: TokenSet, keep_ratio: float) -> MergeStats:
    def weighted(ts):
        idx = ts.mergeable_indices()
        s = ts.sizes[:, idx]
        x = np.asarray(ts.tokens.data, dtype=np.float64)[:, idx]
        return s.sum(axis=1), (s[..., None] * x).sum(axis=1)

    s0, c0 = weighted(before)
    s1, c1 = weighted(after)
    expected = 0 if keep_ratio >= 1.0 else merge_count(before.mergeable_count, keep_ratio)
    return MergeStats(
        removed=before.mergeable_count - after.mergeable_count,
        expected_removed=expected,
        size_drift=float(np.abs(s1 - s0).max()),
        centroid_drift=float(np.abs(c1 - c0).max()),
    )
