"""Instance- and token-level image-text alignment losses.

Discrete decisions (cosine argmax, KM matching) are computed on detached
similarities; gradients reach the similarities that were selected.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from . import choices
from .tensor import Tensor, concat, l2_normalize, log_softmax

Scalar = Union[float, Tensor]


class AlignmentError(ValueError):
    pass


# -------------------------------------------------------------- instance level
def info_nce(y: Tensor, z: Tensor, tau: Scalar) -> Tensor:
    """Symmetric InfoNCE over a batch of matched unit embeddings.

    Half the cross-entropy of image-to-text rows plus half of text-to-image
    columns, with the diagonal as targets.
    """
    n = y.shape[0]
    if n < 2 or z.shape[0] != n:
        raise AlignmentError(f"info_nce needs two equal batches of at least 2, got {y.shape}, {z.shape}")
    if isinstance(tau, Tensor):
        if float(tau.data) <= 0:
            raise AlignmentError("temperature must be positive")
    elif tau <= 0:
        raise AlignmentError("temperature must be positive")
    logits = (y @ z.swap_last()) / tau
    diag = (np.arange(n), np.arange(n))
    rows = log_softmax(logits, axis=1)[diag].mean()
    cols = log_softmax(logits, axis=0)[diag].mean()
    return (rows + cols) * -0.5


# ----------------------------------------------------------- one-to-many level
def _length_mask(lengths, size: int) -> np.ndarray:
    return np.arange(size)[None, :] < np.asarray(lengths)[:, None]


def one_to_many_align(image_tokens: Tensor, text_tokens: Tensor, text_lengths=None,
                      image_lengths=None) -> Tensor:
    """Late-interaction loss: every token keeps its best cross-modal cosine.

    ``image_tokens`` is ``(N, l1, d)`` and ``text_tokens`` ``(N, L, d)``; only the
    first ``text_lengths[j]`` text tokens (and ``image_lengths[j]`` image
    tokens) of sample ``j`` take part.
    """
    n, l1, _ = image_tokens.shape
    size = text_tokens.shape[1]
    text_lengths = np.full(n, size) if text_lengths is None else np.asarray(text_lengths)
    image_lengths = np.full(n, l1) if image_lengths is None else np.asarray(image_lengths)
    if (text_lengths < 1).any() or (image_lengths < 1).any():
        raise AlignmentError("token-level alignment needs at least one token per side")
    sim = l2_normalize(image_tokens) @ l2_normalize(text_tokens).swap_last()  # (N, l1, L)
    img_mask = _length_mask(image_lengths, l1)
    txt_mask = _length_mask(text_lengths, size)
    valid = img_mask[:, :, None] & txt_mask[:, None, :]

    def compute():
        s = np.where(valid, sim.data.astype(np.float64), -np.inf)
        return np.argmax(s, axis=2), np.argmax(s, axis=1)

    best_text, best_image = choices.decide(compute)
    rows = np.arange(n)[:, None]
    it = sim[rows, np.arange(l1)[None, :], best_text]  # (N, l1)
    ti = sim[rows, best_image, np.arange(size)[None, :]]  # (N, L)
    it_score = (it * Tensor(img_mask / image_lengths[:, None])).sum(axis=1)
    ti_score = (ti * Tensor(txt_mask / text_lengths[:, None])).sum(axis=1)
    return (it_score.mean() + ti_score.mean()) * -0.5


# ------------------------------------------------------------ one-to-one level
@dataclass
class WeightMatrix:
    """Square cosine matrix padded with zeros; rows are text, columns spatial."""

    values: Tensor
    valid: np.ndarray
    text_length: int
    spatial_length: int

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass
class Assignment:
    """``match[t]`` is the row (text token) assigned to column ``t``."""

    match: np.ndarray
    total: float


def build_weight_matrix(b: Tensor, c: Tensor) -> WeightMatrix:
    l2, l3 = b.shape[0], c.shape[0]
    if l2 < 1 or l3 < 1:
        raise AlignmentError("weight matrix needs at least one token per side")
    cos = l2_normalize(b) @ l2_normalize(c).swap_last()
    size = max(l2, l3)
    if l3 < size:
        cos = concat([cos, Tensor(np.zeros((l2, size - l3)))], axis=1)
    if l2 < size:
        cos = concat([cos, Tensor(np.zeros((size - l2, size)))], axis=0)
    valid = np.zeros((size, size), dtype=bool)
    valid[:l2, :l3] = True
    return WeightMatrix(cos, valid, l2, l3)


def km_match(w) -> Assignment:
    """Maximum-weight perfect matching on a square matrix (Kuhn-Munkres).

    Row labels start at the row maxima and column labels at zero. Trees grow
    from each row in turn through tight edges; when none is left, labels move
    by the smallest slack. Near-equal slacks (within ``1e-9`` of the largest
    weight) resolve to the lowest column, so the outcome is invariant to
    positive rescaling of ``w``.
    """
    if isinstance(w, WeightMatrix):
        w = w.values.data
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] != w.shape[1]:
        raise AlignmentError(f"KM needs a square matrix, got shape {w.shape}")
    n = w.shape[0]
    tol = 1e-9 * float(np.abs(w).max(initial=0.0))
    row_label = w.max(axis=1) if n else np.zeros(0)
    col_label = np.zeros(n)
    col_match = np.full(n, -1)
    row_match = np.full(n, -1)
    for root in range(n):
        in_rows = np.zeros(n, dtype=bool)
        in_cols = np.zeros(n, dtype=bool)
        in_rows[root] = True
        slack = row_label[root] + col_label - w[root]
        slack_row = np.full(n, root)
        reached_from = np.full(n, -1)
        while True:
            free = np.flatnonzero(~in_cols)
            low = slack[free].min()
            t = int(free[np.argmax(slack[free] <= low + tol)])
            delta = slack[t]
            if delta > 0:
                row_label[in_rows] -= delta
                col_label[in_cols] += delta
                slack[~in_cols] -= delta
            in_cols[t] = True
            reached_from[t] = slack_row[t]
            if col_match[t] < 0:
                while True:
                    s = reached_from[t]
                    prev = row_match[s]
                    col_match[t], row_match[s] = s, t
                    if s == root:
                        break
                    t = prev
                break
            s = col_match[t]
            in_rows[s] = True
            fresh = row_label[s] + col_label - w[s]
            better = ~in_cols & (fresh < slack)
            slack[better] = fresh[better]
            slack_row[better] = s
    total = float(w[col_match, np.arange(n)].sum()) if n else 0.0
    return Assignment(col_match, total)


def brute_force_assignment(w) -> Assignment:
    """Exhaustive search over all permutations (oracle for small matrices)."""
    w = np.asarray(w, dtype=np.float64)
    n = w.shape[0]
    best, best_perm = -math.inf, None
    cols = np.arange(n)
    for perm in itertools.permutations(range(n)):
        total = float(w[list(perm), cols].sum())
        if total > best:
            best, best_perm = total, perm
    return Assignment(np.asarray(best_perm if best_perm is not None else (), dtype=int), best if n else 0.0)


def one_to_one_loss(weights: Sequence[WeightMatrix], matches: Sequence[Assignment]) -> Tensor:
    """``-(1/N) sum_j (1/min(l2, l3)) sum_t w_j(M[t], t)``; padding adds nothing."""
    if len(weights) != len(matches) or not weights:
        raise AlignmentError("one weight matrix and one assignment per sample are required")
    total = None
    for wm, m in zip(weights, matches):
        if m.match.shape != (wm.size,):
            raise AlignmentError(f"assignment of size {m.match.shape} for a {wm.size}x{wm.size} matrix")
        picked = wm.values[m.match, np.arange(wm.size)]
        term = picked.sum() * (1.0 / min(wm.text_length, wm.spatial_length))
        total = term if total is None else total + term
    return total * (-1.0 / len(weights))


def spatial_token_loss(text_tokens: Tensor, spatial_tokens: Tensor, text_lengths) -> Tensor:
    """Batched one-to-one loss: KM per sample, one gather for the whole batch."""
    n, size, _ = text_tokens.shape
    l3 = spatial_tokens.shape[1]
    cos = l2_normalize(text_tokens) @ l2_normalize(spatial_tokens).swap_last()  # (N, L, l3)
    lengths = np.asarray(text_lengths)

    def compute():
        picks = []
        for j in range(n):
            l2 = int(lengths[j])
            dim = max(l2, l3)
            w = np.zeros((dim, dim))
            w[:l2, :l3] = cos.data[j, :l2, :]
            m = km_match(w).match
            cols = np.arange(dim)
            keep = (m < l2) & (cols < l3)
            picks.append((m[keep], cols[keep]))
        return picks

    picks = choices.decide(compute)
    sample = np.concatenate([np.full(len(s), j) for j, (s, _) in enumerate(picks)])
    rows = np.concatenate([s for s, _ in picks])
    cols = np.concatenate([t for _, t in picks])
    scale = np.array([1.0 / min(int(lengths[j]), l3) for j in sample])
    return (cos[sample, rows, cols] * Tensor(scale)).sum() * (-1.0 / n)


# ------------------------------------------------------------------- the mix
def mlip_total_loss(l_ins_fre, l_ins_spa, l_tok_fre, l_tok_spa, coeffs) -> Scalar:
    """Weighted sum of the four losses; zero-coefficient terms are skipped."""
    terms = [(c, l) for c, l in zip(coeffs, (l_ins_fre, l_ins_spa, l_tok_fre, l_tok_spa)) if c != 0]
    if not terms:
        raise AlignmentError("at least one mixing coefficient must be positive")
    if not any(isinstance(l, Tensor) for _, l in terms):
        return math.fsum(c * float(l) for c, l in terms)
    total = None
    for c, l in terms:
        term = l * c
        total = term if total is None else total + term
    return total
