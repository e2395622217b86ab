"""Token containers shared by the spatial and merging code."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import Tensor


@dataclass
class TokenSet:
    """A batch of token sequences.

    ``tokens`` is ``(B, n, C)``; ``sizes`` is ``(B, n)`` and counts how many
    original tokens each entry stands for. ``cls_index`` is the position of the
    fine class token, which never takes part in merging.
    """

    tokens: Tensor
    sizes: np.ndarray
    cls_index: Optional[int] = None

    @classmethod
    def fresh(cls, tokens: Tensor, cls_index: Optional[int] = None) -> "TokenSet":
        b, n = tokens.shape[:2]
        return cls(tokens, np.ones((b, n), dtype=np.float64), cls_index)

    @property
    def count(self) -> int:
        return self.tokens.shape[1]

    def mergeable_indices(self) -> np.ndarray:
        idx = np.arange(self.count)
        return idx if self.cls_index is None else idx[idx != self.cls_index]

    @property
    def mergeable_count(self) -> int:
        return len(self.mergeable_indices())

    def mergeable_sizes(self) -> np.ndarray:
        return self.sizes[:, self.mergeable_indices()]

    def replace(self, tokens: Tensor) -> "TokenSet":
        return TokenSet(tokens, self.sizes, self.cls_index)


@dataclass
class AttentionRecord:
    """Attention from the fine class token: ``heads`` is ``(B, H, n)``."""

    heads: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.heads.mean(axis=1)
