"""Retrieval recall and caption-template shape classification."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DatasetError, all_captions, decode_caption, pad_captions, stack
from .model import ModelState, encode_image, encode_text
from .tensor import no_grad

KS = (1, 5, 10)


def embed_images(images: np.ndarray, state: ModelState, batch: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(images), batch):
            out.append(encode_image(images[i:i + batch], state).y_spa.data.astype(np.float64))
    return np.concatenate(out)


def embed_texts(ids: np.ndarray, state: ModelState, batch: int = 128) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(ids), batch):
            out.append(encode_text(ids[i:i + batch], state).z.data.astype(np.float64))
    return np.concatenate(out)


def recall_at_k(sim: np.ndarray, relevant: np.ndarray, ks=KS) -> dict:
    """Fraction of query rows whose best-``k`` columns contain a relevant one.

    Columns are ranked by similarity, ties going to the lower index.
    """
    order = np.argsort(-sim, axis=1, kind="stable")
    hits = np.take_along_axis(relevant, order, axis=1)
    first = np.where(hits.any(axis=1), hits.argmax(axis=1), sim.shape[1])
    return {k: float(np.mean(first < k)) for k in ks}


@dataclass
class EvalReport:
    image_to_text: dict
    text_to_image: dict
    shape_accuracy: float
    n: int

    def lines(self) -> list:
        out = [f"pairs={self.n}"]
        for label, rec in (("i2t", self.image_to_text), ("t2i", self.text_to_image)):
            out.append(" ".join(f"{label}_R@{k}={rec[k]:.4f}" for k in KS))
        out.append(f"shape_accuracy={self.shape_accuracy:.4f}")
        return out


def evaluate(state: ModelState, pairs) -> EvalReport:
    """Retrieval uses ``y_spa . z``; a pair is relevant when captions coincide."""
    if not pairs:
        raise DatasetError("empty dataset")
    ctx = state.config.text.context_length
    vocab = state.config.text.vocab_size
    if max(max(p.caption) for p in pairs) >= vocab:
        raise DatasetError(f"dataset uses token ids beyond the model vocabulary of {vocab}")
    images, ids = stack(pairs, ctx)
    y = embed_images(images, state)
    z = embed_texts(ids, state)
    captions = [tuple(p.caption) for p in pairs]
    relevant = np.array([[a == b for b in captions] for a in captions])
    sim = y @ z.T
    i2t = recall_at_k(sim, relevant)
    t2i = recall_at_k(sim.T, relevant.T)

    templates = all_captions()
    zt = embed_texts(pad_captions(templates, ctx), state)
    best = np.argmax(y @ zt.T, axis=1)
    predicted = [decode_caption(templates[j])[1] for j in best]
    truth = [decode_caption(c)[1] for c in captions]
    acc = float(np.mean([a == b for a, b in zip(predicted, truth)]))
    return EvalReport(i2t, t2i, acc, len(pairs))
