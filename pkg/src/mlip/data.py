"""Procedural image-caption pairs.

Each image holds one colored shape in one quadrant over a plain or striped
background; its caption is ``<color> <shape> <position> <background>``
followed by the end marker. Background brightness and stripe phase vary, so
pairs with the same caption still have distinct pixels.

On disk a dataset directory holds ``manifest.txt`` (one tab-separated line per
pair: id, comma-separated caption ids, image file), ``vocab.txt`` and one
``.npy`` file per image (H x W x 3, little-endian float32).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import generator

COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.9, 0.1),
}
SHAPES = ("circle", "square", "triangle")
POSITIONS = ("top-left", "top-right", "bottom-left", "bottom-right")
BACKGROUNDS = ("plain", "striped")

PAD, END = "<pad>", "<end>"
VOCABULARY = (PAD, END) + tuple(COLORS) + SHAPES + POSITIONS + BACKGROUNDS
TOKEN_ID = {tok: i for i, tok in enumerate(VOCABULARY)}
PAD_ID, END_ID = TOKEN_ID[PAD], TOKEN_ID[END]
CAPTION_LENGTH = 5

IMAGE_SIZE = 32


class DatasetError(ValueError):
    pass


@dataclass
class SyntheticPair:
    pair_id: int
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    caption: tuple  # token ids, end marker included, no padding

    @property
    def attributes(self) -> tuple:
        return decode_caption(self.caption)


def encode_caption(color: str, shape: str, position: str, background: str) -> tuple:
    return tuple(TOKEN_ID[w] for w in (color, shape, position, background)) + (END_ID,)


def decode_caption(ids) -> tuple:
    words = [VOCABULARY[i] for i in ids if i not in (PAD_ID, END_ID)]
    if len(words) != 4:
        raise DatasetError(f"caption {list(ids)} does not follow the template")
    color, shape, position, background = words
    if color not in COLORS or shape not in SHAPES or position not in POSITIONS \
            or background not in BACKGROUNDS:
        raise DatasetError(f"caption {words} does not follow the template")
    return color, shape, position, background


def all_captions() -> list:
    return [encode_caption(c, s, p, b)
            for c in COLORS for s in SHAPES for p in POSITIONS for b in BACKGROUNDS]


def pad_captions(captions, context_length: int) -> np.ndarray:
    out = np.full((len(captions), context_length), PAD_ID, dtype=np.int64)
    for i, cap in enumerate(captions):
        if len(cap) > context_length:
            raise DatasetError(f"caption of length {len(cap)} exceeds context {context_length}")
        out[i, :len(cap)] = cap
    return out


def render(color: str, shape: str, position: str, background: str,
           rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    if background == "plain":
        img = np.full((size, size, 3), 0.12 + 0.06 * rng.random())
    else:
        period = 4.0
        phase = rng.random() * period
        stripes = ((xx + yy + phase) % period) < period / 2
        img = np.where(stripes[..., None], 0.55, 0.2) * np.ones(3)
    quarter = size / 4
    cy = quarter * (1 if position.startswith("top") else 3)
    cx = quarter * (1 if position.endswith("left") else 3)
    r = quarter * 0.9
    if shape == "circle":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif shape == "square":
        mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
    else:
        top, bottom = cy - r, cy + r
        frac = (yy - top) / (bottom - top)
        mask = (frac >= 0) & (frac <= 1) & (np.abs(xx - cx) <= frac * r)
    img = np.where(mask[..., None], np.asarray(COLORS[color]), img)
    return img.astype(np.float32)


def generate_pairs(n: int, seed: int, size: int = IMAGE_SIZE) -> list:
    """``n`` pairs, balanced over shape x color x position up to rounding."""
    if n < 1:
        raise DatasetError("need at least one pair")
    rng = generator(seed, "dataset")
    colors, cells = list(COLORS), len(COLORS) * len(SHAPES) * len(POSITIONS)
    pairs = []
    for i in range(n):
        k = i % cells
        shape = SHAPES[k % len(SHAPES)]
        color = colors[(k // len(SHAPES)) % len(colors)]
        position = POSITIONS[k // (len(SHAPES) * len(colors))]
        background = BACKGROUNDS[(i // cells + k) % len(BACKGROUNDS)]
        image = render(color, shape, position, background, rng, size)
        pairs.append((image, encode_caption(color, shape, position, background)))
    order = rng.permutation(n)
    return [SyntheticPair(pid, pairs[j][0], pairs[j][1]) for pid, j in enumerate(order)]


def low_resolution(images: np.ndarray) -> np.ndarray:
    """2x2 average pooling of ``(B, H, W, 3)`` images."""
    b, h, w, c = images.shape
    return images.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4)).astype(images.dtype)


# ------------------------------------------------------------------------ disk IO
def write_image(path, image: np.ndarray):
    np.save(path, np.ascontiguousarray(image, dtype="<f4"), allow_pickle=False)


def read_image(path) -> np.ndarray:
    try:
        image = np.load(path, allow_pickle=False)
    except (ValueError, EOFError) as exc:
        raise DatasetError(f"{path}: unreadable image ({exc})") from None
    if image.ndim != 3 or image.shape[2] != 3:
        raise DatasetError(f"{path}: expected an HxWx3 array, got {image.shape}")
    return image.astype(np.float32)


def save_dataset(pairs, out_dir):
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "vocab.txt").write_text("\n".join(VOCABULARY) + "\n", encoding="utf-8")
        lines = []
        for pair in pairs:
            name = f"{pair.pair_id:06d}.npy"
            write_image(out / name, pair.image)
            lines.append(f"{pair.pair_id}\t{','.join(map(str, pair.caption))}\t{name}")
        (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {out}: {exc}") from exc


def gen_synthetic_dataset(n: int, seed: int, out_dir) -> list:
    pairs = generate_pairs(n, seed)
    save_dataset(pairs, out_dir)
    return pairs


def load_dataset(data_dir) -> list:
    root = Path(data_dir)
    vocab_file = root / "vocab.txt"
    if vocab_file.exists():
        vocab = tuple(vocab_file.read_text(encoding="utf-8").split())
        if vocab != VOCABULARY:
            raise DatasetError(f"{vocab_file}: vocabulary does not match the caption template")
    pairs = []
    for lineno, line in enumerate((root / "manifest.txt").read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            pid, ids, name = line.split("\t")
            caption = tuple(int(t) for t in ids.split(","))
        except ValueError:
            raise DatasetError(f"manifest line {lineno} is malformed") from None
        pairs.append(SyntheticPair(int(pid), read_image(root / name), caption))
    return pairs


def stack(pairs, context_length: int):
    images = np.stack([p.image for p in pairs]).astype(np.float32)
    return images, pad_captions([p.caption for p in pairs], context_length)
