"""Vocabulary and procedural multimodal tasks.

Three generators, each yielding answerable samples with ground truth:

* ``patch-color``: an image made of a grid of solid colour cells; the
  prompt names a cell (row, col) and the answer is that cell's colour.
* ``frame-order``: a short video where exactly one frame carries a white
  marker square; the answer is the index of that frame.
* ``assoc-recall``: text-only stream of key/value pairs drawn from a fixed
  per-sequence table; every re-occurrence of a key must be followed by the
  value it was first paired with.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .numerics import Rng
from .vision import Image

COLORS = {
    "red": (220, 30, 30),
    "green": (30, 200, 40),
    "blue": (30, 50, 220),
    "yellow": (230, 220, 30),
    "cyan": (30, 210, 210),
    "magenta": (210, 40, 200),
    "white": (245, 245, 245),
    "black": (10, 10, 10),
}


class Vocab:
    """64 named tokens: specials, colours, numerals 0-15, keys k0-k15, values v0-v15."""

    SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>", "<q-color>", "<q-frame>", "<q-recall>", "<unk>")

    def __init__(self):
        names = list(self.SPECIALS) + list(COLORS)
        names += [str(i) for i in range(16)]
        names += [f"k{i}" for i in range(16)]
        names += [f"v{i}" for i in range(16)]
        self.names = names
        self.ids = {n: i for i, n in enumerate(names)}

    def __len__(self) -> int:
        return len(self.names)

    def __getitem__(self, name: str) -> int:
        return self.ids[name]

    def encode(self, words: list[str]) -> np.ndarray:
        return np.array([self.ids[w] for w in words], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.names[int(i)] for i in ids]


VOCAB = Vocab()


@dataclass
class SyntheticSample:
    visual: Image | list[Image] | None
    text: np.ndarray  # prompt followed by target
    answer_mask: np.ndarray  # 1 where the token is a supervised target
    answer: str | None = None
    table: dict = field(default_factory=dict)

    @property
    def prompt(self) -> np.ndarray:
        first = int(np.argmax(self.answer_mask)) if self.answer_mask.any() else len(self.text)
        return self.text[:first]

    @property
    def target(self) -> np.ndarray:
        return self.text[self.answer_mask.astype(bool)]

    @property
    def kind(self) -> str:
        if self.visual is None:
            return "text"
        return "video" if isinstance(self.visual, list) else "image"


def _qa(prompt: list[str], target: list[str]) -> tuple[np.ndarray, np.ndarray]:
    text = VOCAB.encode(prompt + target)
    mask = np.array([0] * len(prompt) + [1] * len(target), dtype=np.int64)
    return text, mask


def patch_color_sample(rng: Rng, cells=(2, 2), cell_px: int = 28, n_colors: int = 4,
                       colors: np.ndarray | None = None, query: tuple[int, int] | None = None) -> SyntheticSample:
    cols, rows = cells
    palette = list(COLORS)[:n_colors]
    if colors is None:
        colors = rng.integers(0, n_colors, (rows, cols))
    px = np.zeros((rows * cell_px, cols * cell_px, 3), dtype=np.uint8)
    for r in range(rows):
        for c in range(cols):
            px[r * cell_px : (r + 1) * cell_px, c * cell_px : (c + 1) * cell_px] = COLORS[palette[colors[r, c]]]
    if query is None:
        query = (int(rng.integers(0, rows)), int(rng.integers(0, cols)))
    r, c = query
    answer = palette[colors[r, c]]
    text, mask = _qa(["<bos>", "<q-color>", str(r), str(c), "<sep>"], [answer, "<eos>"])
    return SyntheticSample(Image(px), text, mask, answer)


def frame_order_sample(rng: Rng, n_frames: int = 8, frame_px: int = 28, marker: int | None = None) -> SyntheticSample:
    if marker is None:
        marker = int(rng.integers(0, n_frames))
    bg = np.array(COLORS["blue"], dtype=np.uint8)
    frames = []
    m = frame_px // 2
    for i in range(n_frames):
        px = np.broadcast_to(bg, (frame_px, frame_px, 3)).copy()
        if i == marker:
            px[m // 2 : m // 2 + m, m // 2 : m // 2 + m] = COLORS["white"]
        frames.append(Image(px))
    text, mask = _qa(["<bos>", "<q-frame>", "<sep>"], [str(marker), "<eos>"])
    return SyntheticSample(frames, text, mask, str(marker))


def assoc_recall_sample(rng: Rng, seq_len: int = 64, n_pairs: int = 8, n_symbols: int = 16) -> SyntheticSample:
    """Stream of ``seq_len // 2`` key/value pairs over ``n_pairs`` distinct keys."""
    keys = rng.choice(n_symbols, size=n_pairs, replace=False)
    values = rng.integers(0, n_symbols, n_pairs)
    table = {f"k{k}": f"v{v}" for k, v in zip(keys, values)}
    order = rng.integers(0, n_pairs, seq_len // 2)
    words, mask, seen = [], [], set()
    for j in order:
        k = f"k{keys[j]}"
        words += [k, table[k]]
        mask += [0, 1 if k in seen else 0]
        seen.add(k)
    return SyntheticSample(None, VOCAB.encode(words), np.array(mask, dtype=np.int64), table=table)


TASKS = ("patch-color", "frame-order", "assoc-recall")


def gen_synthetic(task: str, rng: Rng, **kw) -> Iterator[SyntheticSample]:
    makers = {"patch-color": patch_color_sample, "frame-order": frame_order_sample, "assoc-recall": assoc_recall_sample}
    if task not in makers:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    make = makers[task]
    while True:
        yield make(rng, **kw)
