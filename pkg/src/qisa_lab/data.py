"""Corpus loading, character-level tokenization, splitting, batching."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import CorpusError

log = logging.getLogger(__name__)

CORPUS_URL = "https://raw.githubusercontent.com/karpathy/char-rnn/master/data/tinyshakespeare/input.txt"
BUNDLED_CORPUS = Path(__file__).parent / "corpora" / "shakespeare_ci.txt"


def load_corpus(path) -> str:
    path = Path(path)
    if not path.exists():
        raise CorpusError(
            f"corpus file {path} does not exist; download a plain-text corpus "
            f"(for example {CORPUS_URL}) or pass the bundled sample"
        )
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorpusError(f"corpus file {path} is not valid UTF-8: {exc}") from exc
    if not text:
        raise CorpusError(f"corpus file {path} is empty")
    log.info("loaded corpus %s (%d bytes, %d chars)", path, len(raw), len(text))
    return text


@dataclass(frozen=True)
class Vocab:
    """Bijection between characters and dense ids, sorted by codepoint."""

    chars: tuple[str, ...]

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        if not text:
            raise CorpusError("cannot build a vocabulary from empty text")
        return cls(tuple(sorted(set(text))))

    @property
    def size(self) -> int:
        return len(self.chars)

    @property
    def index(self) -> dict[str, int]:
        return {ch: i for i, ch in enumerate(self.chars)}

    def encode(self, text: str) -> np.ndarray:
        index = self.index
        try:
            return np.fromiter((index[ch] for ch in text), dtype=np.int64, count=len(text))
        except KeyError as exc:
            raise CorpusError(f"character {exc.args[0]!r} is not in the vocabulary") from exc

    def decode(self, ids) -> str:
        return "".join(self.chars[int(i)] for i in ids)


def build_vocab(text: str) -> Vocab:
    return Vocab.from_text(text)


@dataclass(frozen=True)
class SplitDataset:
    """Contiguous split: the test ids are the final fraction of the corpus."""

    train_ids: np.ndarray
    test_ids: np.ndarray
    split_fraction: float = 0.2


def split_dataset(ids: np.ndarray, split_fraction: float = 0.2) -> SplitDataset:
    n_test = int(len(ids) * split_fraction)
    return SplitDataset(train_ids=ids[: len(ids) - n_test], test_ids=ids[len(ids) - n_test:],
                        split_fraction=split_fraction)


def steps_per_epoch(n_ids: int, l: int, batch: int) -> int:
    if n_ids <= l:
        raise CorpusError(f"corpus of {n_ids} ids is too small for context size {l}")
    return -(-(n_ids - l) // batch)  # ceil


def batch_iter(ids: np.ndarray, l: int, batch: int, seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of randomly offset (inputs, next-token targets) windows.

    Yields ceil((len(ids) - l) / batch) batches; offsets are drawn from a
    generator seeded with ``seed`` so the sequence is reproducible.
    """
    n_steps = steps_per_epoch(len(ids), l, batch)
    rng = np.random.default_rng(seed)
    span = np.arange(l)
    for _ in range(n_steps):
        offsets = rng.integers(0, len(ids) - l, size=batch)
        idx = offsets[:, None] + span
        yield ids[idx], ids[idx + 1]


def window_at(ids: np.ndarray, offset: int, l: int) -> tuple[np.ndarray, np.ndarray]:
    """The (inputs, targets) pair of one window, for tests and evaluation."""
    return ids[offset : offset + l], ids[offset + 1 : offset + l + 1]
