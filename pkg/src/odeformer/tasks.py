"""Desk-scale data: synthetic copy/reverse tasks and a bundled character corpus."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .kvconfig import KVConfig
from .models import SeqBatch

PAD, BOS, EOS = 0, 1, 2
FIRST_SYMBOL = 3
KINDS = ("Copy", "Reverse", "CharLM")


def default_corpus_path() -> Path:
    return Path(str(resources.files("odeformer") / "data" / "corpus.txt"))


@dataclass
class TaskSpec(KVConfig):
    kind: str = "Copy"
    vocab_size: int = 32
    min_len: int = 5
    max_len: int = 20
    corpus_path: Optional[str] = None
    train_size: int = 0  # 0: unbounded stream (synthetic) or the whole train split (CharLM)
    val_size: int = 256
    test_size: int = 256
    seed: int = 1

    def __post_init__(self):
        for k in KINDS:
            if k.lower() == str(self.kind).lower():
                self.kind = k
                break
        else:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.kind != "CharLM" and self.vocab_size <= FIRST_SYMBOL:
            raise ValueError("vocab_size must leave room for symbols after pad/bos/eos")


# ---------------------------------------------------------------------------
# synthetic sequence tasks


def _sample(rng: np.random.Generator, spec: TaskSpec) -> tuple[int, ...]:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    return tuple(int(t) for t in rng.integers(FIRST_SYMBOL, spec.vocab_size, size=n))


def _target(spec: TaskSpec, seq) -> list[int]:
    body = list(seq) if spec.kind == "Copy" else list(seq)[::-1]
    return [BOS] + body + [EOS]


def make_batch(spec: TaskSpec, seqs) -> SeqBatch:
    """Pad a list of symbol sequences into a SeqBatch with BOS/EOS-wrapped targets."""
    ls = max(len(s) for s in seqs)
    src = np.full((len(seqs), ls), PAD, dtype=np.int64)
    tgt = np.full((len(seqs), ls + 2), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        src[i, : len(s)] = s
        t = _target(spec, s)
        tgt[i, : len(t)] = t
    return SeqBatch(src, tgt)


class SequenceTask:
    """Copy or Reverse data with held-out splits.

    Validation and test sets come from their own seeded streams; the training
    stream rejects any sequence present in either, so the splits are disjoint.
    """

    def __init__(self, spec: TaskSpec):
        if spec.kind == "CharLM":
            raise ValueError("SequenceTask handles Copy/Reverse only")
        self.spec = spec
        self.val = self._split(1, spec.val_size, set())
        self.test = self._split(2, spec.test_size, set(self.val))
        self._held_out = set(self.val) | set(self.test)

    def _split(self, offset: int, size: int, exclude: set) -> list[tuple[int, ...]]:
        rng = np.random.default_rng([self.spec.seed, offset])
        out, seen = [], set(exclude)
        while len(out) < size:
            s = _sample(rng, self.spec)
            if s not in seen:
                seen.add(s)
                out.append(s)
        return out

    def train_batches(self, batch_size: int, seed: Optional[int] = None) -> Iterator[SeqBatch]:
        rng = np.random.default_rng([self.spec.seed if seed is None else seed, 0])
        while True:
            seqs = []
            while len(seqs) < batch_size:
                s = _sample(rng, self.spec)
                if s not in self._held_out:
                    seqs.append(s)
            yield make_batch(self.spec, seqs)

    def batches(self, split: str, batch_size: int) -> Iterator[SeqBatch]:
        data = self.val if split == "val" else self.test
        for i in range(0, len(data), batch_size):
            yield make_batch(self.spec, data[i : i + batch_size])


# ---------------------------------------------------------------------------
# character language modelling


class CharCorpus:
    """Contiguous train/val/test split of a text file, one id per character.

    Id 0 is padding; characters get ids 1.. in sorted order.
    """

    def __init__(self, text: str, val_fraction: float = 0.05, test_fraction: float = 0.05):
        chars = sorted(set(text))
        self.itos = ["<pad>"] + chars
        self.stoi = {c: i + 1 for i, c in enumerate(chars)}
        ids = np.array([self.stoi[c] for c in text], dtype=np.int64)
        n = len(ids)
        n_val, n_test = int(n * val_fraction), int(n * test_fraction)
        self.train = ids[: n - n_val - n_test]
        self.val = ids[n - n_val - n_test : n - n_test]
        self.test = ids[n - n_test :]

    @classmethod
    def from_file(cls, path=None, **kw) -> "CharCorpus":
        return cls(Path(path or default_corpus_path()).read_text(), **kw)

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.stoi[c] for c in text], dtype=np.int64)

    def decode(self, ids) -> str:
        return "".join(self.itos[i] for i in ids if i)

    def train_batches(self, batch_size: int, seq_len: int, seed: int) -> Iterator[np.ndarray]:
        """Random windows of ``seq_len + 1`` characters from the train split."""
        rng = np.random.default_rng([seed, 0])
        hi = len(self.train) - seq_len - 1
        offsets = np.arange(seq_len + 1)
        while True:
            starts = rng.integers(0, hi + 1, size=batch_size)
            yield self.train[starts[:, None] + offsets]

    def eval_windows(self, split: str, seq_len: int, max_windows: Optional[int] = None) -> np.ndarray:
        """Non-overlapping windows covering a held-out split, ``[N, seq_len + 1]``."""
        data = self.val if split == "val" else self.test
        n = (len(data) - 1) // seq_len
        if max_windows is not None:
            n = min(n, max_windows)
        return np.stack([data[i * seq_len : i * seq_len + seq_len + 1] for i in range(n)])
