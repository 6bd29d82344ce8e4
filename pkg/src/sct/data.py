"""Batch sources: a seeded copy task and contiguous byte-level text chunks."""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from sct.errors import ConfigError
from sct.model import Batch

DATA_KINDS = ("copy", "text")


@dataclass
class DataConfig:
    kind: str = "text"
    path: Optional[str] = None  # text source; None means the bundled corpus

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise ConfigError(f"data.kind must be one of {DATA_KINDS}, got {self.kind!r}")
        if self.kind == "copy" and self.path is not None:
            raise ConfigError("data.path only applies to kind='text'")


def bundled_corpus() -> bytes:
    return resources.files("sct").joinpath("resources/corpus.txt").read_bytes()


def copy_task_batches(vocab, seq_len, batch_size, seed):
    """Endless batches where the second half of each sequence repeats the first.

    Token 0 is reserved as a separator between the halves.
    """
    if vocab < 2:
        raise ConfigError("copy task needs vocab >= 2")
    rng = np.random.default_rng(seed)
    half = (seq_len + 1) // 2
    while True:
        head = rng.integers(1, vocab, size=(batch_size, half))
        seq = np.concatenate([head, np.zeros((batch_size, 1), dtype=head.dtype), head], axis=1)
        seq = seq[:, : seq_len + 1]
        yield Batch(seq[:, :-1], seq[:, 1:])


def text_batches(data: bytes, seq_len, batch_size):
    """Endless batches of consecutive (seq_len + 1)-byte windows, cycling the text."""
    arr = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    if arr.size < seq_len + 1:
        raise ConfigError(f"text source has {arr.size} bytes, need at least {seq_len + 1}")
    n_chunks = (arr.size - 1) // seq_len
    chunk = 0
    while True:
        rows = []
        for _ in range(batch_size):
            start = (chunk % n_chunks) * seq_len
            rows.append(arr[start : start + seq_len + 1])
            chunk += 1
        seq = np.stack(rows)
        yield Batch(seq[:, :-1], seq[:, 1:])


def make_batches(cfg: DataConfig, vocab, seq_len, batch_size, seed, base_dir=None):
    if cfg.kind == "copy":
        return copy_task_batches(vocab, seq_len, batch_size, seed)
    if vocab < 256:
        raise ConfigError(f"byte-level text needs vocab >= 256, got {vocab}")
    if cfg.path is None:
        data = bundled_corpus()
    else:
        path = Path(cfg.path)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read text source {path}: {exc}") from exc
    return text_batches(data, seq_len, batch_size)
