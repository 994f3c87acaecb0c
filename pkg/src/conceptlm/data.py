"""Byte-level tokenization, corpus ingestion, and chunk-aligned batching.

The vocabulary is the 256 raw byte values; no BPE, no special tokens. Batches
are contiguous non-overlapping windows of seq_len + 1 ids (the model reads the
first seq_len), shuffled by a seeded permutation so a (corpus digest, batch
size, seq_len, seed) tuple fully determines the stream.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

VOCAB_SIZE = 256


def tokenize_bytes(data: bytes | str) -> np.ndarray:
    """Raw byte values as token ids in [0, 256)."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return np.frombuffer(bytes(data), dtype=np.uint8).astype(np.int64)


def detokenize(ids: np.ndarray) -> bytes:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        raise ValueError("token id out of byte range")
    return ids.astype(np.uint8).tobytes()


@dataclass(frozen=True)
class Corpus:
    token_ids: np.ndarray
    source_digest: str
    vocab_size: int = VOCAB_SIZE

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])


def load_corpus(paths: Iterable[str | Path]) -> Corpus:
    """Read files as raw bytes, in the given order; digest covers all content."""
    paths = [Path(p) for p in paths]
    if not paths:
        raise ValueError("no corpus files given")
    hasher = hashlib.sha256()
    chunks = []
    for path in paths:
        blob = path.read_bytes()
        hasher.update(blob)
        chunks.append(tokenize_bytes(blob))
    return Corpus(token_ids=np.concatenate(chunks), source_digest=hasher.hexdigest())


def corpus_from_bytes(data: bytes) -> Corpus:
    return Corpus(
        token_ids=tokenize_bytes(data),
        source_digest=hashlib.sha256(data).hexdigest(),
    )


def write_manifest(path: str | Path, corpus: Corpus, files: Iterable[str | Path]) -> None:
    lines = [f"digest = {corpus.source_digest}", f"vocab_size = {corpus.vocab_size}"]
    lines += [f"file = {p}" for p in files]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class TokenBatch:
    """One training batch: `inputs` holds B rows of seq_len token ids.

    NTP targets are the inputs shifted left by one within each row; the
    final position of a row has no in-sequence target.
    """

    inputs: np.ndarray
    batch_index: int

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be [B, T]")


def _windows(corpus: Corpus, seq_len: int) -> np.ndarray:
    width = seq_len + 1
    count = len(corpus) // width
    if count == 0:
        raise ValueError(
            f"corpus too small: {len(corpus)} ids < one window of {width}"
        )
    return corpus.token_ids[: count * width].reshape(count, width)


def _check_seq_len(seq_len: int, chunk_size: int) -> None:
    if seq_len % chunk_size != 0:
        raise ValueError(
            f"T must be a multiple of chunk size k (T={seq_len}, k={chunk_size})"
        )


def epoch_permutation(n_windows: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n_windows)


def build_batches(
    corpus: Corpus, batch_size: int, seq_len: int, chunk_size: int, seed: int
) -> Iterator[TokenBatch]:
    """One epoch of shuffled, non-overlapping batches."""
    _check_seq_len(seq_len, chunk_size)
    windows = _windows(corpus, seq_len)
    if len(windows) < batch_size:
        raise ValueError(
            f"corpus too small: {len(windows)} windows < batch size {batch_size}"
        )
    perm = epoch_permutation(len(windows), seed, epoch=0)
    n_batches = len(windows) // batch_size
    for b in range(n_batches):
        rows = perm[b * batch_size : (b + 1) * batch_size]
        yield TokenBatch(inputs=windows[rows, :seq_len].astype(np.int64), batch_index=b)


def batch_for_step(
    corpus: Corpus, batch_size: int, seq_len: int, chunk_size: int, seed: int, step: int
) -> TokenBatch:
    """Stateless batch lookup: the batch any run at `step` consumes.

    Windows are reshuffled every epoch with a permutation derived from
    (seed, epoch), so resumed training sees exactly the batches an
    uninterrupted run would.
    """
    _check_seq_len(seq_len, chunk_size)
    windows = _windows(corpus, seq_len)
    n_batches = len(windows) // batch_size
    if n_batches == 0:
        raise ValueError(
            f"corpus too small: {len(windows)} windows < batch size {batch_size}"
        )
    epoch, offset = divmod(step, n_batches)
    perm = epoch_permutation(len(windows), seed, epoch)
    rows = perm[offset * batch_size : (offset + 1) * batch_size]
    return TokenBatch(inputs=windows[rows, :seq_len].astype(np.int64), batch_index=step)


def eval_batches(corpus: Corpus, batch_size: int, seq_len: int) -> Iterator[np.ndarray]:
    """Unshuffled evaluation batches (last partial batch included)."""
    windows = _windows(corpus, seq_len)
    inputs = windows[:, :seq_len].astype(np.int64)
    for start in range(0, len(inputs), batch_size):
        yield inputs[start : start + batch_size]
