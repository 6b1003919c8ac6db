"""Byte-level vocabulary, synthetic copy task, MLM masking and corpus batching.

Token ids 0-255 are raw bytes; four special tokens follow. Every batch
generator here is a pure function of its inputs and seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError

PAD, MASK, BOS, EOS = 256, 257, 258, 259
VOCAB_SIZE = 260
IGNORE_INDEX = -1
SPECIAL_TOKENS = {"PAD": PAD, "MASK": MASK, "BOS": BOS, "EOS": EOS}


@dataclass(frozen=True)
class Batch:
    input_ids: np.ndarray  # [B, S] int64
    targets: np.ndarray  # [B, S] int64, IGNORE_INDEX where nothing is predicted
    valid: np.ndarray  # [B, S] bool, False on PAD

    def __post_init__(self):
        if not (self.input_ids.shape == self.targets.shape == self.valid.shape):
            raise DataError(
                f"batch shapes disagree: {self.input_ids.shape}, {self.targets.shape}, {self.valid.shape}"
            )

    @property
    def num_targets(self) -> int:
        return int((self.targets != IGNORE_INDEX).sum())


def tokenize(text: bytes) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(bytes(text))


def detokenize(ids) -> bytes:
    """Inverse of :func:`tokenize`; special tokens are dropped."""
    return bytes(int(i) for i in ids if 0 <= int(i) < 256)


def _rng(seed, *stream) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, stream)])


def _make_batch(input_ids: np.ndarray, targets: np.ndarray) -> Batch:
    valid = input_ids != PAD
    targets = np.where(valid, targets, IGNORE_INDEX)
    return Batch(input_ids.astype(np.int64), targets.astype(np.int64), valid)


def shift_targets(input_ids: np.ndarray) -> np.ndarray:
    """Next-token targets; the last position of each row predicts nothing."""
    targets = np.full_like(input_ids, IGNORE_INDEX)
    targets[:, :-1] = input_ids[:, 1:]
    return targets


def make_copy_task(seed: int, B: int, S: int, V_effective: int, step: int = 0) -> Batch:
    """Causal-LM batch whose second half repeats the first.

    Each row is ``BOS, p_1..p_k, p_1..p_k, EOS`` with ``k = S/2 - 1`` payload
    tokens drawn uniformly from ``[0, V_effective)``. Only the first ``k``
    next-token predictions are unavoidable guesses, so the best achievable
    mean loss is ``k * ln(V_effective) / (S - 1)``, about half of
    ``ln(V_effective)``. ``step`` selects an independent batch in the stream.
    """
    if S % 2 or S < 4:
        raise ConfigError(f"copy task needs an even seq length >= 4, got {S}")
    if not 1 <= V_effective <= 256:
        raise ConfigError(f"V_effective must be in [1, 256], got {V_effective}")
    if B < 1:
        raise ConfigError(f"batch size must be >= 1, got {B}")
    k = S // 2 - 1
    rng = _rng(seed, 0, step)
    payload = rng.integers(0, V_effective, size=(B, k))
    ids = np.empty((B, S), dtype=np.int64)
    ids[:, 0] = BOS
    ids[:, 1 : k + 1] = payload
    ids[:, k + 1 : 2 * k + 1] = payload
    ids[:, -1] = EOS
    return _make_batch(ids, shift_targets(ids))


def copy_task_floor(S: int, V_effective: int) -> float:
    """Lowest achievable mean loss on :func:`make_copy_task` batches."""
    k = S // 2 - 1
    return k * float(np.log(V_effective)) / (S - 1)


def mask_for_mlm(
    token_ids,
    seed: int,
    mask_rate: float = 0.15,
    mask_id: int = MASK,
    random_vocab: int = 256,
    step: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """BERT-style corruption.

    Each non-PAD position is selected with probability ``mask_rate``; of the
    selected ones 80% become ``mask_id``, 10% a random token from
    ``[0, random_vocab)`` and 10% stay unchanged. Returns
    ``(masked_ids, targets)`` with targets set only at selected positions.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ConfigError(f"mask_rate must be in (0, 1), got {mask_rate}")
    ids = np.asarray(token_ids, dtype=np.int64)
    rng = _rng(seed, 1, step)
    selected = (rng.random(ids.shape) < mask_rate) & (ids != PAD)
    action = rng.random(ids.shape)
    randoms = rng.integers(0, random_vocab, size=ids.shape)
    masked = ids.copy()
    masked[selected & (action < 0.8)] = mask_id
    replace = selected & (action >= 0.8) & (action < 0.9)
    masked[replace] = randoms[replace]
    targets = np.where(selected, ids, IGNORE_INDEX)
    return masked, targets


def read_corpus(path) -> np.ndarray:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise DataError(f"corpus {path} is empty")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def corpus_windows(path, seq_length: int) -> np.ndarray:
    """Non-overlapping ``seq_length`` windows, shape [num_windows, S]."""
    data = read_corpus(path)
    n = data.size // seq_length
    if n == 0:
        raise DataError(f"corpus {os.fspath(path)} has {data.size} bytes, fewer than seq_length {seq_length}")
    return data[: n * seq_length].reshape(n, seq_length)


def _windows_to_batch(windows: np.ndarray, task: str, seed: int, index: int) -> Batch:
    if task == "causal":
        return _make_batch(windows, shift_targets(windows))
    masked, targets = mask_for_mlm(windows, seed, step=index)
    return _make_batch(masked, targets)


def stream_corpus(
    path,
    seq_length: int,
    batch: int,
    seed: int,
    task: str = "causal",
    epochs: int | None = 1,
    shuffle: bool = True,
) -> Iterator[Batch]:
    """Yield full batches of corpus windows.

    Windows are shuffled per epoch with a generator derived from
    ``(seed, epoch)``; a trailing partial batch is dropped. ``epochs=None``
    streams forever.
    """
    if task not in ("causal", "mlm"):
        raise ConfigError(f"task must be 'causal' or 'mlm', got {task!r}")
    if batch < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch}")
    windows = corpus_windows(path, seq_length)
    per_epoch = windows.shape[0] // batch
    if per_epoch == 0:
        raise DataError(f"corpus yields {windows.shape[0]} windows, fewer than one batch of {batch}")
    epoch = 0
    index = 0
    while epochs is None or epoch < epochs:
        order = _rng(seed, 2, epoch).permutation(windows.shape[0]) if shuffle else np.arange(windows.shape[0])
        for j in range(per_epoch):
            rows = windows[order[j * batch : (j + 1) * batch]]
            yield _windows_to_batch(rows, task, seed, index)
            index += 1
        epoch += 1


def eval_batches(path, seq_length: int, batch: int, task: str = "causal", seed: int = 0) -> Iterator[Batch]:
    """Every window of the corpus exactly once, in file order, last batch possibly short."""
    windows = corpus_windows(path, seq_length)
    for j, start in enumerate(range(0, windows.shape[0], batch)):
        yield _windows_to_batch(windows[start : start + batch], task, seed, j)
