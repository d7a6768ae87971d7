"""Desk-scale datasets: keyed recall (copy), parity classification, char LM.

Targets are aligned with inputs: ``targets[i, t]`` is what the logits at
position ``t`` should predict, and ``IGNORE`` marks positions without a
target.  Classification datasets carry one label per sequence instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

IGNORE = -1
CACHE_FORMAT = "compecon-dataset"
CACHE_VERSION = 1


class TaskError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    vocab: list = field(default_factory=list)
    split: str = "train"
    kind: str = "lm"
    vocab_size: int = 0
    indices: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if not self.vocab_size:
            self.vocab_size = len(self.vocab)
        if self.indices is None:
            self.indices = np.arange(len(self.inputs))

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def seq_len(self) -> int:
        return self.inputs.shape[1]

    def examples(self):
        for x, y in zip(self.inputs, self.targets):
            yield x.tolist(), (y.tolist() if y.ndim else int(y))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for s in range(0, len(self), batch_size):
            idx = order[s : s + batch_size]
            yield self.inputs[idx], self.targets[idx]


class Splits(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset


def _split_counts(n: int, fractions) -> tuple[int, int, int]:
    f_train, f_val, f_test = fractions
    if min(fractions) < 0 or abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise TaskError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    n_val = int(round(f_val * n))
    n_test = int(round(f_test * n))
    return n - n_val - n_test, n_val, n_test


def _split(inputs, targets, fractions, seed, **kw) -> Splits:
    n = len(inputs)
    n_train, n_val, _ = _split_counts(n, fractions)
    order = np.random.default_rng(seed).permutation(n)
    parts = {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train : n_train + n_val]),
        "test": np.sort(order[n_train + n_val :]),
    }
    return Splits(
        *(
            Dataset(inputs[idx], targets[idx], split=name, indices=idx, **kw)
            for name, idx in parts.items()
        )
    )


# ---------------------------------------------------------------------------
# Keyed recall ("copy") task
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CopyLayout:
    """Token id layout of the recall task.

    ``0 .. S-1`` are query tokens, then ``S`` groups of ``group_size`` value
    tokens (group ``i`` holds the candidates for salient slot ``i``), then
    distractor tokens.
    """

    num_salient: int
    group_size: int
    vocab: int

    @property
    def value_start(self) -> int:
        return self.num_salient

    @property
    def distractor_start(self) -> int:
        return self.num_salient + self.num_salient * self.group_size

    def group_of(self, token: int) -> int:
        if self.value_start <= token < self.distractor_start:
            return (token - self.value_start) // self.group_size
        return -1

    def value_index(self, token: int) -> int:
        return (token - self.value_start) % self.group_size


def copy_layout(vocab: int, num_salient: int) -> CopyLayout:
    group = (vocab - num_salient) // (2 * num_salient)
    if group < 2:
        raise TaskError(f"vocab {vocab} too small for {num_salient} salient slots")
    return CopyLayout(num_salient, group, vocab)


def _copy_arrays(seq_len, vocab, num_salient, n_examples, seed, num_queries):
    if num_salient < 1 or num_salient + num_queries > seq_len:
        raise TaskError(
            f"need 1 <= num_salient and num_salient + queries <= seq_len; got {num_salient}, {seq_len}"
        )
    if n_examples < 1:
        raise TaskError("n_examples must be >= 1")
    lay = copy_layout(vocab, num_salient)
    rng = np.random.default_rng(seed)
    ctx = seq_len - num_queries
    inputs = rng.integers(lay.distractor_start, vocab, size=(n_examples, seq_len))
    values = rng.integers(0, lay.group_size, size=(n_examples, num_salient))
    salient_pos = np.empty((n_examples, num_salient), dtype=np.int64)
    for i in range(n_examples):
        salient_pos[i] = rng.choice(ctx, size=num_salient, replace=False)
    slot_tokens = lay.value_start + np.arange(num_salient) * lay.group_size + values
    rows = np.arange(n_examples)[:, None]
    inputs[rows, salient_pos] = slot_tokens
    return lay, rng, inputs, slot_tokens, salient_pos


def make_copy_task(
    seq_len: int = 64,
    vocab: int = 64,
    num_salient: int = 4,
    n_examples: int = 4000,
    seed: int = 0,
    fractions=(0.8, 0.1, 0.1),
) -> Splits:
    """Keyed recall: the last ``num_salient`` positions are query tokens.

    Each context holds one token from every value group at random positions;
    every other context token is a distractor.  The query for slot ``i`` must
    output the group-``i`` token present in the context.
    """
    lay, rng, inputs, slot_tokens, _ = _copy_arrays(
        seq_len, vocab, num_salient, n_examples, seed, num_queries=num_salient
    )
    ctx = seq_len - num_salient
    targets = np.full_like(inputs, IGNORE)
    for i in range(n_examples):
        order = rng.permutation(num_salient)
        inputs[i, ctx:] = order
        targets[i, ctx:] = slot_tokens[i, order]
    return _split(inputs, targets, fractions, seed, vocab=list(range(vocab)), kind="lm", vocab_size=vocab)


def solve_copy_by_rule(inputs: np.ndarray, layout: CopyLayout) -> np.ndarray:
    """Answer each query by looking only at the salient positions."""
    preds = np.full(inputs.shape, IGNORE, dtype=np.int64)
    for i, row in enumerate(inputs):
        by_group = {layout.group_of(int(t)): int(t) for t in row if layout.group_of(int(t)) >= 0}
        for t, tok in enumerate(row):
            if tok < layout.num_salient:
                preds[i, t] = by_group[int(tok)]
    return preds


def classification_rule(inputs: np.ndarray, layout: CopyLayout) -> np.ndarray:
    """Parity of the summed within-group indices of the salient tokens."""
    vals = np.where(
        (inputs >= layout.value_start) & (inputs < layout.distractor_start),
        (inputs - layout.value_start) % layout.group_size,
        0,
    )
    return vals.sum(axis=1) % 2


def make_classification_task(
    seq_len: int = 64,
    vocab: int = 64,
    num_salient: int = 4,
    n_examples: int = 4000,
    seed: int = 0,
    fractions=(0.8, 0.1, 0.1),
) -> Splits:
    """Binary classification read off the final token (query token 0)."""
    lay, _, inputs, _, _ = _copy_arrays(seq_len, vocab, num_salient, n_examples, seed, num_queries=1)
    inputs[:, -1] = 0
    labels = classification_rule(inputs, lay)
    return _split(inputs, labels, fractions, seed, vocab=list(range(vocab)), kind="classify", vocab_size=vocab)


# ---------------------------------------------------------------------------
# Character-level corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ByteVocab:
    """Maps the distinct bytes of a corpus to contiguous ids."""

    symbols: tuple[int, ...]

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ByteVocab":
        return cls(tuple(sorted(set(raw))))

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, text: str | bytes) -> list[int]:
        raw = text.encode("utf-8") if isinstance(text, str) else text
        lookup = {b: i for i, b in enumerate(self.symbols)}
        return [lookup[b] for b in raw]

    def decode(self, ids) -> str:
        return bytes(self.symbols[i] for i in ids).decode("utf-8", errors="replace")


def tokenize(text: str | bytes, vocab: ByteVocab) -> list[int]:
    return vocab.encode(text)


def detokenize(ids, vocab: ByteVocab) -> str:
    return vocab.decode(ids)


def load_char_corpus(
    path: str | Path,
    seq_len: int = 64,
    split_fractions=(0.8, 0.1, 0.1),
    seed: int = 0,
    min_chars: int | None = None,
) -> Splits:
    """Non-overlapping windows of ``seq_len + 1`` bytes, split at window level.

    ``min_chars`` defaults to ``10 * seq_len``.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise TaskError(f"cannot read corpus {path}: {exc}") from exc
    need = 10 * seq_len if min_chars is None else min_chars
    if len(raw) < max(need, seq_len + 1):
        raise TaskError(f"corpus {path} has {len(raw)} bytes; need at least {max(need, seq_len + 1)}")
    vocab = ByteVocab.from_bytes(raw)
    ids = np.asarray(vocab.encode(raw), dtype=np.int64)
    w = seq_len + 1
    n_win = len(ids) // w
    windows = ids[: n_win * w].reshape(n_win, w)
    return _split(
        windows[:, :-1],
        windows[:, 1:],
        split_fractions,
        seed,
        vocab=list(vocab.symbols),
        kind="lm",
        vocab_size=len(vocab),
    )


def default_corpus_path() -> Path:
    return Path(__file__).with_name("data") / "corpus.txt"


# ---------------------------------------------------------------------------
# JSON-lines cache
# ---------------------------------------------------------------------------


def save_jsonl(ds: Dataset, path: str | Path) -> Path:
    """Header line with format/version/metadata, then one example per line."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "format": CACHE_FORMAT,
            "version": CACHE_VERSION,
            "split": ds.split,
            "kind": ds.kind,
            "vocab_size": ds.vocab_size,
            "vocab": ds.vocab,
        }
        fh.write(json.dumps(header) + "\n")
        for idx, (x, y) in zip(ds.indices.tolist(), ds.examples()):
            fh.write(json.dumps({"index": idx, "input": x, "target": y}) + "\n")
    return path


def load_jsonl(path: str | Path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CACHE_FORMAT or header.get("version") != CACHE_VERSION:
            raise TaskError(f"{path}: unsupported dataset cache header {header}")
        rows = [json.loads(line) for line in fh if line.strip()]
    return Dataset(
        np.asarray([r["input"] for r in rows], dtype=np.int64),
        np.asarray([r["target"] for r in rows], dtype=np.int64),
        vocab=header["vocab"],
        split=header["split"],
        kind=header["kind"],
        vocab_size=header["vocab_size"],
        indices=np.asarray([r["index"] for r in rows], dtype=np.int64),
    )
