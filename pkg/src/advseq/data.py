"""Corpus handling: vocabularies, parallel data, toy tasks, batching.

File formats: corpora are UTF-8 text, one sentence per line, space-separated
tokens. A vocabulary file lists one non-reserved token per line; its line
number equals the token id minus 4 (ids 0-3 are pad/bos/eos/unk).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DataError, VocabularyError
from .seeding import child_rng

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocab:
    """Token <-> id mapping with the four reserved ids fixed at 0-3."""

    def __init__(self, tokens):
        self._id_to_token = list(RESERVED_TOKENS)
        self._token_to_id = {t: i for i, t in enumerate(RESERVED_TOKENS)}
        for t in tokens:
            if t in self._token_to_id:
                raise DataError(f"duplicate or reserved token {t!r}")
            self._token_to_id[t] = len(self._id_to_token)
            self._id_to_token.append(t)

    def __len__(self) -> int:
        return len(self._id_to_token)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._id_to_token == other._id_to_token

    def id(self, token: str) -> int:
        return self._token_to_id.get(token, UNK_ID)

    def token(self, i: int) -> str:
        if not 0 <= i < len(self._id_to_token):
            raise VocabularyError(f"id {i} outside vocabulary of size {len(self)}")
        return self._id_to_token[i]

    def encode(self, tokens) -> np.ndarray:
        if isinstance(tokens, str):
            tokens = tokens.split()
        return np.array([self.id(t) for t in tokens], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.token(int(i)) for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t in self._id_to_token[len(RESERVED_TOKENS):]:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def build_vocab(sentences, min_count: int = 1) -> Vocab:
    """Frequency-thresholded vocabulary, most frequent first (ties by token)."""
    counts: Counter = Counter()
    empty = True
    for s in sentences:
        empty = False
        counts.update(s.split() if isinstance(s, str) else s)
    if empty:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocab(kept)


# ---------------------------------------------------------------------------
# Sentence pairs and batches
# ---------------------------------------------------------------------------


@dataclass
class SentencePair:
    """Aligned (x, y) with the decoder input z = BOS-prefixed shift of y."""

    x: np.ndarray
    y: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.z = np.asarray(self.z, dtype=np.int64)
        if len(self.x) == 0 or len(self.y) == 0:
            raise ContractError("empty sentence in pair")
        if self.z.shape != self.y.shape:
            raise ContractError(f"|z| {len(self.z)} != |y| {len(self.y)}")
        if self.z[0] != BOS_ID or not np.array_equal(self.z[1:], self.y[:-1]):
            raise ContractError("z is not the BOS-prefixed shift of y")


def make_pair(x_ids, y_ids) -> SentencePair:
    """Build a pair from source ids and EOS-terminated target ids."""
    y = np.asarray(y_ids, dtype=np.int64)
    if len(y) == 0 or y[-1] != EOS_ID:
        raise ContractError("target must be EOS-terminated")
    z = np.concatenate([[BOS_ID], y[:-1]])
    return SentencePair(np.asarray(x_ids, dtype=np.int64), y, z)


@dataclass
class Batch:
    """Padded id matrices plus the original lengths."""

    x: np.ndarray
    z: np.ndarray
    y: np.ndarray
    src_lengths: np.ndarray
    trg_lengths: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def x_mask(self) -> np.ndarray:
        return self.x != PAD_ID

    @property
    def y_mask(self) -> np.ndarray:
        return self.y != PAD_ID

    def pair(self, b: int):
        """Unpadded (x, z, y) views for sentence b."""
        sl, tl = self.src_lengths[b], self.trg_lengths[b]
        return self.x[b, :sl], self.z[b, :tl], self.y[b, :tl]


def pad_batch(pairs) -> Batch:
    pairs = list(pairs)
    if not pairs:
        raise ContractError("cannot pad an empty batch")
    B = len(pairs)
    tx = max(len(p.x) for p in pairs)
    tz = max(len(p.y) for p in pairs)
    x = np.full((B, tx), PAD_ID, dtype=np.int64)
    z = np.full((B, tz), PAD_ID, dtype=np.int64)
    y = np.full((B, tz), PAD_ID, dtype=np.int64)
    for b, p in enumerate(pairs):
        x[b, : len(p.x)] = p.x
        z[b, : len(p.z)] = p.z
        y[b, : len(p.y)] = p.y
    return Batch(
        x, z, y,
        np.array([len(p.x) for p in pairs]),
        np.array([len(p.y) for p in pairs]),
    )


def batch_iter(pairs, token_budget: int, shuffle_seed: int):
    """Length-bucketed batches covering every pair exactly once per epoch.

    A pair costs |x| + |y| tokens; consecutive pairs (after a seeded shuffle
    and a stable length sort) are packed greedily up to the budget. Batch
    order is shuffled again so length buckets do not arrive monotonically.
    """
    pairs = list(pairs)
    if not pairs:
        return
    rng = child_rng(shuffle_seed, "batch_order")
    order = rng.permutation(len(pairs))
    by_len = sorted(order, key=lambda i: (len(pairs[i].x), len(pairs[i].y)))
    chunks: list[list[int]] = []
    cur: list[int] = []
    cur_cost = 0
    for i in by_len:
        cost = len(pairs[i].x) + len(pairs[i].y)
        if cur and cur_cost + cost > token_budget:
            chunks.append(cur)
            cur, cur_cost = [], 0
        cur.append(i)
        cur_cost += cost
    if cur:
        chunks.append(cur)
    for c in rng.permutation(len(chunks)):
        yield pad_batch([pairs[i] for i in chunks[c]])


# ---------------------------------------------------------------------------
# Parallel corpora
# ---------------------------------------------------------------------------


def load_parallel(src_path, trg_path, src_vocab: Vocab, trg_vocab: Vocab):
    """Aligned pairs from two one-sentence-per-line files."""
    with open(src_path, encoding="utf-8") as fh:
        src_lines = [ln.strip() for ln in fh if ln.strip()]
    with open(trg_path, encoding="utf-8") as fh:
        trg_lines = [ln.strip() for ln in fh if ln.strip()]
    if len(src_lines) != len(trg_lines):
        raise DataError(
            f"line counts differ: {len(src_lines)} source vs {len(trg_lines)} target"
        )
    pairs = []
    for s, t in zip(src_lines, trg_lines):
        x = src_vocab.encode(s)
        y = np.concatenate([trg_vocab.encode(t), [EOS_ID]])
        pairs.append(make_pair(x, y))
    return pairs


def write_corpus(path, sentences, vocab: Vocab, strip_eos: bool = True) -> None:
    """One decoded sentence per line (EOS dropped by default)."""
    with open(path, "w", encoding="utf-8") as fh:
        for ids in sentences:
            ids = [int(i) for i in ids]
            if strip_eos and ids and ids[-1] == EOS_ID:
                ids = ids[:-1]
            fh.write(" ".join(vocab.decode(ids)) + "\n")


# ---------------------------------------------------------------------------
# Synthetic toy tasks
# ---------------------------------------------------------------------------

TOY_KINDS = ("cipher", "reverse", "cipher_swap")


@dataclass
class ToyTask:
    kind: str
    pairs: list
    src_vocab: Vocab
    trg_vocab: Vocab
    mapping: np.ndarray = field(repr=False)


def make_toy_task(kind: str, vocab_size: int, corpus_size: int,
                  len_range=(4, 10), seed: int = 0) -> ToyTask:
    """Deterministic synthetic translation task with a known ground truth.

    Source sentences follow a two-successor Markov chain over the word
    types (so a language model has structure to learn); the target is a
    fixed-permutation substitution cipher of the source, optionally
    reversed or with adjacent pairs swapped.
    """
    if kind not in TOY_KINDS:
        raise DataError(f"unknown toy task {kind!r}; expected one of {TOY_KINDS}")
    if vocab_size < 10:
        raise DataError("toy tasks need vocab_size >= 10")
    lo, hi = len_range
    if not 1 <= lo <= hi:
        raise DataError(f"bad length range {len_range}")
    K = vocab_size - 4
    rng = child_rng(seed, "toy", kind)
    mapping = rng.permutation(K)
    pairs = []
    for _ in range(corpus_size):
        n = int(rng.integers(lo, hi + 1))
        ks = np.empty(n, dtype=np.int64)
        ks[0] = rng.integers(K)
        for j in range(1, n):
            ks[j] = (2 * ks[j - 1] + rng.integers(2)) % K
        mapped = mapping[ks]
        if kind == "reverse":
            mapped = mapped[::-1]
        elif kind == "cipher_swap":
            mapped = mapped.copy()
            for j in range(0, n - 1, 2):
                mapped[j], mapped[j + 1] = mapped[j + 1], mapped[j]
        x = 4 + ks
        y = np.concatenate([4 + mapped, [EOS_ID]])
        pairs.append(make_pair(x, y))
    src_vocab = Vocab([f"s{i}" for i in range(K)])
    trg_vocab = Vocab([f"t{i}" for i in range(K)])
    return ToyTask(kind, pairs, src_vocab, trg_vocab, mapping)
