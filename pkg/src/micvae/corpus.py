"""Data plumbing: vocabularies, the synthetic task, and batch construction."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
ALPHABET = 40
LEXICON_SEED = 20200211


class ConfigError(ValueError):
    pass


class Vocab:
    """Joint source/target vocabulary with fixed reserved ids."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != SPECIALS:
            raise ConfigError("vocabulary must start with the reserved symbols")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def lookup(self, token: str) -> int:
        return self.index.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def encode(self, words: Sequence[str]) -> list[int]:
        return [BOS] + [self.lookup(w) for w in words] + [EOS]

    def decode(self, ids: Iterable[int]) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.tokens[i])
        return out

    def oov_count(self, words: Iterable[str]) -> int:
        return sum(w not in self.index for w in words)


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocab:
    """Tokens seen at least ``min_count`` times, most frequent first, ties lexicographic."""
    counts = Counter()
    n = 0
    for sent in corpus:
        n += 1
        counts.update(sent)
    if n == 0 or not counts:
        raise ConfigError("cannot build a vocabulary from an empty corpus")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in SPECIALS),
                  key=lambda t: (-counts[t], t))
    return Vocab(list(SPECIALS) + kept)


@dataclass
class TextPair:
    src: list[str]
    tgt: list[str]
    mode: int | None = None


@dataclass
class SentencePair:
    src: list[int]
    tgt: list[int]
    mode: int | None = None

    def __post_init__(self):
        if not self.src or not self.tgt:
            raise ValueError("sentence pair sides must be nonempty")


def encode_pairs(pairs: Iterable[TextPair], vocab: Vocab) -> list[SentencePair]:
    return [SentencePair(vocab.encode(p.src), vocab.encode(p.tgt), p.mode) for p in pairs]


def _lexicons(n_modes: int) -> list[np.ndarray]:
    rng = np.random.default_rng(LEXICON_SEED)
    lex_a = rng.permutation(ALPHABET)
    lex_b = rng.permutation(ALPHABET)
    out = [lex_a, lex_b]
    for m in range(2, n_modes):
        out.append(np.roll(lex_a, m))
    return out[:n_modes]


def _apply_mode(idx: Sequence[int], lex: np.ndarray, mode: int) -> list[str]:
    if mode == 1:
        return [f"b{lex[i]}" for i in reversed(idx)]
    return [f"a{lex[i]}" for i in idx]


def translate(src: Sequence[str], mode: int) -> list[str]:
    """Apply mode ``mode``'s deterministic transform to a source sentence."""
    lex = _lexicons(mode + 1)[mode]
    return _apply_mode([int(w[1:]) for w in src], lex, mode)


def gen_multimodal_task(n_pairs: int, n_modes: int = 2, seed: int = 0,
                        min_len: int = 4, max_len: int = 10) -> list[TextPair]:
    """Random source sentences, each translated by one uniformly chosen mode.

    Mode 0 substitutes through lexicon A, mode 1 reverses and substitutes
    through lexicon B, further modes use rotated copies of lexicon A. The
    lexicons do not depend on ``seed``, so separately generated splits share
    them. The mode is not recoverable from the source.
    """
    if n_modes < 1:
        raise ConfigError("n_modes must be >= 1")
    rng = np.random.default_rng(seed)
    lexicons = _lexicons(n_modes)
    pairs = []
    for _ in range(n_pairs):
        length = int(rng.integers(min_len, max_len + 1))
        idx = rng.integers(0, ALPHABET, size=length)
        mode = int(rng.integers(0, n_modes))
        pairs.append(TextPair([f"s{i}" for i in idx], _apply_mode(idx, lexicons[mode], mode), mode))
    return pairs


def gen_monolingual(n_sents: int, seed: int = 0, min_len: int = 4, max_len: int = 10) -> list[list[str]]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_sents):
        length = int(rng.integers(min_len, max_len + 1))
        out.append([f"s{i}" for i in rng.integers(0, ALPHABET, size=length)])
    return out


def synthetic_vocab(n_modes: int) -> Vocab:
    """The closed vocabulary covering every token the generator can emit."""
    words = [f"s{i}" for i in range(ALPHABET)] + [f"a{i}" for i in range(ALPHABET)]
    if n_modes >= 2:
        words += [f"b{i}" for i in range(ALPHABET)]
    return Vocab(list(SPECIALS) + words)


# -- batching ----------------------------------------------------------------
def _is_special(ids: np.ndarray) -> np.ndarray:
    return (ids == PAD) | (ids == BOS) | (ids == EOS)


def make_bow_targets(sentences: Sequence[Sequence[int]], vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """BoW target rows for a batch and a flag marking degenerate (empty) rows.

    Each token's in-sentence count is divided by its count over the whole
    batch, so tokens spread over many sentences are damped; rows are then
    renormalised to the simplex. pad/bos/eos are excluded.
    """
    if not sentences:
        raise ValueError("empty batch")
    counts = np.zeros((len(sentences), vocab_size))
    for n, sent in enumerate(sentences):
        ids = np.asarray(sent, dtype=np.int64)
        ids = ids[~_is_special(ids)]
        np.add.at(counts[n], ids, 1.0)
    batch_total = counts.sum(axis=0)
    weights = np.divide(counts, batch_total, out=np.zeros_like(counts), where=batch_total > 0)
    row = weights.sum(axis=1, keepdims=True)
    degenerate = row[:, 0] == 0
    weights = np.divide(weights, row, out=np.zeros_like(weights), where=row > 0)
    return weights, degenerate


def pad_matrix(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, ids != PAD


@dataclass
class SeqBatch:
    src_ids: np.ndarray
    tgt_ids: np.ndarray
    src_mask: np.ndarray
    tgt_mask: np.ndarray
    bow_targets: np.ndarray
    bow_degenerate: np.ndarray
    modes: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.src_ids.shape[0]

    def unpad(self) -> list[tuple[list[int], list[int]]]:
        return [
            (self.src_ids[n][self.src_mask[n]].tolist(), self.tgt_ids[n][self.tgt_mask[n]].tolist())
            for n in range(self.size)
        ]


@dataclass
class MonoBatch:
    src_ids: np.ndarray
    src_mask: np.ndarray
    bow_targets: np.ndarray
    bow_degenerate: np.ndarray

    @property
    def size(self) -> int:
        return self.src_ids.shape[0]


def pair_tokens(pair: SentencePair) -> int:
    return max(len(pair.src), len(pair.tgt))


def make_batch(pairs: Sequence[SentencePair], max_tokens: int | None, vocab_size: int) -> tuple[SeqBatch, int]:
    """Pad ``pairs`` into one batch, in order, until ``max_tokens`` is reached.

    A pair is charged ``max(len(src), len(tgt))`` tokens. Pairs that alone
    exceed the cap are skipped; the number skipped is returned alongside.
    """
    kept, used, skipped = [], 0, 0
    for p in pairs:
        cost = pair_tokens(p)
        if max_tokens is not None and cost > max_tokens:
            skipped += 1
            continue
        if max_tokens is not None and used + cost > max_tokens and kept:
            break
        kept.append(p)
        used += cost
    if skipped:
        logger.warning("skipped %d sentence pair(s) longer than max_tokens=%s", skipped, max_tokens)
    if not kept:
        raise ValueError("no sentence pair fits in the batch")
    src_ids, src_mask = pad_matrix([p.src for p in kept])
    tgt_ids, tgt_mask = pad_matrix([p.tgt for p in kept])
    bow, degenerate = make_bow_targets([p.tgt for p in kept], vocab_size)
    return SeqBatch(src_ids, tgt_ids, src_mask, tgt_mask, bow, degenerate, [p.mode for p in kept]), skipped


def token_frequencies(sentences: Sequence[Sequence[int]], vocab_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sentence token counts divided by sentence length (pad/bos/eos excluded).

    Cross-entropy against these rows is -(1/|x|) Σ_i log p(x_i).
    """
    counts = np.zeros((len(sentences), vocab_size))
    for n, sent in enumerate(sentences):
        ids = np.asarray(sent, dtype=np.int64)
        np.add.at(counts[n], ids[~_is_special(ids)], 1.0)
    length = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, length, out=np.zeros_like(counts), where=length > 0), length[:, 0] == 0


def make_mono_batch(sents: Sequence[Sequence[int]], vocab_size: int) -> MonoBatch:
    src_ids, src_mask = pad_matrix(sents)
    targets, degenerate = token_frequencies(sents, vocab_size)
    return MonoBatch(src_ids, src_mask, targets, degenerate)


def fixed_batches(pairs: Sequence[SentencePair], batch_size: int, vocab_size: int) -> list[SeqBatch]:
    """Consecutive batches of exactly ``batch_size`` pairs (last may be short)."""
    return [make_batch(pairs[i: i + batch_size], None, vocab_size)[0] for i in range(0, len(pairs), batch_size)]


def word_dropout(tgt_ids: np.ndarray, rate: float, rng: np.random.Generator | None, training: bool = True) -> np.ndarray:
    """Replace non-special decoder-input tokens with UNK at ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"word dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return tgt_ids
    drop = (rng.random(tgt_ids.shape) < rate) & ~_is_special(tgt_ids)
    return np.where(drop, UNK, tgt_ids)


# -- files -------------------------------------------------------------------
def write_bitext(path: Path, pairs: Sequence[TextPair], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for p in pairs:
            cols = [" ".join(p.src), " ".join(p.tgt)]
            if p.mode is not None:
                cols.append(str(p.mode))
            fh.write("\t".join(cols) + "\n")


def read_bitext(path: Path) -> list[TextPair]:
    """Tab-separated ``src<TAB>tgt[<TAB>mode]`` lines; ``#`` lines are comments."""
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) not in (2, 3):
                raise ValueError(f"{path}:{lineno}: expected 2 or 3 tab-separated columns")
            mode = int(cols[2]) if len(cols) == 3 else None
            pairs.append(TextPair(cols[0].split(), cols[1].split(), mode))
    return pairs


def write_mono(path: Path, sents: Sequence[Sequence[str]], header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        for s in sents:
            fh.write(" ".join(s) + "\n")


def read_mono(path: Path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh if line.strip() and not line.startswith("#")]
