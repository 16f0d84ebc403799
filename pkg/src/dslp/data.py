"""Synthetic parallel corpora, vocabulary handling, batching and corpus I/O.

Three generators stand in for real translation data:

* copy task: the target repeats the source verbatim;
* multimodal task: every source word has two target synonyms (registers A and
  B) and a fair coin picks one register for the *whole* target sentence, so a
  token-level mixture of registers is always wrong;
* length task: each digit token expands to zero or more unary tokens, giving a
  target length that differs from the source length.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from dslp import rng as rng_streams
from dslp.errors import ContractError, LengthError

log = logging.getLogger(__name__)

PAD, BOS, EOS, BLANK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "_")

Sentence = list


class Vocabulary:
    """Bijection between tokens and ids; ids 0-3 are reserved."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for w in words:
            self.add(w)

    def add(self, token: str) -> int:
        if not token or any(c.isspace() for c in token):
            raise ContractError(f"invalid token {token!r}")
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.stoi[t] for t in tokens]
        except KeyError as e:
            raise ContractError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip_special and i in (PAD, BOS, EOS, BLANK):
                continue
            out.append(self.itos[i])
        return out

    @property
    def words(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def content_hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise ContractError(f"{path}: vocabulary must start with reserved tokens {RESERVED}")
        return cls(lines[len(RESERVED):])


@dataclass
class ParallelCorpus:
    pairs: list  # list of (src tokens, tgt tokens)
    vocab: Vocabulary
    provenance: str = "raw"

    def __len__(self) -> int:
        return len(self.pairs)

    def sources(self) -> list:
        return [s for s, _ in self.pairs]

    def targets(self) -> list:
        return [t for _, t in self.pairs]

    def encoded(self) -> list:
        return [(self.vocab.encode(s), self.vocab.encode(t)) for s, t in self.pairs]

    def validate(self, max_len: Optional[int] = None) -> None:
        for i, (s, t) in enumerate(self.pairs):
            if not s or not t:
                raise ContractError(f"pair {i} has an empty side")
            if max_len is not None and (len(s) > max_len or len(t) > max_len):
                raise LengthError(f"pair {i} exceeds max_len={max_len}")
            for tok in (*s, *t):
                if tok in RESERVED:
                    raise ContractError(f"pair {i} contains reserved token {tok!r}")
                if tok not in self.vocab:
                    raise ContractError(f"pair {i} token {tok!r} missing from vocabulary")


# ----------------------------------------------------------------------------
# Generators
# ----------------------------------------------------------------------------

def _lengths(rng, n, len_range):
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise ContractError(f"bad len_range {len_range}")
    return rng.integers(lo, hi + 1, size=n)


def gen_copy_task(n: int, len_range=(3, 10), vocab_size: int = 16, seed: int = 0) -> ParallelCorpus:
    if vocab_size < 2:
        raise ContractError("copy task needs vocab_size >= 2")
    words = [f"w{i}" for i in range(vocab_size)]
    rng = rng_streams.stream(seed, "data.copy")
    pairs = []
    for length in _lengths(rng, n, len_range):
        src = [words[j] for j in rng.integers(0, vocab_size, size=length)]
        pairs.append((src, list(src)))
    return ParallelCorpus(pairs, Vocabulary(words))


def multimodal_words(vocab_size: int):
    """Source words and their (A, B) synonym pairs for ``vocab_size`` target types."""
    if vocab_size < 2 or vocab_size % 2:
        raise ContractError("multimodal task needs an even vocab_size >= 2")
    k = vocab_size // 2
    src = [f"s{i}" for i in range(k)]
    syn = [(f"t{i}a", f"t{i}b") for i in range(k)]
    return src, syn


def gen_multimodal_task(n: int, len_range=(3, 8), vocab_size: int = 16, seed: int = 0) -> ParallelCorpus:
    """Each sentence's target uses one register, chosen by a fair coin."""
    src_words, syn = multimodal_words(vocab_size)
    rng = rng_streams.stream(seed, "data.multimodal")
    pairs = []
    for length in _lengths(rng, n, len_range):
        ids = rng.integers(0, len(src_words), size=length)
        reg = int(rng.integers(0, 2))
        pairs.append(([src_words[j] for j in ids], [syn[j][reg] for j in ids]))
    words = src_words + [w for p in syn for w in p]
    return ParallelCorpus(pairs, Vocabulary(words))


def gen_length_task(n: int, seed: int = 0, len_range=(2, 6), max_digit: int = 3) -> ParallelCorpus:
    """Digit ``dk`` expands to ``k`` copies of ``uk``; ``d0`` vanishes."""
    digits = [f"d{k}" for k in range(max_digit + 1)]
    units = [f"u{k}" for k in range(1, max_digit + 1)]
    rng = rng_streams.stream(seed, "data.length")
    pairs = []
    while len(pairs) < n:
        length = int(rng.integers(len_range[0], len_range[1] + 1))
        ks = rng.integers(0, max_digit + 1, size=length)
        tgt = [f"u{k}" for k in ks for _ in range(k)]
        if not tgt:
            continue
        pairs.append(([digits[k] for k in ks], tgt))
    return ParallelCorpus(pairs, Vocabulary(digits + units))


# ----------------------------------------------------------------------------
# Register statistics for the multimodal task
# ----------------------------------------------------------------------------

def register_of(token: str) -> Optional[str]:
    if token.startswith("t") and token[-1] in "ab" and token[1:-1].isdigit():
        return token[-1].upper()
    return None


def is_register_mixed(tokens: Sequence[str]) -> bool:
    regs = {register_of(t) for t in tokens} - {None}
    return len(regs) > 1


def mixed_register_rate(sentences: Sequence[Sequence[str]]) -> float:
    if not sentences:
        return 0.0
    return sum(is_register_mixed(s) for s in sentences) / len(sentences)


def register_purity(corpus: ParallelCorpus) -> float:
    """Fraction of target sentences drawn from a single register."""
    return 1.0 - mixed_register_rate(corpus.targets())


def dominant_register_share(corpus: ParallelCorpus) -> float:
    """Fraction of targets written purely in the corpus's most common register.

    Raw multimodal data sits near 0.5 (a fair coin per sentence); a corpus
    whose targets settle on one mode approaches 1.
    """
    counts = Counter()
    for t in corpus.targets():
        regs = {register_of(x) for x in t} - {None}
        if len(regs) == 1:
            counts[regs.pop()] += 1
    return max(counts.values()) / len(corpus) if counts else 0.0


def register_modes_per_source(corpus: ParallelCorpus) -> float:
    """Mean number of distinct registers per repeated source sentence."""
    seen: dict = {}
    for s, t in corpus.pairs:
        regs = {register_of(x) for x in t} - {None}
        seen.setdefault(tuple(s), []).append(frozenset(regs))
    counts = [len(set().union(*r)) for r in seen.values() if len(r) > 1]
    return float(np.mean(counts)) if counts else float("nan")


# ----------------------------------------------------------------------------
# Distillation
# ----------------------------------------------------------------------------

def distill_corpus(corpus: ParallelCorpus, teacher, batch_size: int = 64) -> ParallelCorpus:
    """Replace each target with the autoregressive teacher's greedy output.

    ``teacher`` is a :class:`dslp.transformer.ModelParams` with a causal
    decoder. Pairs for which the teacher emits nothing keep their original
    target.
    """
    from dslp.transformer import ar_teacher_decode_batch

    vocab = corpus.vocab
    srcs = [vocab.encode(s) for s in corpus.sources()]
    outs = []
    for i in range(0, len(srcs), batch_size):
        outs.extend(ar_teacher_decode_batch(teacher, srcs[i:i + batch_size]))
    pairs, kept = [], 0
    for (src, tgt), hyp in zip(corpus.pairs, outs):
        words = vocab.decode(hyp)
        if not words:
            kept += 1
            pairs.append((list(src), list(tgt)))
        else:
            pairs.append((list(src), words))
    if kept:
        log.info("distill_corpus: teacher produced empty output for %d pairs; originals kept", kept)
    return ParallelCorpus(pairs, vocab, provenance="distilled")


# ----------------------------------------------------------------------------
# Batching
# ----------------------------------------------------------------------------

@dataclass
class Batch:
    src: np.ndarray
    tgt: np.ndarray
    src_lens: np.ndarray
    tgt_lens: np.ndarray
    src_mask: np.ndarray = field(init=False)
    tgt_mask: np.ndarray = field(init=False)
    indices: np.ndarray = None

    def __post_init__(self):
        self.src_mask = np.arange(self.src.shape[1])[None, :] >= self.src_lens[:, None]
        self.tgt_mask = np.arange(self.tgt.shape[1])[None, :] >= self.tgt_lens[:, None]

    def __len__(self) -> int:
        return self.src.shape[0]

    @property
    def num_tokens(self) -> int:
        return len(self) * max(self.src.shape[1], self.tgt.shape[1])


def pad_sequences(seqs: Sequence[Sequence[int]], pad: int = PAD) -> tuple:
    lens = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), max(int(lens.max()), 1)), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lens


def make_batch(pairs: Sequence[tuple], indices=None) -> Batch:
    src, sl = pad_sequences([p[0] for p in pairs])
    tgt, tl = pad_sequences([p[1] for p in pairs])
    return Batch(src, tgt, sl, tl, indices=None if indices is None else np.asarray(indices))


def batchify(corpus: ParallelCorpus, max_tokens: int, seed: int = 0, epoch: int = 0) -> list:
    """Length-bucketed batches whose padded size stays within ``max_tokens``.

    A batch's size is ``rows * max(longest source, longest target)``. Sentence
    order within equal lengths and the order of batches are shuffled under
    ``(seed, epoch)``.
    """
    enc = corpus.encoded()
    rng = rng_streams.stream(seed, "batch", epoch)
    sizes = np.array([max(len(s), len(t)) for s, t in enc])
    order = np.lexsort((rng.random(len(enc)), sizes))
    groups, cur, cur_max = [], [], 0
    for i in order:
        m = max(cur_max, sizes[i])
        if cur and m * (len(cur) + 1) > max_tokens:
            groups.append(cur)
            cur, m = [], sizes[i]
        if not cur and sizes[i] > max_tokens:
            log.warning("sentence %d (size %d) exceeds max_tokens=%d; batched alone", i, sizes[i], max_tokens)
        cur.append(i)
        cur_max = m
    if cur:
        groups.append(cur)
    rng.shuffle(groups)
    return [make_batch([enc[i] for i in g], indices=g) for g in groups]


# ----------------------------------------------------------------------------
# Files
# ----------------------------------------------------------------------------

def write_corpus(corpus: ParallelCorpus, path) -> None:
    """Tab-separated pairs, space-separated tokens, one pair per line."""
    lines = [f"# provenance: {corpus.provenance}"]
    lines += [" ".join(s) + "\t" + " ".join(t) for s, t in corpus.pairs]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_corpus(path, vocab: Vocabulary) -> ParallelCorpus:
    provenance = "raw"
    pairs = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            if line.startswith("# provenance:"):
                provenance = line.split(":", 1)[1].strip()
            continue
        if line.count("\t") != 1:
            raise ContractError(f"{path}:{n}: expected exactly one tab separator")
        s, t = line.split("\t")
        pairs.append((s.split(), t.split()))
    corpus = ParallelCorpus(pairs, vocab, provenance)
    corpus.validate()
    return corpus


def git_blob_hash(path) -> str:
    """Content hash computed the way git hashes a blob."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
