"""BLEU, repetition rate, change rate, layer-wise BLEU and decode latency."""

from __future__ import annotations

import csv
import json
import math
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from dslp.errors import ContractError

MAX_ORDER = 4
METRICS_HEADER = ["model", "layer", "bleu", "repetition_rate", "change_rate", "latency_ms"]


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], smooth: bool = True) -> float:
    """Corpus-level BLEU-4 on tokenised sentences, in [0, 100].

    Clipped n-gram matches and candidate counts are summed over the corpus.
    With ``smooth`` the n >= 2 precisions use add-one counts, (m + 1) / (c + 1),
    which keeps short sentences from zeroing the score; unigram precision is
    never smoothed, so no unigram overlap gives 0.
    """
    if len(hypotheses) != len(references):
        raise ContractError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp, ref = list(hyp), list(ref)
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0 or matches[0] == 0:
        return 0.0
    log_p = 0.0
    for n in range(MAX_ORDER):
        m, c = matches[n], totals[n]
        if smooth and n > 0:
            m, c = m + 1, c + 1
        if m == 0 or c == 0:
            return 0.0
        log_p += math.log(m / c) / MAX_ORDER
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def repetition_counts(tokens: Sequence) -> tuple:
    """(adjacent repeats, adjacent pairs)."""
    tokens = list(tokens)
    reps = sum(1 for a, b in zip(tokens, tokens[1:]) if a == b)
    return reps, max(len(tokens) - 1, 0)


def repetition_rate(tokens: Sequence) -> float:
    """Fraction of positions t >= 2 whose token equals the previous one."""
    tokens = list(tokens)
    if not tokens:
        raise ContractError("repetition_rate of an empty sequence")
    reps, pairs = repetition_counts(tokens)
    return reps / pairs if pairs else 0.0


def corpus_repetition_rate(sentences: Sequence[Sequence]) -> float:
    """Token-weighted repetition rate over many sentences."""
    reps = pairs = 0
    for s in sentences:
        r, p = repetition_counts(s)
        reps += r
        pairs += p
    return reps / pairs if pairs else 0.0


def change_rate(layers: Sequence[Sequence]) -> list:
    """For layers 2..N, fraction of positions whose token differs from the previous layer.

    ``layers`` holds one equal-length token sequence per decoder layer.
    """
    if len(layers) < 2:
        raise ContractError("change_rate needs at least two layers")
    out = []
    for prev, cur in zip(layers, layers[1:]):
        if len(prev) != len(cur):
            raise ContractError("layers must have equal length")
        out.append(sum(a != b for a, b in zip(prev, cur)) / len(cur) if cur else 0.0)
    return out


def corpus_change_rate(traces: Sequence[Sequence[Sequence]]) -> list:
    """Position-weighted change rate per layer 2..N over many sentence traces."""
    n_layers = len(traces[0])
    changed = np.zeros(n_layers - 1)
    total = 0
    for layers in traces:
        total += len(layers[0])
        for n in range(1, n_layers):
            changed[n - 1] += sum(a != b for a, b in zip(layers[n - 1], layers[n]))
    return list(changed / total) if total else [0.0] * (n_layers - 1)


def layerwise_bleu(traces: Sequence[Sequence[Sequence]], references: Sequence[Sequence],
                   postprocess: Optional[Callable] = None, smooth: bool = True) -> list:
    """BLEU of every layer's output against ``references``.

    ``traces[i][n]`` is sentence ``i``'s token sequence at layer ``n + 1``;
    ``postprocess`` (e.g. CTC collapse) is applied to each sequence first.
    """
    if len(traces) != len(references):
        raise ContractError("traces and references differ in length")
    n_layers = len(traces[0])
    post = postprocess or (lambda s: list(s))
    return [bleu([post(t[n]) for t in traces], references, smooth) for n in range(n_layers)]


@dataclass
class MetricsRow:
    model: str
    layer: str
    bleu: Optional[float] = None
    repetition_rate: Optional[float] = None
    change_rate: Optional[float] = None
    latency_ms: Optional[float] = None

    def validate(self) -> None:
        if self.bleu is not None and not 0.0 <= self.bleu <= 100.0:
            raise ContractError(f"BLEU {self.bleu} outside [0, 100]")
        for r in (self.repetition_rate, self.change_rate):
            if r is not None and not 0.0 <= r <= 1.0:
                raise ContractError(f"rate {r} outside [0, 1]")


def write_metrics(rows: Sequence[MetricsRow], csv_path, json_path=None) -> None:
    """CSV with the fixed header plus an optional JSON mirror."""
    for r in rows:
        r.validate()
    with open(csv_path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in rows:
            w.writerow(["" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)
                        for v in (r.model, r.layer, r.bleu, r.repetition_rate, r.change_rate, r.latency_ms)])
    if json_path is not None:
        Path(json_path).write_text(json.dumps([asdict(r) for r in rows], indent=2) + "\n", encoding="utf-8")


def latency_bench(decoders: dict, sentences: Sequence, repeats: int = 1, warmup: int = 5) -> dict:
    """Median wall-clock milliseconds per single-sentence decode, per model.

    ``decoders`` maps a model id to a callable taking one source id list.
    Models are timed in interleaved order so that machine-load drift affects
    all of them alike; the first ``warmup`` calls per model are not timed.
    """
    names = list(decoders)
    for name in names:
        for s in sentences[:warmup]:
            decoders[name](s)
    samples = {n: [] for n in names}
    for _ in range(repeats):
        for s in sentences:
            for name in names:
                t0 = time.perf_counter()
                decoders[name](s)
                samples[name].append((time.perf_counter() - t0) * 1000.0)
    return {n: statistics.median(v) for n, v in samples.items()}
