"""Layer-wise trace files: one JSON record per sentence, plus a plain-text renderer.

A record looks like::

    {"index": 0, "src": [...], "ref": [...],
     "layers": [[...], ...],     # raw argmax tokens of every decoder layer
     "outputs": [[...], ...],    # the sentence each layer reads as (CTC: collapsed)
     "final": [...]}             # the decoded translation

Tokens are strings; the CTC blank is rendered as ``_``. ``outputs[-1]`` is
always identical to ``final``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

from dslp import tensor as T
from dslp.data import ParallelCorpus
from dslp.errors import ContractError
from dslp.metrics import MetricsRow, bleu, corpus_change_rate, corpus_repetition_rate
from dslp.train import decode, layer_postprocess
from dslp.transformer import ModelParams


def collect_traces(params: ModelParams, corpus: ParallelCorpus, batch_size: int = 64) -> list:
    """Decode ``corpus`` and build one trace record per sentence."""
    vocab = corpus.vocab
    enc = corpus.encoded()
    with T.no_grad():
        dec = decode(params, [s for s, _ in enc], full_trace=True, batch_size=batch_size)
    post = layer_postprocess(params)
    records = []
    for i, ((src, ref), layers, final) in enumerate(zip(corpus.pairs, dec.layers, dec.outputs)):
        outputs = [post(l) for l in layers[:-1]] + [final]
        records.append({
            "index": i,
            "src": list(src),
            "ref": list(ref),
            "layers": [vocab.decode(l, strip_special=False) for l in layers],
            "outputs": [vocab.decode(o) for o in outputs],
            "final": vocab.decode(final),
        })
    return records


def write_traces(records: Iterable[dict], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps(r, ensure_ascii=False) + "\n")
            n += 1
    return n


def read_traces(path) -> list:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    records = []
    for k, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            r = json.loads(line)
        except json.JSONDecodeError as e:
            raise ContractError(f"{path}:{k}: not a JSON record ({e})") from None
        missing = {"src", "ref", "layers", "outputs", "final"} - set(r)
        if missing:
            raise ContractError(f"{path}:{k}: record lacks {sorted(missing)}")
        records.append(r)
    if not records:
        raise ContractError(f"{path}: trace file is empty")
    return records


def render(record: dict, max_width: int = 100) -> str:
    """Per-layer table of one sentence: source, every layer's output, reference."""
    rows = [("Source", record["src"])]
    rows += [(f"Layer {n}", toks) for n, toks in enumerate(record["layers"], 1)]
    rows.append(("Reference", record["ref"]))
    label_w = max(len(r[0]) for r in rows) + 2
    out = []
    for label, toks in rows:
        text = " ".join(toks)
        if len(text) > max_width:
            text = text[: max_width - 3] + "..."
        out.append(f"{label + ':':<{label_w}}{text}")
    return "\n".join(out)


def render_many(records: Sequence[dict], indices: Optional[Sequence[int]] = None) -> str:
    chosen = records if indices is None else [records[i] for i in indices]
    return "\n\n".join(f"# sentence {r.get('index', '?')}\n{render(r)}" for r in chosen)


def trace_metrics(records: Sequence[dict], model_id: str, references: Optional[Sequence[Sequence[str]]] = None,
                  smooth: bool = True) -> list:
    """MetricsRow per layer (1..N) plus a ``final`` row for one trace file."""
    refs = [r["ref"] for r in records] if references is None else [list(r) for r in references]
    if len(refs) != len(records):
        raise ContractError(f"{len(records)} trace records vs {len(refs)} references")
    n_layers = len(records[0]["layers"])
    if any(len(r["layers"]) != n_layers for r in records):
        raise ContractError("trace records disagree on the number of layers")
    changes = corpus_change_rate([r["layers"] for r in records]) if n_layers > 1 else []
    rows = []
    for n in range(n_layers):
        outs = [r["outputs"][n] for r in records]
        rows.append(MetricsRow(model_id, str(n + 1), bleu(outs, refs, smooth), corpus_repetition_rate(outs),
                               float(changes[n - 1]) if n else None))
    finals = [r["final"] for r in records]
    rows.append(MetricsRow(model_id, "final", bleu(finals, refs, smooth), corpus_repetition_rate(finals)))
    return rows
