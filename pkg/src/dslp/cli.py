"""Command-line entry point: ``dslp <subcommand> [flags]``.

Exit codes: 0 success, 1 user error (bad flags, config or files), 2 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

import dslp
from dslp.data import (
    ParallelCorpus,
    Vocabulary,
    distill_corpus,
    gen_copy_task,
    gen_length_task,
    gen_multimodal_task,
    git_blob_hash,
    read_corpus,
    register_purity,
    write_corpus,
)
from dslp.errors import DslpError, NumericalAbort
from dslp.metrics import MetricsRow, latency_bench, write_metrics
from dslp.train import TrainConfig, decode, load_model, run_ablation_grid, save_model, train
from dslp.traces import collect_traces, read_traces, render_many, trace_metrics, write_traces

log = logging.getLogger("dslp")

EXIT_OK, EXIT_USER, EXIT_ABORT = 0, 1, 2


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USER, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------------
# Helpers
# ----------------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UserError(f"file not found: {p}")
    return p


def _hashes(paths) -> dict:
    return {str(p): git_blob_hash(p) for p in paths if p is not None and Path(p).is_file()}


def write_manifest(out: Path, args, config: Optional[dict] = None, inputs=(), outputs=()) -> None:
    """Record what produced the files in ``out``: command, flags, config, seed and content hashes."""
    manifest = {
        "command": args.command,
        "argv": list(getattr(args, "_argv", [])),
        "seed": getattr(args, "seed", None),
        "config": config,
        "inputs": _hashes(inputs),
        "outputs": _hashes(outputs),
        "version": dslp.__version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _data_files(data_dir) -> tuple:
    d = _require(data_dir)
    vocab_path = _require(d / "vocab.txt")
    train_path = _require(d / "train.tsv")
    dev_path = d / "dev.tsv"
    return vocab_path, train_path, dev_path if dev_path.exists() else None


def _checked_vocab(params, vocab: Vocabulary, what: str) -> None:
    if params.vocab is None:
        return
    model_vocab = Vocabulary(params.vocab[4:])
    if model_vocab != vocab:
        raise UserError(f"vocabulary mismatch: checkpoint vocab {model_vocab.content_hash()} "
                        f"vs {what} vocab {vocab.content_hash()}")


def _model_vocab(params) -> Vocabulary:
    if params.vocab is None:
        raise UserError("checkpoint carries no vocabulary; pass --vocab")
    return Vocabulary(params.vocab[4:])


def _load_corpus(path, vocab_path, params=None) -> ParallelCorpus:
    vocab = Vocabulary.load(_require(vocab_path)) if vocab_path else _model_vocab(params)
    if params is not None:
        _checked_vocab(params, vocab, str(vocab_path or path))
    return read_corpus(_require(path), vocab)


def _int_list(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------

GENERATORS = {
    "copy": lambda n, a: gen_copy_task(n, a.len_range or (3, 10), a.vocab_size, a.seed),
    "multimodal": lambda n, a: gen_multimodal_task(n, a.len_range or (3, 8), a.vocab_size, a.seed),
    "length": lambda n, a: gen_length_task(n, a.seed, a.len_range or (2, 6)),
}


def cmd_gen_data(args) -> int:
    out = _out_dir(args)
    full = GENERATORS[args.task](args.n + args.dev_n, args)
    train_c = ParallelCorpus(full.pairs[: args.n], full.vocab, full.provenance)
    dev_c = ParallelCorpus(full.pairs[args.n:], full.vocab, full.provenance)
    full.vocab.save(out / "vocab.txt")
    write_corpus(train_c, out / "train.tsv")
    files = [out / "vocab.txt", out / "train.tsv"]
    if len(dev_c):
        write_corpus(dev_c, out / "dev.tsv")
        files.append(out / "dev.tsv")
    config = {"task": args.task, "n": args.n, "dev_n": args.dev_n, "vocab_size": args.vocab_size,
              "len_range": args.len_range}
    write_manifest(out, args, config, outputs=files)
    print(f"wrote {len(train_c)} train / {len(dev_c)} dev pairs to {out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.load(_require(args.config), args.override)
    else:
        from dslp.train import apply_overrides
        cfg = TrainConfig.from_dict(apply_overrides({}, args.override))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(args)
    vocab_path, train_path, dev_path = _data_files(args.data)
    vocab = Vocabulary.load(vocab_path)
    corpus = read_corpus(train_path, vocab)
    dev = read_corpus(dev_path, vocab) if dev_path else None
    out = _out_dir(args)
    args.seed = cfg.seed
    try:
        params, report = train(cfg, corpus, dev)
    except NumericalAbort as e:
        (out / "abort.json").write_text(json.dumps({"error": str(e), **e.diagnostics}, indent=1) + "\n",
                                        encoding="utf-8")
        write_manifest(out, args, cfg.to_dict(), [vocab_path, train_path, dev_path], [out / "abort.json"])
        raise
    save_model(params, out / "model.ckpt")
    report.write_csv(out / "report.csv")
    write_manifest(out, args, cfg.to_dict(), [vocab_path, train_path, dev_path],
                   [out / "model.ckpt", out / "report.csv"])
    final = report.final_bleu
    print(f"trained {cfg.max_steps} steps; final loss {report.losses[-1] if report.losses else float('nan'):.4f}"
          + ("" if final is None else f"; dev BLEU {final:.2f}"))
    return EXIT_OK


def cmd_distill(args) -> int:
    teacher = load_model(_require(args.teacher))
    if teacher.meta.get("base") != "ar_teacher":
        raise UserError(f"{args.teacher} is not an autoregressive teacher checkpoint")
    vocab_path, train_path, dev_path = _data_files(args.data)
    corpus = _load_corpus(train_path, vocab_path, teacher)
    distilled = distill_corpus(corpus, teacher)
    out = _out_dir(args)
    corpus.vocab.save(out / "vocab.txt")
    write_corpus(distilled, out / "train.tsv")
    files = [out / "vocab.txt", out / "train.tsv"]
    if dev_path is not None:
        # The dev references stay untouched: models are scored against real targets.
        (out / "dev.tsv").write_bytes(dev_path.read_bytes())
        files.append(out / "dev.tsv")
    write_manifest(out, args, {"teacher": str(args.teacher)}, [args.teacher, vocab_path, train_path], files)
    print(f"distilled {len(distilled)} pairs; register purity raw {register_purity(corpus):.3f} "
          f"-> distilled {register_purity(distilled):.3f}")
    return EXIT_OK


def cmd_translate(args) -> int:
    params = load_model(_require(args.checkpoint))
    vocab = Vocabulary.load(_require(args.vocab)) if args.vocab else _model_vocab(params)
    _checked_vocab(params, vocab, str(args.vocab or args.checkpoint))
    lines = _require(args.input).read_text(encoding="utf-8").splitlines()
    srcs = [vocab.encode(l.split("\t")[0].split()) for l in lines if l.strip() and not l.startswith("#")]
    outs = decode(params, srcs).outputs
    text = "\n".join(" ".join(vocab.decode(o)) for o in outs) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_trace(args) -> int:
    params = load_model(_require(args.checkpoint))
    corpus = _load_corpus(args.corpus, args.vocab, params)
    records = collect_traces(params, corpus)
    out = _out_dir(args)
    n = write_traces(records, out / "traces.jsonl")
    write_manifest(out, args, None, [args.checkpoint, args.corpus, args.vocab], [out / "traces.jsonl"])
    if args.render is not None:
        idx = args.render or [0]
        bad = [i for i in idx if not 0 <= i < n]
        if bad:
            raise UserError(f"--render indices {bad} outside [0, {n})")
        print(render_many(records, idx))
    print(f"wrote {n} trace records to {out / 'traces.jsonl'}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    ids = args.model_ids or [Path(p).parent.name or Path(p).stem for p in args.traces]
    if len(ids) != len(args.traces):
        raise UserError("--model-ids must name every trace file")
    refs = None
    if args.references:
        refs = [l.split() for l in _require(args.references).read_text(encoding="utf-8").splitlines() if l.strip()]
    rows = []
    for model_id, path in zip(ids, args.traces):
        rows += trace_metrics(read_traces(_require(path)), model_id, refs, smooth=not args.no_smoothing)
    out = _out_dir(args)
    write_metrics(rows, out / "metrics.csv", out / "metrics.json")
    write_manifest(out, args, {"smoothing": not args.no_smoothing}, [*args.traces, args.references],
                   [out / "metrics.csv", out / "metrics.json"])
    for r in rows:
        if r.layer == "final":
            print(f"{r.model}: BLEU {r.bleu:.2f}  repetition {r.repetition_rate:.3f}")
    return EXIT_OK


def cmd_bench(args) -> int:
    models = {}
    for path in args.checkpoints:
        params = load_model(_require(path))
        models[Path(path).parent.name or Path(path).stem] = params
    first = next(iter(models.values()))
    corpus = _load_corpus(args.corpus, args.vocab, first)
    for name, p in models.items():
        _checked_vocab(p, corpus.vocab, name)
    srcs = [s for s, _ in corpus.encoded()][: args.n]
    decoders = {name: (lambda s, p=p: decode(p, [s])) for name, p in models.items()}
    lat = latency_bench(decoders, srcs, repeats=args.repeats, warmup=args.warmup)
    base = args.baseline or next(iter(models))
    if base not in lat:
        raise UserError(f"--baseline {base!r} is not one of {list(lat)}")
    out = _out_dir(args)
    rows = [MetricsRow(name, "final", latency_ms=ms) for name, ms in lat.items()]
    write_metrics(rows, out / "latency.csv", out / "latency.json")
    write_manifest(out, args, {"n": len(srcs), "repeats": args.repeats, "warmup": args.warmup},
                   [*args.checkpoints, args.corpus], [out / "latency.csv"])
    for name, ms in lat.items():
        print(f"{name}: {ms:.3f} ms/sentence ({ms / lat[base]:.3f}x {base})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    vocab_path, train_path, dev_path = _data_files(args.data)
    if dev_path is None:
        raise UserError(f"{args.data} has no dev.tsv to score the ablation on")
    vocab = Vocabulary.load(vocab_path)
    corpus, dev = read_corpus(train_path, vocab), read_corpus(dev_path, vocab)
    out = _out_dir(args)
    rows = run_ablation_grid(corpus, dev, cfg, bases=args.bases, variants=args.variants,
                             layer_counts=args.layers, seeds=args.seeds or [cfg.seed],
                             metrics_csv=out / "metrics.csv", metrics_json=out / "metrics.json")
    write_manifest(out, args, cfg.to_dict(), [vocab_path, train_path, dev_path],
                   [out / "metrics.csv", out / "metrics.json"])
    for r in rows:
        print(f"{r.model_id}: BLEU {r.bleu:.2f}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------------

def _len_range(text: str) -> tuple:
    vals = _int_list(text)
    if len(vals) != 2 or not 1 <= vals[0] <= vals[1]:
        raise argparse.ArgumentTypeError(f"expected LO,HI with 1 <= LO <= HI, got {text!r}")
    return tuple(vals)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed for every random stream")
    common.add_argument("--out", help="output directory (created if missing)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    configured = _Parser(add_help=False)
    configured.add_argument("--config", help="JSON training config")
    configured.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                            help="dotted-path config override, e.g. dslp.mixing_ratio=0.3 (repeatable)")

    p = _Parser(prog="dslp", description="Layer-wise prediction NAT toolkit.")
    p.add_argument("--version", action="version", version=f"dslp {dslp.__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    g.add_argument("--task", choices=sorted(GENERATORS), required=True)
    g.add_argument("--n", type=int, default=2000, help="training pairs")
    g.add_argument("--dev-n", type=int, default=200, help="dev pairs")
    g.add_argument("--vocab-size", type=int, default=16)
    g.add_argument("--len-range", type=_len_range, default=None, metavar="LO,HI")
    g.set_defaults(func=cmd_gen_data, seed=0)

    t = sub.add_parser("train", parents=[common, configured], help="train a teacher, NAT or CTC model")
    t.add_argument("--data", required=True, help="directory with vocab.txt, train.tsv and optional dev.tsv")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("distill", parents=[common], help="replace training targets by teacher outputs")
    d.add_argument("--teacher", required=True, help="AR teacher checkpoint")
    d.add_argument("--data", required=True)
    d.set_defaults(func=cmd_distill)

    tr = sub.add_parser("translate", parents=[common], help="decode source sentences")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--input", required=True, help="one tokenised source per line (TSV: source column)")
    tr.add_argument("--vocab", help="vocabulary file (default: the checkpoint's)")
    tr.set_defaults(func=cmd_translate)

    tc = sub.add_parser("trace", parents=[common], help="dump layer-wise predictions")
    tc.add_argument("--checkpoint", required=True)
    tc.add_argument("--corpus", required=True, help="corpus TSV")
    tc.add_argument("--vocab", help="vocabulary file (default: the checkpoint's)")
    tc.add_argument("--render", type=_int_list, nargs="?", const=[], default=None, metavar="I,J",
                    help="print the per-layer table of these sentence indices (default 0)")
    tc.set_defaults(func=cmd_trace)

    a = sub.add_parser("analyze", parents=[common], help="metrics table from trace files")
    a.add_argument("--traces", nargs="+", required=True)
    a.add_argument("--model-ids", nargs="+", help="one id per trace file (default: parent directory names)")
    a.add_argument("--references", help="tokenised references, one per line (default: those in the traces)")
    a.add_argument("--no-smoothing", action="store_true", help="strict BLEU without add-one smoothing")
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bench", parents=[common], help="single-sentence decode latency")
    b.add_argument("--checkpoints", nargs="+", required=True)
    b.add_argument("--corpus", required=True)
    b.add_argument("--vocab")
    b.add_argument("--n", type=int, default=200, help="sentences to time")
    b.add_argument("--repeats", type=int, default=1)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--baseline", help="model id the others are compared with")
    b.set_defaults(func=cmd_bench)

    ab = sub.add_parser("ablate", parents=[common, configured], help="vanilla/LP/DS/DSLP grid")
    ab.add_argument("--data", required=True)
    ab.add_argument("--bases", nargs="+", default=["nat"], choices=["nat", "ctc"])
    ab.add_argument("--variants", nargs="+", default=["vanilla", "lp", "ds", "dslp"],
                    choices=["vanilla", "lp", "ds", "dslp"])
    ab.add_argument("--layers", type=_int_list, default=[6], metavar="N,M")
    ab.add_argument("--seeds", type=_int_list, default=None, metavar="S,T")
    ab.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args._argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.out is None and args.command not in ("translate",):
        print(f"dslp {args.command}: error: --out is required", file=sys.stderr)
        return EXIT_USER
    try:
        return args.func(args)
    except NumericalAbort as e:
        print(f"dslp {args.command}: numerical abort: {e}", file=sys.stderr)
        return EXIT_ABORT
    except (UserError, DslpError, OSError) as e:
        print(f"dslp {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
