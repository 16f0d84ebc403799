"""Training loops for the AR teacher, NAT and CTC models, plus the ablation grid.

All randomness is derived from ``TrainConfig.seed`` through named streams:
``init`` (parameters), ``batch`` (bucketing/shuffling), ``dropout`` and
``mixing``. Two runs that differ only in a DSLP flag therefore share their
initialisation and batch order.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from dslp import rng as rng_streams
from dslp import tensor as T
from dslp.checkpoint import load_checkpoint, save_checkpoint
from dslp.ctc import CtcConfig, collapse, ctc_decode_batch, ctc_dslp_step
from dslp.data import BLANK, BOS, EOS, PAD, ParallelCorpus, batchify
from dslp.dslp import DslpConfig, deep_supervised_loss, dslp_forward, loss_mask, sample_mix_mask, anneal_schedule
from dslp.errors import ConfigError, ContractError, NonFiniteError, NumericalAbort
from dslp.metrics import MetricsRow, bleu, corpus_repetition_rate, write_metrics
from dslp.nat import length_logits, length_loss, nat_decode_batch, nat_loss, LENGTH_LOSS_WEIGHT
from dslp.tensor import AdamState, adam_step, inverse_sqrt_lr
from dslp.transformer import ModelConfig, ModelParams, ar_forward, ar_teacher_decode_batch, encode, init_params, \
    teacher_inputs

log = logging.getLogger(__name__)

BASES = ("nat", "ctc", "ar_teacher")
VARIANTS = {
    "vanilla": (False, False),
    "lp": (True, False),
    "ds": (False, True),
    "dslp": (True, True),
}


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    base: str = "nat"
    dslp: DslpConfig = field(default_factory=DslpConfig)
    ctc: CtcConfig = field(default_factory=CtcConfig)
    lr: float = 5e-4
    warmup_steps: int = 200
    max_steps: int = 1000
    seed: int = 0
    dropout: float = 0.0
    label_smoothing: float = 0.1
    weight_decay: float = 0.01
    clip_norm: float = 0.0
    max_tokens: int = 256
    eval_every: int = 0
    dtype: str = "float64"

    def validate(self) -> None:
        if self.base not in BASES:
            raise ConfigError(f"base must be one of {BASES}, got {self.base!r}")
        if self.base == "ar_teacher" and (self.dslp.enable_lp or self.dslp.enable_ds or self.dslp.mixing_ratio):
            raise ConfigError("the AR teacher cannot use layer-wise prediction, deep supervision or mixing")
        if self.max_steps < 0 or self.warmup_steps < 1:
            raise ConfigError("max_steps must be >= 0 and warmup_steps >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be positive")
        self.dslp.validate()
        self.ctc.validate()
        self.resolved_model().validate()

    def resolved_model(self) -> ModelConfig:
        """Model config with the structural switches implied by ``base`` and ``dslp``."""
        return replace(
            self.model,
            dropout=self.dropout,
            causal_decoder=self.base == "ar_teacher",
            with_fusion=self.dslp.enable_lp,
            with_length_head=self.base == "nat",
        )

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        d["dslp"] = DslpConfig.from_dict(d.get("dslp", {}))
        ctc = d.get("ctc", {})
        unknown = set(ctc) - {f.name for f in fields(CtcConfig)}
        if unknown:
            raise ConfigError(f"unknown ctc config keys: {sorted(unknown)}")
        d["ctc"] = CtcConfig(**ctc)
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, path, overrides: Sequence[str] = ()) -> "TrainConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(apply_overrides(raw, overrides))


def _parse_scalar(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        if raw in ("True", "False"):
            return raw == "True"
        return raw


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` overrides to a nested dict (values parsed as JSON when possible)."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = _parse_scalar(raw.strip())
    return d


@dataclass
class ReportRow:
    step: int
    loss: float
    layer_losses: list
    dev_bleu: Optional[float]
    dev_repetition: Optional[float]
    wall_clock: float


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    losses: list = field(default_factory=list)  # loss of every step
    skipped_samples: int = 0

    def add(self, row: ReportRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise ContractError(f"report step {row.step} is not after {self.rows[-1].step}")
        self.rows.append(row)

    @property
    def final_bleu(self) -> Optional[float]:
        for r in reversed(self.rows):
            if r.dev_bleu is not None:
                return r.dev_bleu
        return None

    def write_csv(self, path) -> None:
        n_layers = max((len(r.layer_losses) for r in self.rows), default=0)
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "loss", *[f"loss_layer{i + 1}" for i in range(n_layers)],
                        "dev_bleu", "dev_repetition", "wall_clock"])
            for r in self.rows:
                layers = list(r.layer_losses) + [""] * (n_layers - len(r.layer_losses))
                w.writerow([r.step, r.loss, *layers,
                            "" if r.dev_bleu is None else r.dev_bleu,
                            "" if r.dev_repetition is None else r.dev_repetition, round(r.wall_clock, 3)])


# ----------------------------------------------------------------------------
# Per-base losses
# ----------------------------------------------------------------------------

def nat_step_loss(params: ModelParams, batch, dcfg: DslpConfig, ratio: float, mix_rng, smoothing: float,
                  training: bool = True, rng=None, mixing: bool = True) -> tuple:
    """Loss of a NAT(-DSLP) step: last-layer or deep-supervised NLL plus the length term.

    With ``mixing`` and layer-wise prediction enabled, a Bernoulli(``ratio``)
    mask decides which feedback slots receive the reference token; those slots
    are excluded from the likelihood terms. Returns ``(loss, per_layer)``.
    """
    enc = encode(batch.src, params, batch.src_mask, training, rng)
    tmask = batch.tgt_mask
    target = np.where(tmask, 0, batch.tgt)
    gt = mix = None
    if mixing and dcfg.enable_lp:
        mix = sample_mix_mask(tmask.shape, ratio, mix_rng) & ~tmask
        gt = target
    trace = dslp_forward(params, None, tmask, dcfg, gt, mix, training=training, rng=rng, enc=enc)
    if dcfg.enable_ds:
        loss, per_layer = deep_supervised_loss(trace, target, mix, dcfg, smoothing)
    else:
        loss = nat_loss(trace.final_logits, target, smoothing, loss_mask(tmask, mix))
        per_layer = [float(loss.data)]
    len_term = length_loss(length_logits(params, enc), batch.tgt_lens)
    return T.add(loss, T.scale(len_term, LENGTH_LOSS_WEIGHT)), per_layer


def ar_step_loss(params: ModelParams, batch, smoothing: float, training: bool = True, rng=None) -> tuple:
    inp, out, mask = teacher_inputs(batch.tgt, batch.tgt_lens)
    logits = ar_forward(params, batch.src, inp, batch.src_mask, mask, training, rng)
    loss = T.nll_label_smoothed(logits, out, smoothing, mask)
    return loss, [float(loss.data)]


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------

def _clip(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        k = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= k
    return norm


def _batch_diagnostics(batch, step: int, loss=None) -> dict:
    return {
        "step": step,
        "loss": None if loss is None else float(loss),
        "indices": None if batch.indices is None else [int(i) for i in batch.indices],
        "src": batch.src.tolist(),
        "tgt": batch.tgt.tolist(),
    }


def model_meta(cfg: TrainConfig) -> dict:
    """Decode-relevant settings stored in checkpoint headers."""
    return {
        "base": cfg.base,
        "enable_lp": str(cfg.dslp.enable_lp),
        "enable_ds": str(cfg.dslp.enable_ds),
        "upsample": str(cfg.ctc.upsample),
    }


def train(cfg: TrainConfig, corpus: ParallelCorpus, dev: Optional[ParallelCorpus] = None,
          mixing: Optional[bool] = None, params: Optional[ModelParams] = None,
          on_step: Optional[Callable] = None) -> tuple:
    """Train a model from scratch (or from ``params``) and return ``(params, report)``.

    Args:
        cfg: training configuration; validated here.
        corpus: training pairs, encoded with ``corpus.vocab``.
        dev: optional held-out pairs scored every ``cfg.eval_every`` steps and
            at the end.
        mixing: draw the Bernoulli feedback mask (default: whenever layer-wise
            prediction is on). ``False`` runs the plain DSLP objective.
        params: warm start; must match ``cfg``'s model.
        on_step: ``on_step(step, params, grads, loss)`` hook after each backward.

    Raises:
        NumericalAbort: the loss or any intermediate became non-finite; the
            ``diagnostics`` attribute holds the offending batch.
    """
    cfg.validate()
    # The output layer is sized by the corpus vocabulary, whatever model.vocab_size says.
    mcfg = replace(cfg.resolved_model(), vocab_size=len(corpus.vocab))
    corpus.validate(mcfg.max_len)
    dtype = np.dtype(cfg.dtype)
    if params is None:
        params = init_params(mcfg, cfg.seed, dtype)
    elif params.config != mcfg:
        raise ConfigError("warm-start parameters do not match the configured model")
    params.vocab = list(corpus.vocab.itos)
    params.meta = model_meta(cfg)
    mixing = cfg.dslp.enable_lp if mixing is None else mixing

    report = TrainReport()
    state = AdamState()
    t0 = time.perf_counter()
    step, epoch = 0, 0
    while step < cfg.max_steps:
        batches = batchify(corpus, cfg.max_tokens, cfg.seed, epoch)
        epoch += 1
        for batch in batches:
            if step >= cfg.max_steps:
                break
            step += 1
            loss, per_layer, grads = _train_step(params, batch, cfg, step, mixing, report)
            if loss is None:
                continue
            if on_step is not None:
                on_step(step, params, grads, loss)
            _clip(grads, cfg.clip_norm)
            adam_step(params.tensors, grads, state, inverse_sqrt_lr(step, cfg.lr, cfg.warmup_steps),
                      weight_decay=cfg.weight_decay)
            report.losses.append(loss)
            last = step == cfg.max_steps
            if (cfg.eval_every and step % cfg.eval_every == 0) or last:
                dev_bleu = dev_rep = None
                if dev is not None and len(dev):
                    dev_bleu, dev_rep = evaluate(params, dev)
                report.add(ReportRow(step, loss, per_layer, dev_bleu, dev_rep, time.perf_counter() - t0))
                log.info("step %d loss %.4f dev_bleu %s", step, loss, dev_bleu)
    return params, report


def _train_step(params: ModelParams, batch, cfg: TrainConfig, step: int, mixing: bool, report: TrainReport):
    drop_rng = rng_streams.stream(cfg.seed, "dropout", step)
    mix_rng = rng_streams.stream(cfg.seed, "mixing", step)
    ratio = cfg.dslp.mixing_ratio
    if cfg.dslp.anneal_lambda:
        ratio = anneal_schedule(step, cfg.max_steps, ratio)
    params.zero_grad()
    # Overflow is reported through NonFiniteError below, so numpy's warnings are redundant.
    try:
        with T.fresh_tape(), np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            if cfg.base == "nat":
                loss, per_layer = nat_step_loss(params, batch, cfg.dslp, ratio, mix_rng, cfg.label_smoothing,
                                                rng=drop_rng, mixing=mixing)
            elif cfg.base == "ctc":
                loss, per_layer, keep = ctc_dslp_step(params, batch, cfg.dslp, cfg.ctc, ratio if mixing else 0.0,
                                                      mix_rng, rng=drop_rng)
                report.skipped_samples += len(batch) - len(keep)
                if loss is None:
                    return None, None, None
            else:
                loss, per_layer = ar_step_loss(params, batch, cfg.label_smoothing, rng=drop_rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteError(f"loss is {value}")
            T.backward(loss)
    except NonFiniteError as e:
        raise NumericalAbort(f"non-finite value at step {step}: {e}", _batch_diagnostics(batch, step)) from e
    grads = {k: p.grad for k, p in params.tensors.items()}
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericalAbort(f"non-finite gradient for {name} at step {step}",
                                 _batch_diagnostics(batch, step, value))
    return value, per_layer, grads


# ----------------------------------------------------------------------------
# Decoding and evaluation
# ----------------------------------------------------------------------------

_RESERVED_IDS = frozenset((PAD, BOS, EOS, BLANK))


def strip_reserved(tokens) -> list:
    return [int(t) for t in tokens if int(t) not in _RESERVED_IDS]


@dataclass
class Decoded:
    outputs: list  # final token ids per sentence (CTC outputs collapsed), reserved ids removed
    layers: Optional[list] = None  # per sentence: per-layer raw token ids


def decoder_settings(params: ModelParams) -> tuple:
    """(base, DslpConfig, CtcConfig) recorded in ``params.meta``."""
    meta = params.meta
    base = meta.get("base", "nat")
    if base not in BASES:
        raise ConfigError(f"unknown base {base!r} in model metadata")
    dcfg = DslpConfig(enable_lp=meta.get("enable_lp") == "True", enable_ds=meta.get("enable_ds") == "True")
    return base, dcfg, CtcConfig(upsample=int(meta.get("upsample", 2)))


def decode(params: ModelParams, srcs: Sequence[Sequence[int]], full_trace: bool = False,
           batch_size: int = 64) -> Decoded:
    """Translate id lists with the decoder matching ``params.meta['base']``."""
    base, dcfg, ccfg = decoder_settings(params)
    if full_trace and base == "ar_teacher":
        raise ContractError("layer-wise traces are only defined for NAT and CTC models")
    outputs, layers = [], [] if full_trace else None
    for i in range(0, len(srcs), batch_size):
        chunk = [list(s) for s in srcs[i:i + batch_size]]
        if base == "ar_teacher":
            outputs.extend(ar_teacher_decode_batch(params, chunk))
            continue
        if base == "nat":
            outs, trace, lens = nat_decode_batch(params, chunk, dcfg, full_trace)
        else:
            outs, trace, lens = ctc_decode_batch(params, chunk, dcfg, ccfg, full_trace)
        outputs.extend(strip_reserved(o) for o in outs)
        if full_trace:
            for b in range(len(chunk)):
                n = int(lens[b])
                layers.append([[int(x) for x in tok[b, :n]] for tok in trace.tokens])
    return Decoded(outputs, layers)


def layer_postprocess(params: ModelParams) -> Callable:
    """Turns one layer's raw token ids into a sentence (CTC: collapse); reserved ids are dropped."""
    base, _, ccfg = decoder_settings(params)
    if base == "ctc":
        return lambda toks: strip_reserved(collapse(toks, ccfg.blank))
    return strip_reserved


def evaluate(params: ModelParams, dev: ParallelCorpus) -> tuple:
    """(BLEU, repetition rate) of greedy outputs on ``dev``."""
    enc = dev.encoded()
    with T.no_grad():
        outs = decode(params, [s for s, _ in enc]).outputs
    return bleu(outs, [t for _, t in enc]), corpus_repetition_rate(outs)


def save_model(params: ModelParams, path) -> None:
    save_checkpoint(params, path)


def load_model(path, expected: Optional[ModelParams] = None) -> ModelParams:
    return load_checkpoint(path, expected)


# ----------------------------------------------------------------------------
# Ablation grid
# ----------------------------------------------------------------------------

@dataclass
class AblationRow:
    base: str
    variant: str
    layers: int
    seed: int
    bleu: float
    repetition_rate: float

    @property
    def model_id(self) -> str:
        return f"{self.base}-{self.variant}-{self.layers}L-s{self.seed}"


def variant_config(cfg: TrainConfig, base: str, variant: str, layers: int, seed: int) -> TrainConfig:
    """``cfg`` switched to one ablation cell; mixing is kept only where feedback exists."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {list(VARIANTS)}")
    lp, ds = VARIANTS[variant]
    dslp = replace(cfg.dslp, enable_lp=lp, enable_ds=ds, mixing_ratio=cfg.dslp.mixing_ratio if lp else 0.0)
    return replace(cfg, base=base, seed=seed, dslp=dslp, model=replace(cfg.model, num_decoder_layers=layers))


def run_ablation_grid(corpus: ParallelCorpus, dev: ParallelCorpus, cfg: TrainConfig,
                      bases: Sequence[str] = ("nat",), variants: Sequence[str] = tuple(VARIANTS),
                      layer_counts: Sequence[int] = (6,), seeds: Sequence[int] = (0,),
                      metrics_csv=None, metrics_json=None) -> list:
    """Train every (base, variant, layers, seed) cell and score it on ``dev``."""
    rows = []
    for base in bases:
        for layers in layer_counts:
            for variant in variants:
                for seed in seeds:
                    vcfg = variant_config(cfg, base, variant, layers, seed)
                    params, _ = train(vcfg, corpus)
                    score, rep = evaluate(params, dev)
                    rows.append(AblationRow(base, variant, layers, seed, score, rep))
                    log.info("ablation %s: BLEU %.2f", rows[-1].model_id, score)
    if metrics_csv is not None:
        write_metrics([MetricsRow(r.model_id, "final", r.bleu, r.repetition_rate) for r in rows],
                      metrics_csv, metrics_json)
    return rows
