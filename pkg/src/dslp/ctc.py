"""CTC base model: alignment marginalisation, Viterbi alignment, collapse decoding.

The decoder emits ``k * T_x`` slots over the full vocabulary, which already
contains the reserved blank id. A slot sequence (an *alignment*) yields a
sentence by merging adjacent duplicates and then deleting blanks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from dslp import tensor as T
from dslp.data import BLANK, BOS, EOS, PAD
from dslp.dslp import DslpConfig, dslp_forward, fill_trace_heads, sample_mix_mask
from dslp.errors import ConfigError, InfeasibleAlignmentError
from dslp.tensor import Tensor, make_op
from dslp.tensor.ops import _log_softmax_np
from dslp.transformer import ModelParams, encode

log = logging.getLogger(__name__)


@dataclass
class CtcConfig:
    upsample: int = 2
    blank: int = BLANK

    def validate(self) -> None:
        if self.upsample < 2:
            raise ConfigError(f"upsample factor must be >= 2, got {self.upsample}")


def collapse(alignment: Sequence[int], blank: int = BLANK) -> list:
    """Merge runs of identical tokens, then drop blanks."""
    out, prev = [], None
    for a in alignment:
        a = int(a)
        if a != prev and a != blank:
            out.append(a)
        prev = a
    return out


def min_slots(target: Sequence[int]) -> int:
    """Fewest slots able to emit ``target`` (repeats need a separating blank)."""
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def _check_feasible(n_slots: int, target: Sequence[int]) -> None:
    need = min_slots(target)
    if n_slots < need:
        raise InfeasibleAlignmentError(f"{n_slots} slots cannot emit a target needing {need}")


def _expand(target: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _skip_allowed(ext: np.ndarray, blank: int) -> np.ndarray:
    """Whether state s may be entered directly from s-2."""
    allow = np.zeros(len(ext), dtype=bool)
    allow[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    return allow


def _logsumexp3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def ctc_forward_backward(log_probs: np.ndarray, target: Sequence[int], blank: int = BLANK,
                         with_grad: bool = True) -> tuple:
    """Log-space alpha/beta recursions over the blank-interleaved target.

    Returns ``(log_likelihood, grad)`` where ``grad`` is d(-log p)/d(logits)
    for logits whose log-softmax is ``log_probs``. Without ``with_grad`` only
    the alpha pass runs and ``grad`` is None.
    """
    n_t, _ = log_probs.shape
    target = [int(x) for x in target]
    _check_feasible(n_t, target)
    ext = _expand(target, blank)
    s_len = len(ext)
    skip = _skip_allowed(ext, blank)
    neg = -np.inf
    emit = log_probs[:, ext]  # [T, S]

    alpha = np.full((n_t, s_len), neg)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, n_t):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([neg], prev[:-1]))
        jump = np.where(skip, np.concatenate(([neg, neg], prev[:-2])), neg)
        alpha[t] = _logsumexp3(stay, step, jump) + emit[t]

    tail = alpha[-1, -1] if s_len == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    log_like = float(tail)
    if not np.isfinite(log_like):
        raise InfeasibleAlignmentError("target has zero probability under the model")
    if not with_grad:
        return log_like, None

    beta = np.full((n_t, s_len), neg)
    beta[-1, -1] = emit[-1, -1]
    if s_len > 1:
        beta[-1, -2] = emit[-1, -2]
    skip_from = np.zeros(s_len, dtype=bool)
    skip_from[:-2] = skip[2:]
    for t in range(n_t - 2, -1, -1):
        nxt = beta[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [neg]))
        jump = np.where(skip_from, np.concatenate((nxt[2:], [neg, neg])), neg)
        beta[t] = _logsumexp3(stay, step, jump) + emit[t]

    # Posterior slot occupancy: gamma[t, s] = alpha * beta / (p * emit).
    gamma = np.exp(alpha + beta - emit - log_like)
    occ = np.zeros_like(log_probs)
    for s, k in enumerate(ext):
        occ[:, k] += gamma[:, s]
    grad = np.exp(log_probs) - occ
    return log_like, grad


def ctc_loss(logits: Tensor, target: Sequence[int], blank: int = BLANK) -> Tensor:
    """-log Σ_{a: collapse(a) = target} Π_t p_t(a_t) for one sentence, logits [T_y, V]."""
    ld = logits.data
    if ld.ndim != 2:
        raise ConfigError("ctc_loss expects [T_y, V] logits; use ctc_loss_batch for batches")
    ll, grad = ctc_forward_backward(_log_softmax_np(ld, -1), target, blank, T.grad_enabled())
    return make_op(np.asarray(-ll, dtype=ld.dtype), (logits,), lambda g: (grad * g,), "ctc_loss")


def ctc_loss_batch(logits: Tensor, slot_lens: np.ndarray, targets: Sequence[Sequence[int]],
                   blank: int = BLANK) -> Tensor:
    """Batch CTC loss normalised per target token: Σ_b loss_b / Σ_b |y_b|."""
    ld = logits.data
    ls = _log_softmax_np(ld, -1)
    need_grad = T.grad_enabled()
    grad = np.zeros_like(ld)
    total, n_tok = 0.0, sum(len(t) for t in targets)
    for b, tgt in enumerate(targets):
        n = int(slot_lens[b])
        ll, gb = ctc_forward_backward(ls[b, :n], tgt, blank, need_grad)
        total -= ll
        if need_grad:
            grad[b, :n] = gb
    scale = 1.0 / max(n_tok, 1)
    grad *= scale
    return make_op(np.asarray(total * scale, dtype=ld.dtype), (logits,), lambda g: (grad * g,), "ctc_loss")


def viterbi_alignment(log_probs: np.ndarray, target: Sequence[int], blank: int = BLANK) -> tuple:
    """Max-product path through the expanded-target lattice: ``(alignment, log score)``.

    Among equal-scoring predecessors the one with the lowest lattice index wins.
    """
    n_t, _ = log_probs.shape
    target = [int(x) for x in target]
    _check_feasible(n_t, target)
    ext = _expand(target, blank)
    s_len = len(ext)
    skip = _skip_allowed(ext, blank)
    neg = -np.inf
    emit = log_probs[:, ext]
    score = np.full((n_t, s_len), neg)
    back = np.zeros((n_t, s_len), dtype=np.int64)
    score[0, 0] = emit[0, 0]
    if s_len > 1:
        score[0, 1] = emit[0, 1]
    idx = np.arange(s_len)
    # Rows: entered from s-2, from s-1, stayed; argmax picks the lowest index on ties.
    cands = np.full((3, s_len), neg)
    no_skip = ~skip
    for t in range(1, n_t):
        prev = score[t - 1]
        cands[0, 2:] = prev[:-2]
        cands[0, no_skip] = neg
        cands[1, 1:] = prev[:-1]
        cands[2] = prev
        choice = np.argmax(cands, axis=0)
        score[t] = cands[choice, idx] + emit[t]
        back[t] = idx - 2 + choice
    if s_len > 1 and score[-1, -2] > score[-1, -1]:
        s = s_len - 2
    else:
        s = s_len - 1
    best = float(score[-1, s])
    if not np.isfinite(best):
        raise InfeasibleAlignmentError("no finite-probability alignment")
    path = [0] * n_t
    for t in range(n_t - 1, -1, -1):
        path[t] = int(ext[s])
        s = back[t, s]
    return path, best


def best_alignment(logits: np.ndarray, target: Sequence[int], blank: int = BLANK) -> list:
    """Most probable alignment of ``target`` under per-slot logits [T_y, V]."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return viterbi_alignment(_log_softmax_np(data, -1), target, blank)[0]


def ctc_decode(logits, blank: int = BLANK) -> list:
    """Best-path decoding: per-slot argmax (ties to the lowest id), then collapse."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return collapse(np.argmax(data, axis=-1), blank)


def fallback_token(logits, blank: int = BLANK) -> int:
    """Most likely non-reserved token across slots, used when best-path output is empty."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    lp = _log_softmax_np(data, -1).copy()
    lp[:, [PAD, BOS, EOS, blank]] = -np.inf
    return int(np.unravel_index(np.argmax(lp), lp.shape)[1])


# ----------------------------------------------------------------------------
# Model-level helpers
# ----------------------------------------------------------------------------

def slot_mask(src_lens: np.ndarray, upsample: int) -> np.ndarray:
    n = np.asarray(src_lens) * upsample
    return np.arange(int(n.max()))[None, :] >= n[:, None]


def ctc_dslp_step(params: ModelParams, batch, cfg: DslpConfig, ctc_cfg: CtcConfig, ratio: float,
                  mix_rng: np.random.Generator, training: bool = True, rng=None) -> tuple:
    """Loss of one CTC(-DSLP) training step on ``batch``.

    With ``ratio > 0`` the Viterbi alignment under the current model (a
    dropout-free, gradient-free pass) provides the per-slot groundtruth that
    replaces a Bernoulli(ratio) subset of the layer-wise feedback. The CTC loss
    of every supervised layer is kept whole; no slot is masked.

    Returns ``(loss, per_layer_losses, kept_indices)``; samples whose target
    cannot fit in the slots are dropped with a warning.
    """
    n_slots = batch.src_lens * ctc_cfg.upsample
    targets = [list(batch.tgt[i, : batch.tgt_lens[i]]) for i in range(len(batch))]
    keep = [i for i, t in enumerate(targets) if min_slots(t) <= n_slots[i]]
    if len(keep) < len(targets):
        log.warning("ctc_dslp_step: skipping %d infeasible samples", len(targets) - len(keep))
    if not keep:
        return None, [], []
    src = batch.src[keep]
    src_lens = batch.src_lens[keep]
    src_mask = batch.src_mask[keep]
    targets = [targets[i] for i in keep]
    tmask = slot_mask(src_lens, ctc_cfg.upsample)
    slot_lens = src_lens * ctc_cfg.upsample

    groundtruth = mix = enc = None
    if cfg.enable_lp and ratio > 0:
        # Without active dropout both passes see the same encoder states.
        if not training or params.config.dropout == 0.0:
            enc = encode(src, params, src_mask, training, rng)
        with T.no_grad():
            first = dslp_forward(params, src, tmask, cfg, src_mask=src_mask, enc=enc)
        pseudo = np.full(tmask.shape, ctc_cfg.blank, dtype=np.int64)
        fl = first.final_logits.data
        for b, tgt in enumerate(targets):
            n = int(slot_lens[b])
            pseudo[b, :n] = best_alignment(fl[b, :n], tgt, ctc_cfg.blank)
        groundtruth = pseudo
        mix = sample_mix_mask(tmask.shape, ratio, mix_rng) & ~tmask

    trace = dslp_forward(params, src, tmask, cfg, groundtruth, mix, src_mask=src_mask,
                         training=training, rng=rng, enc=enc)
    layers = trace.logits if cfg.enable_ds else [trace.final_logits]
    terms = [ctc_loss_batch(lg, slot_lens, targets, ctc_cfg.blank) for lg in layers]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total, [float(t.data) for t in terms], keep


def ctc_decode_batch(params: ModelParams, srcs, cfg: DslpConfig, ctc_cfg: CtcConfig,
                     full_trace: bool = False) -> tuple:
    """Decode a list of id lists; returns ``(outputs, trace, slot_lens)``."""
    from dslp.data import pad_sequences

    src, lens = pad_sequences(srcs)
    src_mask = np.arange(src.shape[1])[None, :] >= lens[:, None]
    tmask = slot_mask(lens, ctc_cfg.upsample)
    with T.no_grad():
        trace = dslp_forward(params, src, tmask, cfg, src_mask=src_mask, full_trace=full_trace)
        if full_trace:
            fill_trace_heads(params, trace)
    slot_lens = lens * ctc_cfg.upsample
    fl = trace.final_logits.data
    outs = []
    for b in range(len(srcs)):
        n = int(slot_lens[b])
        toks = ctc_decode(fl[b, :n], ctc_cfg.blank)
        if not toks:
            toks = [fallback_token(fl[b, :n], ctc_cfg.blank)]
        outs.append(toks)
    return outs, trace, slot_lens
