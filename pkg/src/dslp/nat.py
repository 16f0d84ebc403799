"""Vanilla non-autoregressive Transformer: length prediction and parallel decoding."""

from __future__ import annotations

from typing import Optional

import numpy as np

from dslp import tensor as T
from dslp.dslp import VANILLA, DslpConfig, decoder_input, dslp_forward, fill_trace_heads
from dslp.errors import ContractError, LengthError
from dslp.tensor import Tensor
from dslp.transformer import EncoderState, ModelParams, _as_batch, decoder_layer, encode, layer_logits

LENGTH_LOSS_WEIGHT = 0.1


def length_logits(params: ModelParams, enc: EncoderState) -> Tensor:
    """Logits over target lengths 1..max_len from the mean-pooled encoder states."""
    pooled = T.masked_mean(enc.E, enc.mask)
    return T.linear(pooled, params["len.W"], params["len.b"])


def predict_length(params: ModelParams, enc: EncoderState) -> np.ndarray:
    """Most likely length per sentence; ties resolve to the shorter length."""
    return np.argmax(length_logits(params, enc).data, axis=-1) + 1


def length_loss(lg: Tensor, lengths: np.ndarray) -> Tensor:
    lengths = np.asarray(lengths)
    max_len = lg.shape[-1]
    if lengths.min() < 1 or lengths.max() > max_len:
        raise LengthError(f"target lengths must lie in [1, {max_len}]")
    return T.nll_label_smoothed(lg, lengths - 1, 0.0)


def nat_forward(params: ModelParams, src, tgt_lens, src_mask=None, training=False, rng=None) -> tuple:
    """Plain decoder stack over the ``<s>`` input.

    Returns ``(hidden, logits)``: hidden states of every decoder layer and the
    last layer's logits [B, T_y, V].
    """
    cfg = params.config
    tgt_lens = np.atleast_1d(np.asarray(tgt_lens))
    t_y = int(tgt_lens.max())
    if t_y > cfg.max_len:
        raise LengthError(f"target length {t_y} exceeds max_len={cfg.max_len}")
    enc = encode(src, params, src_mask, training, rng)
    tgt_mask = np.arange(t_y)[None, :] >= tgt_lens[:, None]
    x = decoder_input(params, tgt_mask, training, rng)
    hidden = []
    for i in range(cfg.num_decoder_layers):
        x = decoder_layer(params, i, x, enc, tgt_mask, causal=False, training=training, rng=rng)
        hidden.append(x)
    return hidden, layer_logits(params, x, cfg.num_decoder_layers)


def nat_loss(logits: Tensor, target: np.ndarray, smoothing: float = 0.1, mask: Optional[np.ndarray] = None,
             length_lg: Optional[Tensor] = None, lengths: Optional[np.ndarray] = None) -> Tensor:
    """Per-token label-smoothed NLL of the last layer, plus the weighted length loss.

    ``mask`` flags ignored positions (pads and, in mixed training, groundtruth-fed
    slots). The length term is added only when ``length_lg`` is given.
    """
    target = np.asarray(target)
    if target.shape != logits.shape[:-1]:
        raise ContractError(f"target shape {target.shape} does not match logits {logits.shape}")
    safe = target if mask is None else np.where(mask, 0, target)
    loss = T.nll_label_smoothed(logits, safe, smoothing, mask)
    if length_lg is not None:
        loss = T.add(loss, T.scale(length_loss(length_lg, lengths), LENGTH_LOSS_WEIGHT))
    return loss


def nat_decode_batch(params: ModelParams, srcs, cfg: DslpConfig = VANILLA, full_trace: bool = False) -> tuple:
    """Predict lengths, run the (optionally prediction-aware) decoder, take per-slot argmax.

    ``srcs`` is a list of id lists. Returns ``(outputs, trace, lengths)``.
    """
    from dslp.data import pad_sequences

    src, lens = pad_sequences(srcs)
    src_mask = np.arange(src.shape[1])[None, :] >= lens[:, None]
    with T.no_grad():
        enc = encode(src, params, src_mask)
        t_y = predict_length(params, enc)
        tgt_mask = np.arange(int(t_y.max()))[None, :] >= t_y[:, None]
        trace = dslp_forward(params, None, tgt_mask, cfg, enc=enc, full_trace=full_trace)
        if full_trace:
            fill_trace_heads(params, trace)
    final = trace.final_tokens
    outs = [[int(x) for x in final[i, : t_y[i]]] for i in range(len(srcs))]
    return outs, trace, t_y


def nat_decode(src, params: ModelParams, cfg: DslpConfig = VANILLA) -> list:
    """Decode one source sentence (1-D ids)."""
    src = _as_batch(src)
    return nat_decode_batch(params, [list(src[0])], cfg)[0][0]
