"""Layer-wise prediction awareness, deep supervision and mixed training.

The decoder stack is wrapped so that every layer ``n < N`` predicts a
tentative translation, and the embedding of that prediction is fused back
into the hidden state handed to layer ``n + 1``:

    logits^(n) = W · LN(h^(n))
    ŷ^(n)      = argmax logits^(n)
    h̃^(n)      = W_c [h^(n) ; emb(ȳ^(n))]
    ȳ_t^(n)    = s_t y_t + (1 - s_t) ŷ_t^(n),    s_t ~ Bernoulli(λ)

where ``s`` is sampled once per step and shared by all layers. Deep
supervision sums the label-smoothed likelihood loss over all ``N`` layers;
positions fed with groundtruth are excluded from every layer's loss.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from dslp import tensor as T
from dslp.data import BOS
from dslp.errors import ConfigError, ContractError
from dslp.tensor import Tensor
from dslp.transformer import (
    EncoderState,
    ModelParams,
    argmax_lowest,
    decoder_layer,
    embed,
    encode,
    layer_logits,
)


@dataclass
class DslpConfig:
    enable_lp: bool = True
    enable_ds: bool = True
    mixing_ratio: float = 0.0
    anneal_lambda: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.mixing_ratio <= 1.0:
            raise ConfigError(f"mixing_ratio must lie in [0, 1], got {self.mixing_ratio}")

    @classmethod
    def from_dict(cls, d: dict) -> "DslpConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dslp config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


VANILLA = DslpConfig(enable_lp=False, enable_ds=False)


@dataclass
class LayerwiseTrace:
    """Per-layer outputs of one decoder pass over a padded batch.

    ``logits[n]`` / ``tokens[n]`` hold layer ``n + 1``'s scores and argmax
    tokens; ``logits`` entries are ``None`` for layers whose head was not
    evaluated. ``feedback[n]`` is what layer ``n + 1`` fed forward (LP only).
    """

    logits: list
    tokens: list
    hidden: list
    feedback: list
    tgt_mask: np.ndarray
    mix: Optional[np.ndarray] = None

    @property
    def num_layers(self) -> int:
        return len(self.hidden)

    @property
    def final_logits(self) -> Tensor:
        return self.logits[-1]

    @property
    def final_tokens(self) -> np.ndarray:
        return self.tokens[-1]

    def sentence_layers(self, i: int) -> list:
        """Token-id lists per layer for sentence ``i`` (pads removed)."""
        n = int((~self.tgt_mask[i]).sum())
        return [[int(x) for x in tok[i, :n]] for tok in self.tokens]


def decoder_input(params: ModelParams, tgt_mask: np.ndarray, training=False, rng=None) -> Tensor:
    """Embedding of ``<s>`` at every target slot, plus positions."""
    ids = np.full(tgt_mask.shape, BOS, dtype=np.int64)
    return embed(params, ids, training, rng)


def layerwise_predict(params: ModelParams, h: Tensor, layer: int) -> tuple:
    """(logits, argmax tokens) from decoder layer ``layer``'s hidden state."""
    logits = layer_logits(params, h, layer)
    return logits, argmax_lowest(logits.data)


def feedback_embedding(params: ModelParams, tokens: np.ndarray) -> Tensor:
    # Same lookup and scale as the decoder's token input, without positions.
    return T.scale(T.embedding(params["emb"], tokens), math.sqrt(params.config.model_dim))


def fuse_prediction(params: ModelParams, h: Tensor, tokens: np.ndarray, layer: int) -> Tensor:
    """h̃ = W_c [h ; emb(tokens)]; defined for layers 1..N-1 only.

    ``tokens`` are constant indices, so no gradient reaches the argmax.
    """
    if layer >= params.config.num_decoder_layers:
        raise ContractError(f"fusion is undefined for the last decoder layer (layer {layer})")
    if "fuse.Wc" not in params:
        raise ContractError("model was built without a fusion matrix (with_fusion=False)")
    return T.linear(T.concat([h, feedback_embedding(params, tokens)], axis=-1), params["fuse.Wc"])


def _inference_fusion(params: ModelParams):
    """Gradient-free fusion with the embedding half of W_c folded into a [V, d] table.

    W_c [h ; e·√d] = W_h h + (√d W_e) e, and the second term only depends on
    the token id, so it is looked up instead of recomputed at every layer.
    """
    d = params.config.model_dim
    wc = params["fuse.Wc"].data
    w_h = wc[:, :d].T.copy()
    table = (params["emb"].data * math.sqrt(d)) @ wc[:, d:].T

    def fuse(h: Tensor, tokens: np.ndarray) -> Tensor:
        return Tensor(h.data @ w_h + table[tokens])

    return fuse


def dslp_forward(
    params: ModelParams,
    src,
    tgt_mask: np.ndarray,
    cfg: DslpConfig,
    groundtruth: Optional[np.ndarray] = None,
    mix: Optional[np.ndarray] = None,
    src_mask: Optional[np.ndarray] = None,
    training: bool = False,
    rng=None,
    full_trace: bool = False,
    enc: Optional[EncoderState] = None,
) -> LayerwiseTrace:
    """Run the decoder stack with optional layer-wise prediction feedback.

    Args:
        src: source ids [B, T_x] (ignored when ``enc`` is given).
        tgt_mask: [B, T_y] pad flags; fixes the number of target slots.
        groundtruth: [B, T_y] ids mixed into the feedback where ``mix`` is set.
        mix: [B, T_y] boolean mixing mask, shared by every layer.
        full_trace: evaluate the head at every layer even when neither
            feedback nor deep supervision needs it.
    """
    if (groundtruth is None) != (mix is None):
        raise ContractError("groundtruth and mix must be given together (training) or not at all")
    n_layers = params.config.num_decoder_layers
    if enc is None:
        enc = encode(src, params, src_mask, training, rng)
    x = decoder_input(params, tgt_mask, training, rng)
    fast_fuse = None
    if cfg.enable_lp and not T.grad_enabled() and n_layers > 1:
        if "fuse.Wc" not in params:
            raise ContractError("model was built without a fusion matrix (with_fusion=False)")
        fast_fuse = _inference_fusion(params)
    logits, tokens, hidden, feedback = [], [], [], []
    for n in range(1, n_layers + 1):
        h = decoder_layer(params, n - 1, x, enc, tgt_mask, causal=False, training=training, rng=rng)
        hidden.append(h)
        last = n == n_layers
        need_head = last or full_trace or cfg.enable_ds or cfg.enable_lp
        if need_head:
            lg, yhat = layerwise_predict(params, h, n)
        else:
            lg, yhat = None, None
        logits.append(lg)
        tokens.append(yhat)
        if cfg.enable_lp and not last:
            fb = yhat if mix is None else np.where(mix, groundtruth, yhat)
            feedback.append(fb)
            x = fuse_prediction(params, h, fb, n) if fast_fuse is None else fast_fuse(h, fb)
        else:
            x = h
    return LayerwiseTrace(logits, tokens, hidden, feedback, tgt_mask, mix)


def fill_trace_heads(params: ModelParams, trace: LayerwiseTrace) -> LayerwiseTrace:
    """Evaluate the prediction head post hoc on layers that skipped it."""
    for i, h in enumerate(trace.hidden):
        if trace.logits[i] is None:
            trace.logits[i], trace.tokens[i] = layerwise_predict(params, h, i + 1)
    return trace


def loss_mask(tgt_mask: np.ndarray, mix: Optional[np.ndarray]) -> np.ndarray:
    """Positions excluded from the likelihood loss: pads plus groundtruth-fed slots."""
    return tgt_mask if mix is None else (tgt_mask | mix)


def deep_supervised_loss(trace: LayerwiseTrace, target: np.ndarray, mix: Optional[np.ndarray],
                         cfg: DslpConfig, smoothing: float = 0.1) -> tuple:
    """Sum over layers of the per-token label-smoothed NLL.

    Returns ``(loss, per_layer)`` where ``per_layer`` are floats, one per layer.
    """
    if not cfg.enable_ds:
        raise ContractError("deep_supervised_loss requires enable_ds=True")
    target = np.asarray(target)
    if target.shape != trace.tgt_mask.shape:
        raise ContractError(f"target shape {target.shape} does not match trace slots {trace.tgt_mask.shape}")
    mask = loss_mask(trace.tgt_mask, mix)
    safe = np.where(trace.tgt_mask, 0, target)
    terms = [T.nll_label_smoothed(lg, safe, smoothing, mask) for lg in trace.logits]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total, [float(t.data) for t in terms]


def sample_mix_mask(shape, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. Bernoulli(ratio) flags; ``shape`` is T_y or a [B, T_y] tuple."""
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"mixing ratio must lie in [0, 1], got {ratio}")
    return rng.random(shape) < ratio


def anneal_schedule(step: int, total_steps: int, ratio0: float) -> float:
    """Linear decay of the mixing ratio from ``ratio0`` at step 0 to 0 at ``total_steps``."""
    if step > total_steps or step < 0:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    return ratio0 * (1.0 - step / total_steps)
