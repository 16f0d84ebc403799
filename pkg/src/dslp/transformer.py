"""Pre-norm Transformer encoder/decoder shared by NAT models and the AR teacher.

All model functions work on padded batches: token ids are ``[B, T]`` integer
arrays and pad masks are boolean ``[B, T]`` arrays that are ``True`` at pad
positions. A 1-D id array is accepted wherever a batch is, and treated as a
batch of one.
"""

from __future__ import annotations

import logging
import math
import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from dslp import tensor as T
from dslp.data import BOS, EOS, PAD
from dslp.errors import ConfigError, LengthError, ShapeError
from dslp.tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    vocab_size: int = 64
    num_encoder_layers: int = 6
    num_decoder_layers: int = 6
    model_dim: int = 64
    ffn_dim: int = 128
    num_heads: int = 4
    max_len: int = 32
    dropout: float = 0.0
    causal_decoder: bool = False
    per_layer_heads: bool = False
    with_fusion: bool = False
    with_length_head: bool = False

    def validate(self) -> None:
        if self.model_dim % self.num_heads:
            raise ConfigError(f"model_dim={self.model_dim} is not divisible by num_heads={self.num_heads}")
        if self.num_decoder_layers < 1 or self.num_encoder_layers < 1:
            raise ConfigError("need at least one encoder and one decoder layer")
        if self.vocab_size < 5:
            raise ConfigError("vocab_size must cover the 4 reserved ids and at least one word")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelParams:
    """Named weights plus the config (and optionally the vocabulary) they belong to."""

    config: ModelConfig
    tensors: dict = field(default_factory=dict)
    vocab: Optional[list] = None
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def head(self, layer: int) -> tuple:
        """(norm gain, norm bias, W) used to predict from decoder layer ``layer`` (1-based)."""
        sfx = f".{layer}" if self.config.per_layer_heads else ""
        return (self.tensors[f"out_ln{sfx}.g"], self.tensors[f"out_ln{sfx}.b"],
                self.tensors["head.W" + sfx])

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                                         for k, v in self.tensors.items()}, self.vocab, dict(self.meta))


@dataclass
class EncoderState:
    E: Tensor
    mask: np.ndarray


# ----------------------------------------------------------------------------
# Initialisation
# ----------------------------------------------------------------------------

def _param_rng(seed: int, name: str) -> np.random.Generator:
    # Per-name streams: adding or removing a parameter never shifts another's init.
    return np.random.default_rng([int(seed), zlib.crc32(b"init"), zlib.crc32(name.encode())])


def param_shapes(cfg: ModelConfig) -> dict:
    d, f, v = cfg.model_dim, cfg.ffn_dim, cfg.vocab_size
    shapes = {"emb": (v, d)}

    def attn(prefix):
        for p in "qkvo":
            shapes[f"{prefix}.w{p}"] = (d, d)
            shapes[f"{prefix}.b{p}"] = (d,)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes.update({f"{prefix}.w1": (f, d), f"{prefix}.b1": (f,),
                       f"{prefix}.w2": (d, f), f"{prefix}.b2": (d,)})

    for i in range(cfg.num_encoder_layers):
        ln(f"enc.{i}.ln1"); attn(f"enc.{i}.self"); ln(f"enc.{i}.ln2"); ffn(f"enc.{i}.ffn")
    ln("enc.ln")
    for i in range(cfg.num_decoder_layers):
        ln(f"dec.{i}.ln1"); attn(f"dec.{i}.self"); ln(f"dec.{i}.ln2"); attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3"); ffn(f"dec.{i}.ffn")
    if cfg.per_layer_heads:
        for n in range(1, cfg.num_decoder_layers + 1):
            ln(f"out_ln.{n}")
            shapes[f"head.W.{n}"] = (v, d)
    else:
        ln("out_ln")
        shapes["head.W"] = (v, d)
    if cfg.with_fusion:
        shapes["fuse.Wc"] = (d, 2 * d)
    if cfg.with_length_head:
        shapes["len.W"] = (cfg.max_len, d)
        shapes["len.b"] = (cfg.max_len,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=None) -> ModelParams:
    cfg.validate()
    dtype = dtype or T.default_dtype()
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        rng = _param_rng(seed, name)
        if name == "emb" or name.startswith("head.W"):
            data = rng.normal(0.0, cfg.model_dim ** -0.5, size=shape)
        elif leaf == "g":
            data = np.ones(shape)
        elif len(shape) == 1:
            data = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, dtype=dtype, name=name)
    return ModelParams(cfg, tensors)


# ----------------------------------------------------------------------------
# Building blocks
# ----------------------------------------------------------------------------

_PE_CACHE: dict = {}


def positional_encoding(length: int, dim: int, dtype=np.float64) -> np.ndarray:
    key = (length, dim, np.dtype(dtype).str)
    pe = _PE_CACHE.get(key)
    if pe is None:
        pos = np.arange(length)[:, None]
        div = np.exp(np.arange(0, dim, 2) * (-math.log(10000.0) / dim))
        pe = np.zeros((length, dim))
        pe[:, 0::2] = np.sin(pos * div)
        pe[:, 1::2] = np.cos(pos * div[: dim // 2])
        pe = pe.astype(dtype)
        _PE_CACHE[key] = pe
    return pe


def _as_batch(ids) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2:
        raise ShapeError(f"expected token ids shaped [B, T] or [T], got {ids.shape}")
    return ids


def embed(params: ModelParams, ids: np.ndarray, training=False, rng=None) -> Tensor:
    cfg = params.config
    emb = params["emb"]
    x = T.scale(T.embedding(emb, ids), math.sqrt(cfg.model_dim))
    x = T.add(x, positional_encoding(ids.shape[1], cfg.model_dim, emb.dtype))
    return T.dropout(x, cfg.dropout, rng, training)


def _ln(params, prefix, x):
    return T.layer_norm(x, params[prefix + ".g"], params[prefix + ".b"])


def multi_head_attention(params, prefix, x_q, x_kv, mask, num_heads) -> Tensor:
    q = T.split_heads(T.linear(x_q, params[prefix + ".wq"], params[prefix + ".bq"]), num_heads)
    k = T.split_heads(T.linear(x_kv, params[prefix + ".wk"], params[prefix + ".bk"]), num_heads)
    v = T.split_heads(T.linear(x_kv, params[prefix + ".wv"], params[prefix + ".bv"]), num_heads)
    ctx = T.merge_heads(T.attention(q, k, v, mask))
    return T.linear(ctx, params[prefix + ".wo"], params[prefix + ".bo"])


def _ffn(params, prefix, x):
    hidden = T.relu(T.linear(x, params[prefix + ".w1"], params[prefix + ".b1"]))
    return T.linear(hidden, params[prefix + ".w2"], params[prefix + ".b2"])


def key_mask(pad_mask: np.ndarray) -> np.ndarray:
    """[B, T] pad flags -> [B, 1, 1, T] attention blocking mask."""
    return pad_mask[:, None, None, :]


def causal_mask(length: int) -> np.ndarray:
    return np.triu(np.ones((length, length), dtype=bool), k=1)[None, None]


def encoder_layer(params, i, x, attn_mask, training=False, rng=None) -> Tensor:
    cfg = params.config
    p = f"enc.{i}"
    y = _ln(params, p + ".ln1", x)
    a = multi_head_attention(params, p + ".self", y, y, attn_mask, cfg.num_heads)
    x = T.add(x, T.dropout(a, cfg.dropout, rng, training))
    f = _ffn(params, p + ".ffn", _ln(params, p + ".ln2", x))
    return T.add(x, T.dropout(f, cfg.dropout, rng, training))


def encode(src_tokens, params: ModelParams, src_mask=None, training=False, rng=None) -> EncoderState:
    """Embed the source, add positions, and run every encoder layer.

    Returns the final (normalised) encoder states ``E`` with the pad mask.
    """
    cfg = params.config
    src = _as_batch(src_tokens)
    if src.shape[1] > cfg.max_len:
        raise LengthError(f"source length {src.shape[1]} exceeds max_len={cfg.max_len}")
    if src_mask is None:
        src_mask = np.zeros(src.shape, dtype=bool)
    x = embed(params, src, training, rng)
    am = key_mask(src_mask)
    for i in range(cfg.num_encoder_layers):
        x = encoder_layer(params, i, x, am, training, rng)
    return EncoderState(_ln(params, "enc.ln", x), src_mask)


def decoder_layer(params: ModelParams, i: int, h_in: Tensor, enc: EncoderState, self_mask: np.ndarray,
                  causal: bool = False, training=False, rng=None) -> Tensor:
    """Self-attention, cross-attention over ``enc.E``, then FFN; pre-norm residual blocks.

    ``self_mask`` is the [B, T_y] target pad mask; with ``causal`` each
    position additionally sees only itself and earlier positions.
    """
    cfg = params.config
    p = f"dec.{i}"
    am = key_mask(self_mask)
    if causal:
        am = am | causal_mask(h_in.shape[1])
    x = h_in
    y = _ln(params, p + ".ln1", x)
    x = T.add(x, T.dropout(multi_head_attention(params, p + ".self", y, y, am, cfg.num_heads),
                           cfg.dropout, rng, training))
    y = _ln(params, p + ".ln2", x)
    x = T.add(x, T.dropout(multi_head_attention(params, p + ".cross", y, enc.E, key_mask(enc.mask), cfg.num_heads),
                           cfg.dropout, rng, training))
    f = _ffn(params, p + ".ffn", _ln(params, p + ".ln3", x))
    return T.add(x, T.dropout(f, cfg.dropout, rng, training))


def predict_head(h: Tensor, W: Tensor) -> Tensor:
    """logits = h · Wᵀ (softmax is left to the loss or the decoder)."""
    return T.linear(h, W)


def layer_logits(params: ModelParams, h: Tensor, layer: int) -> Tensor:
    """Normalise decoder layer ``layer``'s output and apply the prediction head."""
    g, b, W = params.head(layer)
    return predict_head(T.layer_norm(h, g, b), W)


def argmax_lowest(logits: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties resolve to the lowest id."""
    return np.argmax(logits, axis=-1)


# ----------------------------------------------------------------------------
# Autoregressive teacher
# ----------------------------------------------------------------------------

def ar_forward(params: ModelParams, src, tgt_in, src_mask=None, tgt_mask=None, training=False, rng=None) -> Tensor:
    """Teacher-forced logits [B, T, V] of a causal decoder."""
    cfg = params.config
    if not cfg.causal_decoder:
        raise ConfigError("ar_forward needs causal_decoder=True")
    enc = encode(src, params, src_mask, training, rng)
    tgt_in = _as_batch(tgt_in)
    if tgt_mask is None:
        tgt_mask = np.zeros(tgt_in.shape, dtype=bool)
    x = embed(params, tgt_in, training, rng)
    for i in range(cfg.num_decoder_layers):
        x = decoder_layer(params, i, x, enc, tgt_mask, causal=True, training=training, rng=rng)
    return layer_logits(params, x, cfg.num_decoder_layers)


def teacher_inputs(tgt: np.ndarray, tgt_lens: np.ndarray) -> tuple:
    """(decoder input, output target, pad mask) with <s> prepended and </s> appended."""
    b, t = tgt.shape
    inp = np.full((b, t + 1), PAD, dtype=np.int64)
    out = np.full((b, t + 1), PAD, dtype=np.int64)
    inp[:, 0] = BOS
    inp[:, 1:] = tgt
    out[:, :t] = tgt
    out[np.arange(b), tgt_lens] = EOS
    mask = np.arange(t + 1)[None, :] > tgt_lens[:, None]
    return inp, out, mask


def ar_teacher_decode_batch(params: ModelParams, srcs, max_len: Optional[int] = None) -> list:
    """Greedy left-to-right decoding; one list of token ids per source (no </s>)."""
    from dslp.data import pad_sequences

    cfg = params.config
    max_len = max_len or cfg.max_len
    src, lens = pad_sequences(srcs)
    src_mask = np.arange(src.shape[1])[None, :] >= lens[:, None]
    b = len(srcs)
    with T.no_grad():
        enc = encode(src, params, src_mask)
        seq = np.full((b, 1), BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        while seq.shape[1] <= max_len and not done.all():
            x = embed(params, seq)
            m = np.zeros(seq.shape, dtype=bool)
            for i in range(cfg.num_decoder_layers):
                x = decoder_layer(params, i, x, enc, m, causal=True)
            g, bb, W = params.head(cfg.num_decoder_layers)
            last = T.Tensor(x.data[:, -1:, :])
            nxt = argmax_lowest(predict_head(T.layer_norm(last, g, bb), W).data[:, 0])
            nxt = np.where(done, PAD, nxt)
            done |= nxt == EOS
            seq = np.concatenate([seq, nxt[:, None]], axis=1)
    if not done.all():
        log.info("ar decode: %d of %d outputs truncated at max_len=%d", int((~done).sum()), b, max_len)
    outs = []
    for row in seq[:, 1:]:
        toks = []
        for t in row:
            if t in (EOS, PAD):
                break
            toks.append(int(t))
        outs.append(toks)
    return outs


def ar_teacher_decode_greedy(src, params: ModelParams) -> list:
    """Greedy decode of a single source sentence."""
    return ar_teacher_decode_batch(params, [list(np.asarray(src).reshape(-1))])[0]
