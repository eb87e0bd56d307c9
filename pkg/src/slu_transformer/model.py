"""Transformer SLU network: embedding, encoder stack, decoder stack, output heads."""

from __future__ import annotations

import functools
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import numerics as nx
from .attention import (AttentionHeadParams, MultiHeadParams, causal_mask,
                        key_padding_mask, multi_head)
from .labels import SOP, LabelSpace, desk_label_space
from .numerics import ShapeError, Tensor

MODES = ("classification", "hierarchical")
CLASSIFIERS = ("decoder", "mean_pool")
CHECKPOINT_MAGIC = b"SLUM"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    input_dim: int = 320
    model_dim: int = 128
    head_dim: int = 64
    num_heads: int = 3
    enc_layers: int = 5
    dec_layers: int = 1
    ffn_inner: int = 512
    dropout: float = 0.1
    label_smoothing: float = 0.1
    mode: str = "hierarchical"
    classifier: str = "decoder"
    max_frames: int = 1024
    use_positional: bool = True
    norm_eps: float = 1e-6
    label_space: LabelSpace = field(default_factory=desk_label_space)

    def __post_init__(self):
        for name in ("input_dim", "model_dim", "head_dim", "num_heads", "ffn_inner", "max_frames"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ValueError("layer counts must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.classifier not in CLASSIFIERS:
            raise ValueError(f"classifier must be one of {CLASSIFIERS}")
        if self.use_positional and self.model_dim % 2:
            raise ValueError("sinusoidal positions need an even model_dim")
        if isinstance(self.label_space, dict):
            self.label_space = LabelSpace.from_dict(self.label_space)

    @property
    def uses_decoder(self) -> bool:
        return self.mode == "hierarchical" or self.classifier == "decoder"

    @property
    def output_size(self) -> int:
        if self.mode == "hierarchical":
            return self.label_space.vocab_size
        return self.label_space.class_count

    @property
    def target_vocab(self) -> int:
        # classification mode only ever feeds the start symbol to its decoder
        return self.label_space.vocab_size if self.mode == "hierarchical" else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label_space"] = self.label_space.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "label_space" in d:
            d["label_space"] = LabelSpace.from_dict(d["label_space"])
        return cls(**d)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


@dataclass
class ForwardContext:
    """Train/eval switch, dropout randomness and optional activation trace."""
    train: bool = False
    rng: np.random.Generator | None = None
    trace: dict | None = None

    def drop(self, x, rate):
        return nx.dropout(x, rate, self.rng, self.train)

    def record(self, name, t):
        if self.trace is not None:
            self.trace[name] = t.data if isinstance(t, Tensor) else t


EVAL = ForwardContext()


class ModelParams:
    """Ordered name -> Tensor mapping with dotted names."""

    def __init__(self, tensors: "OrderedDict[str, Tensor] | dict[str, Tensor]"):
        self.tensors = OrderedDict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    def size(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def attention(self, prefix: str, num_heads: int) -> MultiHeadParams:
        heads = [AttentionHeadParams(self[f"{prefix}.head.{h}.Wq"], self[f"{prefix}.head.{h}.Wk"],
                                     self[f"{prefix}.head.{h}.Wv"]) for h in range(num_heads)]
        return MultiHeadParams(heads, self[f"{prefix}.Wc"])

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self.tensors.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.tensors[k].assign(v)


# ---------------------------------------------------------------------------
# shapes, counting and initialization
# ---------------------------------------------------------------------------

def _attention_shapes(prefix: str, cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    n, d, L = cfg.head_dim, cfg.model_dim, cfg.num_heads
    out = []
    for h in range(L):
        out += [(f"{prefix}.head.{h}.{w}", (n, d)) for w in ("Wq", "Wk", "Wv")]
    out.append((f"{prefix}.Wc", (d, L * n)))
    return out


def _norm_shapes(prefix: str, d: int):
    return [(f"{prefix}.gain", (d,)), (f"{prefix}.bias", (d,))]


def _ffn_shapes(prefix: str, cfg: ModelConfig):
    d, f = cfg.model_dim, cfg.ffn_inner
    return [(f"{prefix}.W1", (d, f)), (f"{prefix}.b1", (f,)),
            (f"{prefix}.W2", (f, d)), (f"{prefix}.b2", (d,))]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d = cfg.model_dim
    shapes = [("embed.We", (d, cfg.input_dim)), ("embed.b", (d,))]
    for i in range(cfg.enc_layers):
        p = f"encoder.{i}"
        shapes += _attention_shapes(f"{p}.self_attn", cfg) + _norm_shapes(f"{p}.norm1", d)
        shapes += _ffn_shapes(f"{p}.ffn", cfg) + _norm_shapes(f"{p}.norm2", d)
    if cfg.uses_decoder:
        shapes.append(("target_embed", (cfg.target_vocab, d)))
        for i in range(cfg.dec_layers):
            p = f"decoder.{i}"
            shapes += _attention_shapes(f"{p}.self_attn", cfg) + _norm_shapes(f"{p}.norm1", d)
            shapes += _attention_shapes(f"{p}.cross_attn", cfg) + _norm_shapes(f"{p}.norm2", d)
            shapes += _ffn_shapes(f"{p}.ffn", cfg) + _norm_shapes(f"{p}.norm3", d)
    else:
        shapes += [("head.W1", (d, d)), ("head.b1", (d,))]
    shapes += [("output.W", (d, cfg.output_size)), ("output.b", (cfg.output_size,))]
    return shapes


def parameter_count(cfg: ModelConfig) -> int:
    """Number of learned scalars, by closed-form arithmetic over the config."""
    d, n, L, f, p = cfg.model_dim, cfg.head_dim, cfg.num_heads, cfg.ffn_inner, cfg.input_dim
    attn = 3 * L * n * d + d * L * n
    norm = 2 * d
    ffn = d * f + f + f * d + d
    total = d * p + d
    total += cfg.enc_layers * (attn + ffn + 2 * norm)
    if cfg.uses_decoder:
        total += cfg.target_vocab * d
        total += cfg.dec_layers * (2 * attn + ffn + 3 * norm)
    else:
        total += d * d + d
    total += d * cfg.output_size + cfg.output_size
    return total


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Glorot-uniform matrices, zero biases, unit gains."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        tensors[name] = nx.parameter(value, name=name)
    return ModelParams(tensors)


@functools.lru_cache(maxsize=16)
def _positions(max_frames: int, d: int) -> np.ndarray:
    t = np.arange(max_frames)[:, None]
    rate = np.power(10000.0, np.arange(0, d, 2) / d)
    table = np.zeros((max_frames, d))
    table[:, 0::2] = np.sin(t / rate)
    table[:, 1::2] = np.cos(t / rate)
    table.flags.writeable = False
    return table


def sinusoidal_positions(max_frames: int, d: int) -> np.ndarray:
    """pos[t, 2i] = sin(t / 10000^(2i/d)), pos[t, 2i+1] = cos(same)."""
    if d % 2:
        raise ValueError(f"sinusoidal positions need even d, got {d}")
    return _positions(max_frames, d).copy()


def position_table(cfg: ModelConfig, T: int) -> np.ndarray:
    if T > cfg.max_frames:
        raise ValueError(f"sequence of {T} frames exceeds max_frames={cfg.max_frames}; "
                         "raise max_frames in the model config")
    if not cfg.use_positional:
        return np.zeros((T, cfg.model_dim))
    return _positions(cfg.max_frames, cfg.model_dim)[:T]


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def embed(x, params: ModelParams, cfg: ModelConfig, ctx: ForwardContext = EVAL) -> Tensor:
    """Project each frame to d dimensions and add the positional table."""
    x = nx.as_tensor(x)
    if x.shape[-1] != cfg.input_dim:
        raise ShapeError(f"input feature dim {x.shape[-1]} != configured {cfg.input_dim}")
    T = x.shape[-2]
    y = nx.matmul(x, nx.transpose(params["embed.We"])) + params["embed.b"]
    y = y + position_table(cfg, T)
    ctx.record("embed.y", y)
    return ctx.drop(y, cfg.dropout)


def _ffn(h, params, prefix):
    inner = nx.relu(nx.matmul(h, params[f"{prefix}.W1"]) + params[f"{prefix}.b1"])
    return nx.matmul(inner, params[f"{prefix}.W2"]) + params[f"{prefix}.b2"]


def _norm(x, params, prefix, cfg):
    return nx.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"], cfg.norm_eps)


def encoder_layer(y, params: ModelParams, cfg: ModelConfig, index: int, mask=None,
                  ctx: ForwardContext = EVAL) -> Tensor:
    p = f"encoder.{index}"
    trace_prefix = f"{p}." if ctx.trace is not None else ""
    ctx.record(f"{p}.y", y)
    z = multi_head(y, params.attention(f"{p}.self_attn", cfg.num_heads), mask=mask,
                   trace=ctx.trace, prefix=trace_prefix)
    h = _norm(ctx.drop(z, cfg.dropout) + y, params, f"{p}.norm1", cfg)
    s = _ffn(h, params, f"{p}.ffn")
    r = _norm(ctx.drop(s, cfg.dropout) + h, params, f"{p}.norm2", cfg)
    for name, t in (("z", z), ("h", h), ("s", s), ("r", r)):
        ctx.record(f"{p}.{name}", t)
    return r


def encode(x, params: ModelParams, cfg: ModelConfig, lengths=None,
           ctx: ForwardContext = EVAL) -> tuple[Tensor, np.ndarray | None]:
    """Run the encoder. ``lengths`` (batched input only) masks padded frames.

    Returns the encoder output and the key mask to reuse in cross-attention.
    """
    x = nx.as_tensor(x)
    mask = None
    if lengths is not None:
        mask = key_padding_mask(lengths, x.shape[-2])
    y = embed(x, params, cfg, ctx)
    for i in range(cfg.enc_layers):
        y = encoder_layer(y, params, cfg, i, mask, ctx)
    return y, mask


def decoder_layer(yd, enc_out, params: ModelParams, cfg: ModelConfig, index: int,
                  enc_mask=None, ctx: ForwardContext = EVAL) -> Tensor:
    p = f"decoder.{index}"
    tp = f"{p}." if ctx.trace is not None else ""
    S = yd.shape[-2]
    a = multi_head(yd, params.attention(f"{p}.self_attn", cfg.num_heads), mask=causal_mask(S),
                   trace=ctx.trace, prefix=tp + "self_")
    h1 = _norm(ctx.drop(a, cfg.dropout) + yd, params, f"{p}.norm1", cfg)
    c = multi_head(h1, params.attention(f"{p}.cross_attn", cfg.num_heads), context=enc_out,
                   mask=enc_mask, trace=ctx.trace, prefix=tp + "cross_")
    h2 = _norm(ctx.drop(c, cfg.dropout) + h1, params, f"{p}.norm2", cfg)
    s = _ffn(h2, params, f"{p}.ffn")
    r = _norm(ctx.drop(s, cfg.dropout) + h2, params, f"{p}.norm3", cfg)
    ctx.record(f"{p}.r", r)
    return r


def decoder_hidden(tokens, enc_out, params: ModelParams, cfg: ModelConfig, enc_mask=None,
                   ctx: ForwardContext = EVAL) -> Tensor:
    """Decoder states for target prefix ``tokens`` (..., S) given encoder output."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size and tokens.max() >= cfg.target_vocab:
        raise ValueError(f"token id {tokens.max()} >= vocabulary size {cfg.target_vocab}")
    S = tokens.shape[-1]
    yd = nx.embedding(params["target_embed"], tokens) + position_table(cfg, S)
    yd = ctx.drop(yd, cfg.dropout)
    for i in range(cfg.dec_layers):
        yd = decoder_layer(yd, enc_out, params, cfg, i, enc_mask, ctx)
    return yd


def output_logits(hidden, params: ModelParams) -> Tensor:
    return nx.matmul(hidden, params["output.W"]) + params["output.b"]


def sequence_logits(tokens, enc_out, params: ModelParams, cfg: ModelConfig, enc_mask=None,
                    ctx: ForwardContext = EVAL) -> Tensor:
    """Teacher-forced logits (..., S, V) for every prefix position at once."""
    if cfg.mode != "hierarchical":
        raise ValueError("sequence logits need a hierarchical model")
    return output_logits(decoder_hidden(tokens, enc_out, params, cfg, enc_mask, ctx), params)


def decode_step(prefix, enc_out, params: ModelParams, cfg: ModelConfig, enc_mask=None) -> np.ndarray:
    """Next-token logits after ``prefix`` (which starts with sop)."""
    prefix = np.asarray(prefix, dtype=np.int64)
    if prefix.shape[-1] < 1 or np.any(prefix[..., 0] != SOP):
        raise ValueError("decoding prefix must start with the sop token")
    with nx.no_grad():
        logits = sequence_logits(prefix, enc_out, params, cfg, enc_mask)
    return logits.data[..., -1, :]


def classification_head(enc_out, params: ModelParams, cfg: ModelConfig, enc_mask=None,
                        ctx: ForwardContext = EVAL) -> Tensor:
    """Class logits (..., C) from encoder output (..., T, d)."""
    if cfg.mode != "classification":
        raise ValueError("classification head used on a hierarchical model")
    enc_out = nx.as_tensor(enc_out)
    if enc_out.ndim == 2:
        # a single utterance runs as a batch of one
        if enc_mask is not None:
            enc_mask = np.asarray(enc_mask).reshape(1, 1, -1)
        out = classification_head(nx.reshape(enc_out, (1,) + enc_out.shape), params, cfg,
                                  enc_mask, ctx)
        return nx.reshape(out, out.shape[1:])
    if cfg.classifier == "decoder":
        start = np.full(enc_out.shape[:-2] + (1,), SOP)
        hidden = decoder_hidden(start, enc_out, params, cfg, enc_mask, ctx)
        pooled = nx.reshape(hidden, hidden.shape[:-2] + (hidden.shape[-1],))
        return output_logits(pooled, params)
    if enc_mask is None:
        pooled = nx.mean(enc_out, axis=-2)
    else:
        w = enc_mask.reshape(enc_mask.shape[0], -1, 1).astype(np.float64)
        w = w / w.sum(axis=1, keepdims=True)
        pooled = nx.sum_(enc_out * w, axis=-2)
    hidden = nx.relu(nx.matmul(pooled, params["head.W1"]) + params["head.b1"])
    return output_logits(hidden, params)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, cfg: ModelConfig, params: ModelParams) -> None:
    """SLUM: magic, u32 version, length-prefixed JSON config, then named f32 tensors."""
    cfg_bytes = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_bytes)))
        fh.write(cfg_bytes)
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
            fh.write(t.data.astype("<f4").tobytes())


def _read_checkpoint(path: str | Path):
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    cfg = ModelConfig.from_dict(json.loads(buf[off:off + n].decode("utf-8")))
    off += n
    tensors = []
    while off < len(buf):
        (ln,) = struct.unpack_from("<I", buf, off)
        name = buf[off + 4:off + 4 + ln].decode("utf-8")
        off += 4 + ln
        (rank,) = struct.unpack_from("<I", buf, off)
        dims = struct.unpack_from(f"<{rank}I", buf, off + 4)
        off += 4 + 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        tensors.append((name, data))
    return cfg, tensors


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, ModelParams]:
    cfg, tensors = _read_checkpoint(path)
    params = ModelParams(OrderedDict((k, nx.parameter(v.astype(np.float64), name=k))
                                     for k, v in tensors))
    expected = dict(param_shapes(cfg))
    if {k: params[k].shape for k in params} != expected:
        raise ValueError(f"{path}: tensors do not match the stored config")
    return cfg, params


def checkpoint_census(path: str | Path) -> int:
    """Number of scalars actually serialized in a checkpoint file."""
    return sum(v.size for _, v in _read_checkpoint(path)[1])
