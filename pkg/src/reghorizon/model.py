"""Toy dual-input encoder-decoder.

A speech branch (strided conv subsampler) and a text branch (token embedding)
feed one shared pre-norm transformer encoder and one shared decoder. Every
forward pass returns a :class:`TapBundle` with the five representations the
consistency losses can compare.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigError, UsageError
from .numerics import RngStream, Tensor

PAD, BOS, EOS = 0, 1, 2
CKPT_FORMAT = "reghorizon-ckpt-v1"
CONV_KERNEL = 5
NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 35
    d_model: int = 32
    n_heads: int = 2
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 64
    dropout: float = 0.1
    frame_dim: int = 16
    subsample_stride: int = 2
    subsample_layers: int = 2

    def validate(self) -> "ModelConfig":
        extents = (self.vocab_size, self.d_model, self.n_heads, self.enc_layers,
                   self.dec_layers, self.ffn_dim, self.frame_dim, self.subsample_stride,
                   self.subsample_layers)
        if any(int(e) != e or e < 1 for e in extents):
            raise ConfigError(f"model extents must be positive integers: {self}")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.vocab_size <= EOS:
            raise ConfigError("vocab_size must leave room for PAD/BOS/EOS")
        return self


@dataclass
class Batch:
    speech_frames: np.ndarray   # [B, T_s, frame_dim]
    speech_mask: np.ndarray     # [B, T_s] True on real frames
    transcript_ids: np.ndarray  # [B, T_t]
    transcript_mask: np.ndarray
    target_in_ids: np.ndarray   # [B, T_y], BOS-prefixed
    target_out_ids: np.ndarray  # [B, T_y], EOS-terminated
    target_mask: np.ndarray

    @property
    def size(self) -> int:
        return self.speech_frames.shape[0]


@dataclass
class TapBundle:
    enc: Tensor
    xattn: Tensor
    lds: Tensor
    logits: Tensor
    softmax: Tensor
    enc_mask: np.ndarray
    dec_mask: np.ndarray


@lru_cache(maxsize=64)
def sinusoid(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    pe.flags.writeable = False
    return pe


def subsampled_length(length, stride: int, layers: int):
    """Output length of ``layers`` conv layers (kernel 5, padding 2) at ``stride``."""
    for _ in range(layers):
        length = (length - 1) // stride + 1
    return length


class Model:
    """Parameter container; forward passes are module-level functions."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def num_parameters(self) -> int:
        return int(np.sum([p.values.size for p in self.params.values()]))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != p.values.shape:
                raise UsageError(f"shape mismatch for {k}: {v.shape} vs {p.values.shape}")
            p.values = v.copy()

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        doc = {
            "format": CKPT_FORMAT,
            "config": asdict(self.config),
            "params": {k: {"shape": list(p.shape), "values": p.values.reshape(-1).tolist()}
                       for k, p in self.params.items()},
        }
        if extra:
            doc.update(extra)
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> "Model":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != CKPT_FORMAT:
            raise UsageError(f"unsupported checkpoint format {doc.get('format')!r}")
        config = ModelConfig(**doc["config"]).validate()
        params = {k: Tensor(np.asarray(v["values"]).reshape(v["shape"]), requires_grad=True, name=k)
                  for k, v in doc["params"].items()}
        return cls(config, params)


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, f = cfg.d_model, cfg.ffn_dim
    shapes: list[tuple[str, tuple[int, ...], str]] = [("embed", (cfg.vocab_size, d), "uniform")]
    c_in = cfg.frame_dim
    for i in range(cfg.subsample_layers):
        shapes += [(f"sub{i}.w", (CONV_KERNEL * c_in, d), "uniform"), (f"sub{i}.b", (d,), "zeros")]
        c_in = d

    def attn(prefix):
        return [(f"{prefix}.{n}", (d, d), "uniform") for n in ("wq", "wk", "wv", "wo")]

    def ln(prefix):
        return [(f"{prefix}.g", (d,), "ones"), (f"{prefix}.b", (d,), "zeros")]

    def ffn(prefix):
        return [(f"{prefix}.w1", (d, f), "uniform"), (f"{prefix}.b1", (f,), "zeros"),
                (f"{prefix}.w2", (f, d), "uniform"), (f"{prefix}.b2", (d,), "zeros")]

    for i in range(cfg.enc_layers):
        p = f"enc{i}"
        shapes += ln(f"{p}.ln1") + attn(f"{p}.self") + ln(f"{p}.ln2") + ffn(f"{p}.ffn")
    shapes += ln("enc_ln")
    for i in range(cfg.dec_layers):
        p = f"dec{i}"
        shapes += (ln(f"{p}.ln1") + attn(f"{p}.self") + ln(f"{p}.ln2") + attn(f"{p}.cross")
                   + ln(f"{p}.ln3") + ffn(f"{p}.ffn"))
    shapes += ln("dec_ln")
    shapes += [("out.w", (d, cfg.vocab_size), "uniform"), ("out.b", (cfg.vocab_size,), "zeros")]
    return shapes


def build(config: ModelConfig, rng: RngStream) -> Model:
    config.validate()
    gen = rng.generator()
    bound = 1.0 / math.sqrt(config.d_model)
    params: dict[str, Tensor] = {}
    for name, shape, init in _param_shapes(config):
        if init == "uniform":
            values = gen.uniform(-bound, bound, size=shape)
        elif init == "ones":
            values = np.ones(shape)
        else:
            values = np.zeros(shape)
        params[name] = Tensor(values, requires_grad=True, name=name)
    return Model(config, params)


# ---------------------------------------------------------------- blocks


class _Dropper:
    """Dropout applier that draws masks from one stream, or does nothing."""

    def __init__(self, p: float, rng: RngStream | None, on: bool):
        self.p = p if on else 0.0
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        if self.p == 0.0:
            return x
        if self.rng is None:
            raise UsageError("dropout requested without an RngStream")
        return nx.dropout(x, self.p, self.rng)


def _ln(model: Model, prefix: str, x: Tensor) -> Tensor:
    return nx.layer_norm(x, model[f"{prefix}.g"], model[f"{prefix}.b"])


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    return nx.linear(x, w, b)


def attention(model: Model, prefix: str, q_in: Tensor, kv_in: Tensor,
              key_mask: np.ndarray, causal: bool) -> Tensor:
    """Multi-head attention with key padding and optional causal mask."""
    tq, tk = q_in.shape[1], kv_in.shape[1]
    q = nx.linear(q_in, model[f"{prefix}.wq"])
    k = nx.linear(kv_in, model[f"{prefix}.wk"])
    v = nx.linear(kv_in, model[f"{prefix}.wv"])
    bias = np.where(key_mask[:, None, None, :], 0.0, NEG_INF)
    if causal:
        bias = bias + np.triu(np.full((tq, tk), NEG_INF), k=1)[None, None]
    ctx = nx.attention_core(q, k, v, bias, model.config.n_heads)
    return nx.linear(ctx, model[f"{prefix}.wo"])


def _ffn(model: Model, prefix: str, x: Tensor) -> Tensor:
    hdn = nx.relu(_linear(x, model[f"{prefix}.w1"], model[f"{prefix}.b1"]))
    return _linear(hdn, model[f"{prefix}.w2"], model[f"{prefix}.b2"])


def encode(model: Model, x: Tensor, mask: np.ndarray, drop: _Dropper) -> Tensor:
    cfg = model.config
    x = drop(nx.add(x, sinusoid(x.shape[1], cfg.d_model)))
    for i in range(cfg.enc_layers):
        p = f"enc{i}"
        y = _ln(model, f"{p}.ln1", x)
        x = nx.add(x, drop(attention(model, f"{p}.self", y, y, mask, causal=False)))
        x = nx.add(x, drop(_ffn(model, f"{p}.ffn", _ln(model, f"{p}.ln2", x))))
    return _ln(model, "enc_ln", x)


def decode(model: Model, target_in: np.ndarray, target_mask: np.ndarray,
           enc: Tensor, enc_mask: np.ndarray, drop: _Dropper) -> tuple[Tensor, Tensor, Tensor]:
    """Teacher-forced decoder. Returns (cross-attention tap, last decoder state, logits)."""
    cfg = model.config
    t = target_in.shape[1]
    x = nx.mul(nx.embedding(model["embed"], target_in), math.sqrt(cfg.d_model))
    x = drop(nx.add(x, sinusoid(t, cfg.d_model)))
    xattn = None
    for i in range(cfg.dec_layers):
        p = f"dec{i}"
        y = _ln(model, f"{p}.ln1", x)
        x = nx.add(x, drop(attention(model, f"{p}.self", y, y, target_mask, causal=True)))
        y = _ln(model, f"{p}.ln2", x)
        x = nx.add(x, drop(attention(model, f"{p}.cross", y, enc, enc_mask, causal=False)))
        xattn = x
        x = nx.add(x, drop(_ffn(model, f"{p}.ffn", _ln(model, f"{p}.ln3", x))))
    lds = _ln(model, "dec_ln", x)
    logits = _linear(lds, model["out.w"], model["out.b"])
    return xattn, lds, logits


def subsample(model: Model, frames: np.ndarray, mask: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Strided conv stack; positions past each sequence's valid length are zeroed."""
    cfg = model.config
    x = Tensor(frames) if not isinstance(frames, Tensor) else frames
    lengths = mask.sum(axis=1)
    for i in range(cfg.subsample_layers):
        x = nx.unfold_time(x, CONV_KERNEL, cfg.subsample_stride, CONV_KERNEL // 2)
        x = nx.relu(_linear(x, model[f"sub{i}.w"], model[f"sub{i}.b"]))
        lengths = subsampled_length(lengths, cfg.subsample_stride, 1)
        mask = np.arange(x.shape[1])[None, :] < lengths[:, None]
        x = nx.mul(x, mask[..., None].astype(np.float64))
    return x, mask


def _bundle(model: Model, enc: Tensor, enc_mask: np.ndarray, batch: Batch,
            drop: _Dropper) -> TapBundle:
    xattn, lds, logits = decode(model, batch.target_in_ids, batch.target_mask, enc, enc_mask, drop)
    return TapBundle(enc=enc, xattn=xattn, lds=lds, logits=logits,
                     softmax=nx.softmax_lastdim(logits), enc_mask=enc_mask,
                     dec_mask=batch.target_mask)


def _check_lengths(mask: np.ndarray, what: str) -> None:
    if mask.shape[1] == 0 or np.any(mask.sum(axis=1) == 0):
        raise UsageError(f"empty {what} sequence")


def forward_speech(model: Model, batch: Batch, rng: RngStream | None,
                   dropout_on: bool) -> TapBundle:
    _check_lengths(batch.speech_mask, "speech")
    _check_lengths(batch.target_mask, "target")
    drop = _Dropper(model.config.dropout, rng, dropout_on)
    x, enc_mask = subsample(model, batch.speech_frames, batch.speech_mask)
    enc = encode(model, x, enc_mask, drop)
    return _bundle(model, enc, enc_mask, batch, drop)


def forward_text(model: Model, batch: Batch, rng: RngStream | None,
                 dropout_on: bool) -> TapBundle:
    _check_lengths(batch.transcript_mask, "transcript")
    _check_lengths(batch.target_mask, "target")
    drop = _Dropper(model.config.dropout, rng, dropout_on)
    x = nx.mul(nx.embedding(model["embed"], batch.transcript_ids), math.sqrt(model.config.d_model))
    enc = encode(model, x, batch.transcript_mask, drop)
    return _bundle(model, enc, batch.transcript_mask, batch, drop)


def greedy_decode_frames(model: Model, frames: np.ndarray, mask: np.ndarray,
                         max_len: int) -> list[list[int]]:
    """Batched argmax decoding from speech; each output excludes BOS/EOS."""
    if max_len < 1:
        raise UsageError("max_len must be >= 1")
    with nx.no_grad():
        drop = _Dropper(0.0, None, False)
        x, enc_mask = subsample(model, frames, mask)
        enc = encode(model, x, enc_mask, drop)
        b = frames.shape[0]
        seqs = np.full((b, 1), BOS, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        for _ in range(max_len):
            tmask = np.ones(seqs.shape, dtype=bool)
            _, _, logits = decode(model, seqs, tmask, enc, enc_mask, drop)
            nxt = logits.values[:, -1, :].argmax(axis=-1)
            nxt = np.where(done, PAD, nxt)
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    out = []
    for row in seqs[:, 1:]:
        toks = []
        for tok in row:
            if tok in (EOS, PAD):
                break
            toks.append(int(tok))
        out.append(toks)
    return out


def greedy_decode(model: Model, speech_frames: np.ndarray, max_len: int) -> list[int]:
    frames = np.asarray(speech_frames, dtype=np.float64)[None]
    mask = np.ones(frames.shape[:2], dtype=bool)
    return greedy_decode_frames(model, frames, mask, max_len)[0]
