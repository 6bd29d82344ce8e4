"""Desk-scale transformer LM with spectral (or dense) projections and manual backprop.

Every layer caches what its backward needs during ``forward`` and
accumulates parameter gradients in ``backward``; one forward/backward pair
is in flight at a time.
"""

from __future__ import annotations

import json
import math
import os
import shutil
import struct
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from sct.errors import ConfigError, NumericError, RankError, ShapeError
from sct.optim import Parameter
from sct.spectral import (
    DEFAULT_TARGET_STD,
    EnergyRank,
    FixedRank,
    SpectralFactors,
    from_dense,
    init_scratch,
    parse_rank_policy,
    read_factors,
    spectral_backward,
    spectral_forward,
    write_factors,
)

PRECISIONS = {"float32": np.float32, "float64": np.float64}
ATTENTION_MODES = ("additive", "causal_softmax")
PARAM_MODES = ("spectral", "dense")
INIT_MODES = ("scratch", "svd")
NORM_EPS = 1e-6


@dataclass
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    d_ffn: int = 128
    vocab: int = 256
    seq_len: int = 32
    mlp_rank: object = 8
    attn_rank: object = 8
    attention_mode: str = "causal_softmax"
    mlp_mode: str = "spectral"
    attention_param_mode: str = "dense"
    tie_embeddings: bool = False
    init: str = "scratch"
    init_std: float = DEFAULT_TARGET_STD
    precision: str = "float64"
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "d_model", "d_ffn", "vocab", "seq_len"):
            val = getattr(self, name)
            if not isinstance(val, int) or isinstance(val, bool) or val < 1:
                raise ConfigError(f"model.{name} must be an integer >= 1, got {val!r}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"model.attention_mode must be one of {ATTENTION_MODES}")
        for name in ("mlp_mode", "attention_param_mode"):
            if getattr(self, name) not in PARAM_MODES:
                raise ConfigError(f"model.{name} must be one of {PARAM_MODES}")
        if self.init not in INIT_MODES:
            raise ConfigError(f"model.init must be one of {INIT_MODES}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"model.precision must be one of {tuple(PRECISIONS)}")
        try:
            self.mlp_policy = parse_rank_policy(self.mlp_rank)
            self.attn_policy = parse_rank_policy(self.attn_rank)
        except RankError as exc:
            raise ConfigError(str(exc)) from exc
        if self.init == "scratch":
            for mode, policy, label in (
                (self.mlp_mode, self.mlp_policy, "mlp_rank"),
                (self.attention_param_mode, self.attn_policy, "attn_rank"),
            ):
                if mode == "spectral" and isinstance(policy, EnergyRank):
                    raise ConfigError(f"model.{label}: energy policy needs init='svd'")
        if self.mlp_mode == "spectral" and isinstance(self.mlp_policy, FixedRank):
            if not 1 <= self.mlp_policy.k <= min(self.d_model, self.d_ffn):
                raise ConfigError(
                    f"model.mlp_rank {self.mlp_policy.k} exceeds min(d_model, d_ffn)"
                    f" = {min(self.d_model, self.d_ffn)}"
                )
        if self.attention_param_mode == "spectral" and isinstance(self.attn_policy, FixedRank):
            if not 1 <= self.attn_policy.k <= self.d_model:
                raise ConfigError(f"model.attn_rank {self.attn_policy.k} exceeds d_model {self.d_model}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    def to_dict(self):
        return {k: v for k, v in asdict(self).items()}


@dataclass
class Batch:
    tokens: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.tokens.ndim != 2 or self.tokens.shape != self.targets.shape:
            raise ShapeError(f"tokens {self.tokens.shape} and targets {self.targets.shape} must match (b x seq)")

    def validate(self, vocab):
        for name in ("tokens", "targets"):
            arr = getattr(self, name)
            if arr.size and (arr.min() < 0 or arr.max() >= vocab):
                raise ShapeError(f"batch {name} contain ids outside [0, {vocab})")


class Linear:
    """Dense y = x W (+ b) with W stored in x n (input dim first)."""

    spectral = False

    def __init__(self, name, weight, bias=None):
        self.name = name
        self.weight = Parameter(f"{name}.weight", weight, "matrix")
        self.bias = None if bias is None else Parameter(f"{name}.bias", bias, "vector")
        self._x = None

    @property
    def shape(self):
        return self.weight.data.shape

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x):
        self._x = x
        y = x @ self.weight.data
        if self.bias is not None:
            y += self.bias.data
        return y

    def backward(self, gy):
        self.weight.grad += self._x.T @ gy
        if self.bias is not None:
            self.bias.grad += gy.sum(axis=0)
        return gy @ self.weight.data.T


class SpectralLinear:
    """y = ((x U) * s) V^T (+ b); U, s, V are the only stored form of the weight."""

    spectral = True

    def __init__(self, name, factors: SpectralFactors):
        self.name = name
        self.factors = factors
        self.u = Parameter(f"{name}.u", factors.u, "u")
        self.s = Parameter(f"{name}.s", factors.s, "s")
        self.v = Parameter(f"{name}.v", factors.v, "v")
        self.bias = None if factors.bias is None else Parameter(f"{name}.bias", factors.bias, "vector")
        self._cache = None

    @property
    def shape(self):
        return (self.factors.m, self.factors.n)

    def parameters(self):
        return [self.u, self.s, self.v] + ([self.bias] if self.bias is not None else [])

    def forward(self, x):
        y, self._cache = spectral_forward(self.factors, x)
        return y

    def backward(self, gy):
        g = spectral_backward(self.factors, self._cache, gy)
        self.u.grad += g.du
        self.s.grad += g.ds
        self.v.grad += g.dv
        if self.bias is not None:
            self.bias.grad += g.dbias
        return g.dx


class RMSNorm:
    def __init__(self, name, dim, dtype):
        self.gain = Parameter(f"{name}.gain", np.ones(dim, dtype=dtype), "vector")
        self._cache = None

    def parameters(self):
        return [self.gain]

    def forward(self, x):
        inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
        xhat = x * inv
        self._cache = (xhat, inv)
        return xhat * self.gain.data

    def backward(self, gy):
        xhat, inv = self._cache
        self.gain.grad += np.sum(gy * xhat, axis=tuple(range(gy.ndim - 1)))
        gxhat = gy * self.gain.data
        return inv * (gxhat - xhat * np.mean(gxhat * xhat, axis=-1, keepdims=True))


class SwiGLU:
    """down(silu(gate(x)) * up(x))."""

    def __init__(self, gate, up, down):
        self.gate, self.up, self.down = gate, up, down
        self._cache = None

    def projections(self):
        return [self.gate, self.up, self.down]

    def forward(self, x):
        a = self.gate.forward(x)
        b = self.up.forward(x)
        sig = 1.0 / (1.0 + np.exp(-a))
        act = a * sig
        self._cache = (a, b, sig, act)
        return self.down.forward(act * b)

    def backward(self, gy):
        a, b, sig, act = self._cache
        gh = self.down.backward(gy)
        ga = gh * b * (sig * (1.0 + a * (1.0 - sig)))
        gb = gh * act
        return self.gate.backward(ga) + self.up.backward(gb)


class AdditiveAttention:
    """o(q(x) + k(x) + v(x)), position-wise: no softmax, no mask.

    Keeps all four projections live in forward and backward while removing
    any sequence-length coupling.
    """

    def __init__(self, q, k, v, o, seq_len):
        self.q, self.k, self.v, self.o = q, k, v, o

    def projections(self):
        return [self.q, self.k, self.v, self.o]

    def forward(self, x, shape):
        return self.o.forward(self.q.forward(x) + self.k.forward(x) + self.v.forward(x))

    def backward(self, gy, shape):
        g = self.o.backward(gy)
        return self.q.backward(g) + self.k.backward(g) + self.v.backward(g)


class CausalSelfAttention:
    """Single-head causal softmax attention."""

    def __init__(self, q, k, v, o, seq_len):
        self.q, self.k, self.v, self.o = q, k, v, o
        self.mask = np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)
        self._cache = None

    def projections(self):
        return [self.q, self.k, self.v, self.o]

    def forward(self, x, shape):
        b, t = shape
        d = x.shape[1]
        q = self.q.forward(x).reshape(b, t, d)
        k = self.k.forward(x).reshape(b, t, d)
        v = self.v.forward(x).reshape(b, t, d)
        scale = 1.0 / math.sqrt(d)
        scores = np.einsum("btd,bsd->bts", q, k) * scale
        scores = np.where(self.mask[:t, :t], -np.inf, scores)
        scores -= scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        out = np.einsum("bts,bsd->btd", p, v)
        self._cache = (q, k, v, p, scale)
        return self.o.forward(out.reshape(b * t, d))

    def backward(self, gy, shape):
        b, t = shape
        q, k, v, p, scale = self._cache
        d = q.shape[-1]
        gout = self.o.backward(gy).reshape(b, t, d)
        gp = np.einsum("btd,bsd->bts", gout, v)
        gv = np.einsum("bts,btd->bsd", p, gout)
        gs = p * (gp - np.sum(gp * p, axis=-1, keepdims=True)) * scale
        gq = np.einsum("bts,bsd->btd", gs, k)
        gk = np.einsum("bts,btd->bsd", gs, q)
        flat = lambda a: a.reshape(b * t, d)
        return self.q.backward(flat(gq)) + self.k.backward(flat(gk)) + self.v.backward(flat(gv))


class Block:
    def __init__(self, attn_norm, attn, mlp_norm, mlp):
        self.attn_norm, self.attn = attn_norm, attn
        self.mlp_norm, self.mlp = mlp_norm, mlp

    def forward(self, x, shape):
        x = x + self.attn.forward(self.attn_norm.forward(x), shape)
        return x + self.mlp.forward(self.mlp_norm.forward(x))

    def backward(self, gx, shape):
        gx = gx + self.mlp_norm.backward(self.mlp.backward(gx))
        return gx + self.attn_norm.backward(self.attn.backward(gx, shape))


class Model:
    def __init__(self, cfg: ModelConfig, embedding, blocks, final_norm, head):
        self.cfg = cfg
        self.embedding = Parameter("embedding", embedding, "matrix")
        self.blocks = blocks
        self.final_norm = final_norm
        self.head = head  # None when tied to the embedding
        self._cache = None

    @property
    def dtype(self):
        return self.embedding.data.dtype

    def projections(self):
        out = []
        for blk in self.blocks:
            out.extend(blk.attn.projections())
            out.extend(blk.mlp.projections())
        return out

    def spectral_layers(self):
        return [p for p in self.projections() if p.spectral]

    def parameters(self):
        params = [self.embedding]
        for blk in self.blocks:
            params += blk.attn_norm.parameters()
            for proj in blk.attn.projections():
                params += proj.parameters()
            params += blk.mlp_norm.parameters()
            for proj in blk.mlp.projections():
                params += proj.parameters()
        params += self.final_norm.parameters()
        if self.head is not None:
            params += self.head.parameters()
        return params

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def spectral_param_count(self):
        return sum(layer.factors.param_count() for layer in self.spectral_layers())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, tokens):
        b, t = tokens.shape
        if t > self.cfg.seq_len:
            raise ShapeError(f"sequence length {t} exceeds model seq_len {self.cfg.seq_len}")
        x = self.embedding.data[tokens.reshape(-1)]
        norms = []
        for blk in self.blocks:
            x = blk.forward(x, (b, t))
            norms.append(x)
        xf = self.final_norm.forward(x)
        if self.head is None:
            logits = xf @ self.embedding.data.T
        else:
            logits = self.head.forward(xf)
        self._cache = (tokens, xf, norms)
        return logits.reshape(b, t, -1)

    def backward(self, glogits):
        tokens, xf, _ = self._cache
        b, t = tokens.shape
        g = glogits.reshape(b * t, -1)
        if self.head is None:
            self.embedding.grad += g.T @ xf
            gx = g @ self.embedding.data
        else:
            gx = self.head.backward(g)
        gx = self.final_norm.backward(gx)
        for blk in reversed(self.blocks):
            gx = blk.backward(gx, (b, t))
        np.add.at(self.embedding.grad, tokens.reshape(-1), gx)

    def activation_norms(self):
        if self._cache is None:
            return {}
        return {f"block{i}": float(np.linalg.norm(x)) for i, x in enumerate(self._cache[2])}


def cross_entropy(logits, targets):
    """Mean token cross-entropy and its gradient with respect to the logits."""
    v = logits.shape[-1]
    flat = logits.reshape(-1, v)
    tgt = targets.reshape(-1)
    shifted = flat - flat.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    total = expd.sum(axis=1, keepdims=True)
    n = flat.shape[0]
    loss = float(np.mean(np.log(total[:, 0]) - shifted[np.arange(n), tgt]))
    grad = expd / total
    grad[np.arange(n), tgt] -= 1.0
    grad /= n
    return loss, grad.reshape(logits.shape)


def forward_loss(model: Model, batch: Batch):
    batch.validate(model.cfg.vocab)
    logits = model.forward(batch.tokens)
    loss, glogits = cross_entropy(logits, batch.targets)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss", diagnostics=model.activation_norms())
    model._glogits = glogits
    return loss, logits


def backward(model: Model):
    """Accumulate gradients of the last forward_loss into every parameter."""
    model.backward(model._glogits)


def loss_and_grads(model: Model, batch: Batch):
    model.zero_grad()
    loss, _ = forward_loss(model, batch)
    backward(model)
    return loss


def _make_projection(name, m, n, mode, policy, cfg, seq):
    dtype = cfg.dtype
    if mode == "dense":
        rng = np.random.default_rng(seq)
        return Linear(name, (rng.standard_normal((m, n)) * cfg.init_std).astype(dtype))
    if cfg.init == "svd":
        rng = np.random.default_rng(seq)
        w = rng.standard_normal((m, n)) * cfg.init_std
        return SpectralLinear(name, from_dense(w, policy).astype(dtype))
    if policy.k > min(m, n):
        raise ConfigError(f"rank {policy.k} exceeds dims of {name} ({m}x{n})")
    return SpectralLinear(name, init_scratch(m, n, policy.k, cfg.init_std, seq, dtype=dtype))


def build_model(cfg: ModelConfig) -> Model:
    dtype = cfg.dtype
    d, f = cfg.d_model, cfg.d_ffn
    seeds = iter(np.random.SeedSequence(cfg.seed).spawn(2 + 7 * cfg.n_layers))
    rng = np.random.default_rng(next(seeds))
    embedding = (rng.standard_normal((cfg.vocab, d)) * cfg.init_std).astype(dtype)
    attn_cls = AdditiveAttention if cfg.attention_mode == "additive" else CausalSelfAttention
    blocks = []
    for i in range(cfg.n_layers):
        pre = f"layers.{i}"
        attn_proj = [
            _make_projection(f"{pre}.attn.{p}", d, d, cfg.attention_param_mode, cfg.attn_policy, cfg, next(seeds))
            for p in ("q", "k", "v", "o")
        ]
        gate = _make_projection(f"{pre}.mlp.gate", d, f, cfg.mlp_mode, cfg.mlp_policy, cfg, next(seeds))
        up = _make_projection(f"{pre}.mlp.up", d, f, cfg.mlp_mode, cfg.mlp_policy, cfg, next(seeds))
        down = _make_projection(f"{pre}.mlp.down", f, d, cfg.mlp_mode, cfg.mlp_policy, cfg, next(seeds))
        blocks.append(
            Block(
                RMSNorm(f"{pre}.attn_norm", d, dtype),
                attn_cls(*attn_proj, seq_len=cfg.seq_len),
                RMSNorm(f"{pre}.mlp_norm", d, dtype),
                SwiGLU(gate, up, down),
            )
        )
    head_seed = next(seeds)
    head = None
    if not cfg.tie_embeddings:
        hrng = np.random.default_rng(head_seed)
        head = Linear("head", (hrng.standard_normal((d, cfg.vocab)) * cfg.init_std).astype(dtype))
    return Model(cfg, embedding, blocks, RMSNorm("final_norm", d, dtype), head)


def analytic_param_count(cfg: ModelConfig, rank=None):
    """Closed-form trainable parameter count for a scratch-initialized model."""
    d, f, v = cfg.d_model, cfg.d_ffn, cfg.vocab
    mlp_k = rank if rank is not None else getattr(cfg.mlp_policy, "k", None)
    attn_k = rank if rank is not None else getattr(cfg.attn_policy, "k", None)
    per_layer = 2 * d
    per_layer += 4 * (attn_k * (2 * d + 1) if cfg.attention_param_mode == "spectral" else d * d)
    per_layer += 3 * (mlp_k * (d + f + 1) if cfg.mlp_mode == "spectral" else d * f)
    total = v * d + cfg.n_layers * per_layer + d
    if not cfg.tie_embeddings:
        total += d * v
    return total


# Dense tensor record: magic | u8 itemsize | u8 ndim | u64 dims... | data (row-major, LE)
DENSE_MAGIC = b"SCTDEN01"


def _write_dense(arr, fh):
    arr = np.ascontiguousarray(arr)
    fh.write(DENSE_MAGIC)
    fh.write(struct.pack("<BB", arr.dtype.itemsize, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_dense(fh):
    if fh.read(len(DENSE_MAGIC)) != DENSE_MAGIC:
        raise ValueError("bad dense tensor record")
    itemsize, ndim = struct.unpack("<BB", fh.read(2))
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
    dt = np.dtype(f"<f{itemsize}")
    count = int(np.prod(shape)) if ndim else 1
    return np.frombuffer(fh.read(count * itemsize), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save_checkpoint(model: Model, path, extra=None):
    """Write a checkpoint directory atomically (temp dir + rename).

    Layout: ``manifest.json`` (config + layer index) and one record file per
    spectral layer (SCTFAC01) or dense tensor (SCTDEN01).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        index = []
        spectral_params = set()
        for layer in model.spectral_layers():
            fname = f"{layer.name}.sctfac"
            with open(tmp / fname, "wb") as fh:
                write_factors(layer.factors, fh)
            index.append({"name": layer.name, "kind": "spectral", "file": fname})
            spectral_params.update(p.name for p in layer.parameters())
        for p in model.parameters():
            if p.name in spectral_params:
                continue
            fname = f"{p.name}.sctden"
            with open(tmp / fname, "wb") as fh:
                _write_dense(p.data, fh)
            index.append({"name": p.name, "kind": "dense", "file": fname})
        manifest = {"format": "sct-checkpoint/1", "config": model.cfg.to_dict(), "layers": index}
        if extra:
            manifest.update(extra)
        with open(tmp / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path) -> Model:
    path = Path(path)
    with open(path / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = ModelConfig(**manifest["config"])
    model = build_model(cfg)
    layers = {layer.name: layer for layer in model.spectral_layers()}
    params = {p.name: p for p in model.parameters()}
    for entry in manifest["layers"]:
        with open(path / entry["file"], "rb") as fh:
            if entry["kind"] == "spectral":
                f = read_factors(fh)
                layer = layers[entry["name"]]
                for name in ("u", "s", "v"):
                    target = getattr(layer.factors, name)
                    if target.shape != getattr(f, name).shape:
                        raise ShapeError(f"checkpoint {entry['name']}.{name} shape mismatch")
                    target[...] = getattr(f, name)
                if f.bias is not None:
                    layer.factors.bias[...] = f.bias
            else:
                arr = _read_dense(fh)
                target = params[entry["name"]].data
                if target.shape != arr.shape:
                    raise ShapeError(f"checkpoint {entry['name']} shape mismatch")
                target[...] = arr
    return model
