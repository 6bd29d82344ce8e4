"""Analytic training-state memory: weights + grads + two Adam moments.

Only parameter-sized state is modeled. Activations, temporaries and
framework overhead are not.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import List, Optional

from sct.errors import RankError
from sct.model import ModelConfig

MB = 10**6
GB = 10**9
COLUMNS = ("layer", "m", "n", "k", "bytes_dense", "bytes_sct", "compression")

# name, (m, n): the per-model MLP shape at k=32
TABLE1_LAYERS = (
    ("SmolLM2-135M", 576, 1536),
    ("SmolLM2-360M", 1024, 4096),
    ("SmolLM2-1.7B", 2048, 8192),
    ("LLaMA-7B", 4096, 11008),
    ("Qwen-27B", 4096, 17408),
    ("LLaMA-70B", 8192, 28672),
)


@dataclass(frozen=True)
class LayerFootprint:
    name: str
    m: int
    n: int
    k: Optional[int]  # None: the layer stays dense under SCT
    bytes_dense: int
    bytes_sct: int
    compression: float

    @property
    def mb_dense(self):
        return self.bytes_dense / MB

    @property
    def mb_sct(self):
        return self.bytes_sct / MB

    def row(self):
        return {
            "layer": self.name,
            "m": self.m,
            "n": self.n,
            "k": "" if self.k is None else self.k,
            "bytes_dense": self.bytes_dense,
            "bytes_sct": self.bytes_sct,
            "compression": self.compression,
        }


def layer_footprint(m, n, k, elem_size=4, copies=4, name="") -> LayerFootprint:
    if min(m, n) < 1 or k < 1 or elem_size < 1 or copies < 1:
        raise RankError(f"layer dims, rank, elem_size and copies must be >= 1: ({m}, {n}, {k})")
    if k > min(m, n):
        raise RankError(f"rank {k} exceeds min({m}, {n}) = {min(m, n)}")
    dense = copies * m * n * elem_size
    sct = copies * k * (m + n + 1) * elem_size
    return LayerFootprint(name or f"{m}x{n}", m, n, k, dense, sct, dense / sct)


def dense_footprint(name, numel, elem_size=4, copies=4, shape=None) -> LayerFootprint:
    m, n = shape if shape is not None else (numel, 1)
    b = copies * numel * elem_size
    return LayerFootprint(name, m, n, None, b, b, 1.0)


@dataclass
class MemoryReport:
    layers: List[LayerFootprint]
    elem_size: int = 4
    copies: int = 4
    dense_param_count: int = 0  # dense-equivalent count of the projection matrices
    spectral_param_count: int = 0
    fixed_param_count: int = 0  # embeddings, norms, head: dense in both variants
    total_dense_bytes: int = field(init=False)
    total_sct_bytes: int = field(init=False)

    def __post_init__(self):
        self.total_dense_bytes = sum(r.bytes_dense for r in self.layers)
        self.total_sct_bytes = sum(r.bytes_sct for r in self.layers)

    @property
    def compression(self):
        return self.total_dense_bytes / self.total_sct_bytes

    def projection_rows(self):
        return [r for r in self.layers if _is_projection(r.name)]

    @property
    def projection_dense_bytes(self):
        return sum(r.bytes_dense for r in self.projection_rows())

    @property
    def projection_sct_bytes(self):
        return sum(r.bytes_sct for r in self.projection_rows())

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
        writer.writeheader()
        for r in self.layers:
            writer.writerow(r.row())
        return buf.getvalue()

    def to_json(self):
        return json.dumps(
            {
                "elem_size": self.elem_size,
                "copies": self.copies,
                "dense_param_count": self.dense_param_count,
                "spectral_param_count": self.spectral_param_count,
                "fixed_param_count": self.fixed_param_count,
                "total_dense_bytes": self.total_dense_bytes,
                "total_sct_bytes": self.total_sct_bytes,
                "compression": self.compression,
                "layers": [r.row() for r in self.layers],
            },
            indent=2,
        )


_PROJ = {"q", "k", "v", "o", "gate", "up", "down"}


def _is_projection(name):
    return name.split(".")[-1] in _PROJ


def projection_shapes(cfg: ModelConfig):
    """(name, m, n, is_mlp) for every attention and MLP projection, in model order."""
    d, f = cfg.d_model, cfg.d_ffn
    out = []
    for i in range(cfg.n_layers):
        for p in ("q", "k", "v", "o"):
            out.append((f"layers.{i}.attn.{p}", d, d, False))
        out.append((f"layers.{i}.mlp.gate", d, f, True))
        out.append((f"layers.{i}.mlp.up", d, f, True))
        out.append((f"layers.{i}.mlp.down", f, d, True))
    return out


def fixed_shapes(cfg: ModelConfig):
    d, v = cfg.d_model, cfg.vocab
    out = [("embedding", (v, d))]
    for i in range(cfg.n_layers):
        out.append((f"layers.{i}.attn_norm", (d, 1)))
        out.append((f"layers.{i}.mlp_norm", (d, 1)))
    out.append(("final_norm", (d, 1)))
    if not cfg.tie_embeddings:
        out.append(("head", (d, v)))
    return out


def _rank_for(cfg, is_mlp, rank):
    if rank is not None:
        return rank
    policy = cfg.mlp_policy if is_mlp else cfg.attn_policy
    if not hasattr(policy, "k"):
        raise RankError("energy rank policies have no analytic rank; pass an explicit rank")
    return policy.k


def architecture_report(cfg: ModelConfig, rank=None, elem_size=4, copies=4, include_fixed=True) -> MemoryReport:
    """Per-layer footprints following the config's spectral/dense assignment.

    ``rank`` overrides the config's fixed ranks for every spectral layer.
    Embeddings, norms and the LM head are always dense.
    """
    rows = []
    dense_params = spectral_params = 0
    for name, m, n, is_mlp in projection_shapes(cfg):
        mode = cfg.mlp_mode if is_mlp else cfg.attention_param_mode
        dense_params += m * n
        if mode == "spectral":
            k = _rank_for(cfg, is_mlp, rank)
            rows.append(layer_footprint(m, n, k, elem_size, copies, name))
            spectral_params += k * (m + n + 1)
        else:
            rows.append(dense_footprint(name, m * n, elem_size, copies, (m, n)))
    fixed = 0
    if include_fixed:
        for name, shape in fixed_shapes(cfg):
            numel = shape[0] * shape[1]
            fixed += numel
            rows.append(dense_footprint(name, numel, elem_size, copies, shape))
    return MemoryReport(
        rows,
        elem_size=elem_size,
        copies=copies,
        dense_param_count=dense_params,
        spectral_param_count=spectral_params,
        fixed_param_count=fixed,
    )


@dataclass(frozen=True)
class SweepRow:
    rank: int
    params: int
    mlp_compression: float
    est_state_bytes: int


def sweep_table(cfg: ModelConfig, ranks, elem_size=4, copies=4):
    rows = []
    for k in ranks:
        rep = architecture_report(cfg, rank=k, elem_size=elem_size, copies=copies)
        mlp = [r for r in rep.layers if r.name.split(".")[-1] in ("gate", "up", "down")]
        mlp_dense = sum(r.bytes_dense for r in mlp)
        mlp_sct = sum(r.bytes_sct for r in mlp)
        params = rep.total_sct_bytes // (elem_size * copies)
        rows.append(SweepRow(k, params, mlp_dense / mlp_sct, rep.total_sct_bytes))
    return rows


def table1(elem_size=4, copies=4, k=32):
    return [layer_footprint(m, n, k, elem_size, copies, name) for name, m, n in TABLE1_LAYERS]
