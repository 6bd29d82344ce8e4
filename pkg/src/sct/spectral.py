"""SpectralLinear parameterization: W = U diag(s) V^T, never formed densely.

The layer maps x (b x m) to y (b x n) as ``((x @ U) * s) @ V.T + bias``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from sct.errors import MaterializationError, NumericError, RankError, ShapeError
from sct.numerics import random_orthonormal, svd_truncated

MAGIC = b"SCTFAC01"
# to_dense refuses above this many elements: materializing is a test/debug path
DENSE_GUARD = 2**24
DEFAULT_TARGET_STD = 0.02


@dataclass
class SpectralFactors:
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.u.ndim != 2 or self.v.ndim != 2 or self.s.ndim != 1:
            raise ShapeError("u, v must be 2-D and s 1-D")
        k = self.s.shape[0]
        if self.u.shape[1] != k or self.v.shape[1] != k:
            raise ShapeError(
                f"factor ranks disagree: u {self.u.shape}, s {self.s.shape}, v {self.v.shape}"
            )
        if not 1 <= k <= min(self.m, self.n):
            raise RankError(f"rank {k} outside [1, {min(self.m, self.n)}] for {self.m}x{self.n}")
        if self.bias is not None and self.bias.shape != (self.n,):
            raise ShapeError(f"bias shape {self.bias.shape} != ({self.n},)")

    @property
    def m(self):
        return self.u.shape[0]

    @property
    def n(self):
        return self.v.shape[0]

    @property
    def k(self):
        return self.s.shape[0]

    @property
    def dtype(self):
        return self.u.dtype

    def param_count(self):
        return self.k * (self.m + self.n + 1) + (self.n if self.bias is not None else 0)

    def copy(self):
        return SpectralFactors(
            self.u.copy(),
            self.s.copy(),
            self.v.copy(),
            None if self.bias is None else self.bias.copy(),
        )

    def astype(self, dtype):
        cast = lambda a: None if a is None else a.astype(dtype)
        return SpectralFactors(cast(self.u), cast(self.s), cast(self.v), cast(self.bias))


@dataclass
class ForwardCache:
    x: np.ndarray
    h: np.ndarray


@dataclass
class SpectralGrads:
    du: np.ndarray
    ds: np.ndarray
    dv: np.ndarray
    dx: np.ndarray
    dbias: Optional[np.ndarray] = None


@dataclass(frozen=True)
class FixedRank:
    k: int


@dataclass(frozen=True)
class EnergyRank:
    tau: float


RankPolicy = Union[FixedRank, EnergyRank]


def parse_rank_policy(value) -> RankPolicy:
    """Accept ``8``, ``{"k": 8}`` or ``{"energy": 0.95}``."""
    if isinstance(value, (FixedRank, EnergyRank)):
        return value
    if isinstance(value, bool):
        raise RankError(f"invalid rank policy {value!r}")
    if isinstance(value, int):
        return FixedRank(value)
    if isinstance(value, dict) and len(value) == 1:
        (key, val), = value.items()
        if key == "k" and isinstance(val, int) and not isinstance(val, bool):
            return FixedRank(val)
        if key == "energy" and isinstance(val, (int, float)) and not isinstance(val, bool):
            return EnergyRank(float(val))
    raise RankError(f"invalid rank policy {value!r}; use an int, {{'k': int}} or {{'energy': float}}")


def spectral_forward(f: SpectralFactors, x):
    if x.ndim != 2 or x.shape[1] != f.m:
        raise ShapeError(f"input shape {x.shape} incompatible with m={f.m}")
    h = x @ f.u
    y = (h * f.s) @ f.v.T
    if f.bias is not None:
        y += f.bias
    return y, ForwardCache(x=x, h=h)


def spectral_backward(f: SpectralFactors, cache: ForwardCache, gy) -> SpectralGrads:
    """Reverse-mode gradients of the three-product chain; nothing m x n is built."""
    b = cache.x.shape[0]
    if gy.shape != (b, f.n):
        raise ShapeError(f"upstream gradient shape {gy.shape} != ({b}, {f.n})")
    if not np.all(np.isfinite(gy)):
        raise NumericError("non-finite upstream gradient in spectral_backward")
    gv = gy @ f.v
    gvs = gv * f.s
    return SpectralGrads(
        du=cache.x.T @ gvs,
        ds=np.einsum("bk,bk->k", cache.h, gv),
        dv=gy.T @ (cache.h * f.s),
        dx=gvs @ f.u.T,
        dbias=gy.sum(axis=0) if f.bias is not None else None,
    )


def energy_rank(sigma, tau):
    """Smallest k whose leading sigma^2 mass reaches ``tau`` (at least 1)."""
    if not 0.0 < tau <= 1.0:
        raise RankError(f"energy threshold {tau} outside (0, 1]")
    energy = np.asarray(sigma, dtype=np.float64) ** 2
    total = energy.sum()
    if total == 0.0:
        return 1
    nonzero = int(np.count_nonzero(energy))
    cumulative = np.cumsum(energy) / total
    hits = np.nonzero(cumulative >= tau)[0]
    # rounding can leave the last cumulative value a hair under 1.0
    k = int(hits[0]) + 1 if hits.size else nonzero
    return max(1, min(k, nonzero))


def from_dense(w, rank_policy, bias=None) -> SpectralFactors:
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"from_dense needs a 2-D matrix, got {w.shape}")
    policy = parse_rank_policy(rank_policy)
    m, n = w.shape
    if isinstance(policy, FixedRank) and not 1 <= policy.k <= min(m, n):
        raise RankError(f"rank {policy.k} outside [1, {min(m, n)}] for {m}x{n}")
    dtype = w.dtype if w.dtype.kind == "f" else np.float64
    svd = svd_truncated(w.astype(np.float64))
    k = policy.k if isinstance(policy, FixedRank) else energy_rank(svd.sigma, policy.tau)
    return SpectralFactors(
        u=np.ascontiguousarray(svd.u[:, :k], dtype=dtype),
        s=np.ascontiguousarray(svd.sigma[:k], dtype=dtype),
        v=np.ascontiguousarray(svd.v[:, :k], dtype=dtype),
        bias=None if bias is None else np.asarray(bias, dtype=dtype).copy(),
    )


def to_dense(f: SpectralFactors, guard=DENSE_GUARD):
    if f.m * f.n > guard:
        raise MaterializationError(
            f"refusing to materialize {f.m}x{f.n} ({f.m * f.n} elements) above guard {guard}"
        )
    return (f.u * f.s) @ f.v.T


def init_scratch(m, n, k, target_std=DEFAULT_TARGET_STD, seed=0, dtype=np.float64, bias=False):
    """Random orthonormal factors with s scaled to the Frobenius energy of a dense init.

    Every s_i = target_std * sqrt(m n / k), so ||U diag(s) V^T||_F^2 equals
    target_std^2 * m * n, the expected energy of an i.i.d. dense init.
    """
    if not 1 <= k <= min(m, n):
        raise RankError(f"rank {k} outside [1, {min(m, n)}] for {m}x{n}")
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    su, sv = seq.spawn(2)
    return SpectralFactors(
        u=random_orthonormal(m, k, su, dtype=dtype),
        s=np.full(k, target_std * np.sqrt(m * n / k), dtype=dtype),
        v=random_orthonormal(n, k, sv, dtype=dtype),
        bias=np.zeros(n, dtype=dtype) if bias else None,
    )


# Binary record: magic | u64 m | u64 n | u64 k | u8 itemsize | u8 has_bias
#                | u (m*k) | s (k) | v (n*k) | bias (n), little-endian, row-major.
_HEADER = struct.Struct("<QQQBB")
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def write_factors(f: SpectralFactors, fh):
    dt = _DTYPES.get(f.dtype.itemsize)
    if dt is None:
        raise ShapeError(f"unsupported factor dtype {f.dtype}")
    fh.write(MAGIC)
    fh.write(_HEADER.pack(f.m, f.n, f.k, dt.itemsize, int(f.bias is not None)))
    for arr in (f.u, f.s, f.v) + ((f.bias,) if f.bias is not None else ()):
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_factors(fh) -> SpectralFactors:
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    m, n, k, itemsize, has_bias = _HEADER.unpack(fh.read(_HEADER.size))
    if itemsize not in _DTYPES:
        raise ValueError(f"unsupported itemsize {itemsize}")
    dt = _DTYPES[itemsize]

    def take(count, shape):
        raw = fh.read(count * itemsize)
        if len(raw) != count * itemsize:
            raise ValueError("truncated factor record")
        return np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))

    u = take(m * k, (m, k))
    s = take(k, (k,))
    v = take(n * k, (n, k))
    bias = take(n, (n,)) if has_bias else None
    return SpectralFactors(u, s, v, bias)


def factors_to_bytes(f: SpectralFactors) -> bytes:
    buf = io.BytesIO()
    write_factors(f, buf)
    return buf.getvalue()


def factors_from_bytes(data: bytes) -> SpectralFactors:
    return read_factors(io.BytesIO(data))
