"""Dense linear-algebra kernels: product, Householder QR, one-sided Jacobi SVD.

Matrices are 2-D numpy arrays (float64 on verification paths, float32
allowed on training paths).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sct.errors import ConvergenceError, DegenerateColumnError, ShapeError

# |r_ii| below this means the column was (exactly) dependent on earlier ones.
DEGENERATE_PIVOT = 1e-300
JACOBI_MAX_SWEEPS = 60
JACOBI_TOL = 1e-14


@dataclass(frozen=True)
class QrResult:
    q: np.ndarray
    r: np.ndarray


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray


def sign(x):
    """Elementwise sign with sign(0) = +1."""
    return np.where(np.asarray(x) < 0, -1.0, 1.0)


def _as_matrix(a, name="a"):
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a, b):
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def qr_thin(a) -> QrResult:
    """Thin Householder QR with a nonnegative diagonal on ``r``.

    Sign flips needed to make ``diag(r) >= 0`` are absorbed into the columns
    of ``q``, so an input that already has orthonormal columns comes back as
    ``q == a`` (up to rounding) and ``r == I``.
    """
    a = _as_matrix(a)
    m, k = a.shape
    if m < k:
        raise ShapeError(f"qr_thin needs rows >= cols, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ShapeError("qr_thin input contains non-finite values")

    r = np.array(a, dtype=a.dtype if a.dtype.kind == "f" else np.float64, copy=True)
    vs = []
    for j in range(k):
        x = r[j:, j]
        normx = np.linalg.norm(x)
        if normx < DEGENERATE_PIVOT:
            raise DegenerateColumnError(j)
        alpha = -sign(x[0]) * normx
        v = x.copy()
        v[0] -= alpha
        vnorm = np.linalg.norm(v)
        if vnorm == 0.0:
            vs.append(None)
            continue
        v /= vnorm
        r[j:, j:] -= 2.0 * np.outer(v, v @ r[j:, j:])
        vs.append(v)

    q = np.eye(m, k, dtype=r.dtype)
    for j in range(k - 1, -1, -1):
        v = vs[j]
        if v is None:
            continue
        q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])

    r = np.triu(r[:k, :])
    d = sign(np.diag(r)).astype(r.dtype)
    q *= d[None, :]
    r *= d[:, None]
    return QrResult(q=q, r=r)


def _round_robin(n):
    """Pairings for one Jacobi sweep: n-1 rounds of disjoint (p, q) pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        ps, qs = [], []
        for i in range(size // 2):
            p, q = players[i], players[size - 1 - i]
            if p >= 0 and q >= 0:
                ps.append(min(p, q))
                qs.append(max(p, q))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_orthonormal(u, good):
    """Replace the columns of ``u`` not flagged in ``good`` by orthonormal fill."""
    m, r = u.shape
    basis = [u[:, j] for j in range(r) if good[j]]
    out = u.copy()
    candidate = 0
    for j in range(r):
        if good[j]:
            continue
        while True:
            e = np.zeros(m, dtype=u.dtype)
            e[candidate % m] = 1.0
            candidate += 1
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > 0.5:
                e /= nrm
                break
        out[:, j] = e
        basis.append(e)
    return out


def svd_truncated(a, max_sweeps=JACOBI_MAX_SWEEPS) -> SvdResult:
    """Thin SVD via one-sided Jacobi; callers truncate to the leading k.

    Returns u (m x r), sigma (r, descending) and v (n x r) with
    r = min(m, n). Column pairs are rotated in round-robin order, one
    vectorized batch of disjoint pairs at a time.
    """
    a = _as_matrix(a)
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError(f"svd needs a non-empty matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ShapeError("svd input contains non-finite values")
    if a.shape[0] < a.shape[1]:
        res = svd_truncated(a.T, max_sweeps)
        return SvdResult(u=res.v, sigma=res.sigma, v=res.u)

    work = np.array(a, dtype=np.float64 if a.dtype.kind != "f" else a.dtype, copy=True)
    m, n = work.shape
    eps = np.finfo(work.dtype).eps
    tol = max(JACOBI_TOL, m * eps)
    v = np.eye(n, dtype=work.dtype)
    rounds = _round_robin(n) if n > 1 else []
    fro = np.linalg.norm(work)
    # pairs whose columns are both below this are numerically zero already
    floor = (eps * fro) ** 2

    off = 0.0
    for _ in range(max_sweeps):
        off = 0.0
        for p, q in rounds:
            ap, aq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            scale = np.sqrt(alpha * beta)
            active = (scale > floor) & (np.abs(gamma) > tol * scale)
            if not np.any(active):
                continue
            off = max(off, float(np.max(np.abs(gamma[active]) / scale[active])))
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = work[:, p], work[:, q]
            work[:, p] = c * ap - s * aq
            work[:, q] = s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if off == 0.0:
            break
    else:
        raise ConvergenceError(f"one-sided Jacobi did not converge in {max_sweeps} sweeps", off)

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]

    good = sigma > max(m, n) * eps * (sigma[0] if sigma.size else 0.0)
    good &= sigma > 0
    u = np.zeros_like(work)
    u[:, good] = work[:, good] / sigma[good]
    if not np.all(good):
        u = _complete_orthonormal(u, good)
    return SvdResult(u=u, sigma=sigma, v=v)


def random_orthonormal(m, k, seed, dtype=np.float64):
    """Seeded m x k matrix with orthonormal columns (QR of a Gaussian draw)."""
    if k < 1 or m < 1:
        raise ShapeError(f"random_orthonormal needs m, k >= 1, got ({m}, {k})")
    if k > m:
        raise ShapeError(f"random_orthonormal needs k <= m, got ({m}, {k})")
    g = np.random.default_rng(seed).standard_normal((m, k))
    return qr_thin(g).q.astype(dtype, copy=False)


def ortho_error(mat):
    """max |M^T M - I| for a matrix that should have orthonormal columns."""
    mat = np.asarray(mat, dtype=np.float64)
    gram = mat.T @ mat
    return float(np.max(np.abs(gram - np.eye(gram.shape[0]))))
