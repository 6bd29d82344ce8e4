"""QR retraction of spectral factors back onto the Stiefel manifold."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sct.errors import DegenerateColumnError
from sct.numerics import ortho_error, qr_thin, sign
from sct.spectral import SpectralFactors


@dataclass(frozen=True)
class OrthoReport:
    layer_id: str
    err_u: float
    err_v: float
    timestamp_step: int = 0


class RetractionError(DegenerateColumnError):
    """A degenerate column in a named layer's factor."""

    def __init__(self, layer_id, factor, column):
        self.layer_id = layer_id
        self.factor = factor
        super().__init__(column, f"layer {layer_id!r}: factor {factor} has degenerate column {column}")


def retract_qr(mat):
    """Return Q * sign(diag(R)) for the thin QR of ``mat``.

    qr_thin already normalizes diag(R) >= 0, so the sign product is the
    identity here; it is kept explicit so the retraction does not depend on
    that convention. Points already on the manifold are returned unchanged.
    """
    res = qr_thin(mat)
    q = res.q * sign(np.diag(res.r)).astype(res.q.dtype)
    return q.astype(mat.dtype, copy=False)


def retract_layer(f: SpectralFactors, layer_id="", step=0) -> OrthoReport:
    """Retract u and v in place; s and bias are left alone."""
    for name in ("u", "v"):
        mat = getattr(f, name)
        try:
            mat[...] = retract_qr(mat)
        except DegenerateColumnError as exc:
            raise RetractionError(layer_id, name, exc.column) from exc
    return OrthoReport(layer_id, ortho_error(f.u), ortho_error(f.v), step)


def repair_degenerate(mat, column, seed):
    """Replace degenerate columns with random draws until QR succeeds.

    Columns before the degenerate one keep their QR image; the random
    replacement is orthogonalized against them by the QR itself. Returns the
    retracted matrix and the number of columns replaced.
    """
    rng = np.random.default_rng(seed)
    out = np.array(mat, dtype=np.float64)
    replaced = 0
    while True:
        out[:, column] = rng.standard_normal(out.shape[0])
        replaced += 1
        try:
            return retract_qr(out).astype(mat.dtype), replaced
        except DegenerateColumnError as exc:
            column = exc.column
