"""B-spline, cyclic and tensor-product bases with difference penalties.

Open bases use equidistant interior knots with repeated boundary knots;
cyclic bases use a uniform wrap-around knot grid so that value and
derivatives agree at the two ends of the domain.  Penalties are the usual
quadratic difference penalties D'D on neighbouring coefficients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BasisSpec:
    """Configuration of a univariate spline basis.

    kind is "bspline" (open) or "cyclic" (periodic with period hi - lo).
    A tensor-product basis is described by a pair of BasisSpec margins,
    see :func:`tensor_basis`.
    """

    kind: str = "bspline"
    n_basis: int = 10
    degree: int = 3
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if self.kind not in ("bspline", "cyclic"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree < 1:
            raise ValueError("degree must be >= 1")
        if self.n_basis < self.degree + 1:
            raise ValueError(
                f"n_basis={self.n_basis} too small for degree {self.degree}"
            )
        if not self.lo < self.hi:
            raise ValueError(f"empty domain [{self.lo}, {self.hi}]")

    @property
    def knots(self) -> np.ndarray:
        lo, hi, m, d = self.lo, self.hi, self.n_basis, self.degree
        if self.kind == "bspline":
            interior = np.linspace(lo, hi, m - d + 1)
            return np.concatenate([np.full(d, lo), interior, np.full(d, hi)])
        # cyclic: uniform grid extended d cells past each end
        h = (hi - lo) / m
        return lo + (np.arange(m + 2 * d + 1) - d) * h

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_basis": self.n_basis,
            "degree": self.degree,
            "lo": self.lo,
            "hi": self.hi,
            "knots": self.knots.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BasisSpec":
        return cls(
            kind=d["kind"],
            n_basis=int(d["n_basis"]),
            degree=int(d["degree"]),
            lo=float(d["lo"]),
            hi=float(d["hi"]),
        )


@dataclass(frozen=True)
class PenaltyMatrix:
    """Dense symmetric PSD penalty, theta' P theta for a coefficient block."""

    matrix: np.ndarray
    order: int

    def __post_init__(self):
        m = np.asarray(self.matrix, float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("penalty must be square")
        if not np.allclose(m, m.T, atol=1e-12):
            raise ValueError("penalty must be symmetric")
        object.__setattr__(self, "matrix", (m + m.T) / 2.0)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def _deboor_design(knots: np.ndarray, degree: int, x: np.ndarray) -> np.ndarray:
    """All basis values at each x via the de Boor triangular scheme.

    x must already lie inside [knots[degree], knots[-degree-1]].  Returns
    an (n, n_basis) dense matrix with n_basis = len(knots) - degree - 1.
    """
    x = np.asarray(x, float)
    n = x.shape[0]
    n_basis = len(knots) - degree - 1
    idx = np.searchsorted(knots, x, side="right") - 1
    idx = np.clip(idx, degree, n_basis - 1)

    b = np.zeros((n, degree + 1))
    b[:, 0] = 1.0
    for d in range(1, degree + 1):
        saved = np.zeros(n)
        for r in range(d):
            right = knots[idx + r + 1]
            left = knots[idx + r + 1 - d]
            denom = right - left
            term = np.where(denom > 0, b[:, r] / np.where(denom > 0, denom, 1.0), 0.0)
            b[:, r] = saved + (right - x) * term
            saved = (x - left) * term
        b[:, d] = saved

    out = np.zeros((n, n_basis))
    cols = idx[:, None] - degree + np.arange(degree + 1)[None, :]
    np.put_along_axis(out, cols, b, axis=1)
    return out


def basis_matrix(spec: BasisSpec, x) -> np.ndarray:
    """Evaluate all basis functions at each point of x, shape (n, M).

    Open bases clamp out-of-domain values to the boundary; cyclic bases
    wrap them by periodicity.  Use :func:`count_out_of_domain` to report
    clamping.
    """
    x = np.atleast_1d(np.asarray(x, float))
    if spec.kind == "cyclic":
        period = spec.hi - spec.lo
        xf = spec.lo + np.mod(x - spec.lo, period)
        ext = _deboor_design(spec.knots, spec.degree, xf)
        m, d = spec.n_basis, spec.degree
        out = ext[:, :m].copy()
        out[:, :d] += ext[:, m:]
        return out
    xc = np.clip(x, spec.lo, spec.hi)
    return _deboor_design(spec.knots, spec.degree, xc)


def evaluate_basis(spec: BasisSpec, x: float) -> np.ndarray:
    """Basis vector (B_1(x), ..., B_M(x)) at a single point."""
    return basis_matrix(spec, np.array([float(x)]))[0]


def count_out_of_domain(spec: BasisSpec, x) -> int:
    """Number of points that would be clamped (always 0 for cyclic)."""
    if spec.kind == "cyclic":
        return 0
    x = np.atleast_1d(np.asarray(x, float))
    return int(np.sum((x < spec.lo) | (x > spec.hi)))


def tensor_basis(spec1: BasisSpec, spec2: BasisSpec, x1: float, x2: float) -> np.ndarray:
    """Row-major flattened outer product of two marginal basis vectors."""
    b1 = evaluate_basis(spec1, x1)
    b2 = evaluate_basis(spec2, x2)
    return np.outer(b1, b2).ravel()


def tensor_matrix(spec1: BasisSpec, spec2: BasisSpec, x1, x2) -> np.ndarray:
    """Batch tensor-product design, shape (n, M1 * M2), row-major."""
    b1 = basis_matrix(spec1, x1)
    b2 = basis_matrix(spec2, x2)
    return (b1[:, :, None] * b2[:, None, :]).reshape(b1.shape[0], -1)


def _difference_operator(n_basis: int, order: int, cyclic: bool) -> np.ndarray:
    if order >= n_basis:
        raise ValueError(f"penalty order {order} must be < n_basis {n_basis}")
    if not cyclic:
        d = np.eye(n_basis)
        for _ in range(order):
            d = np.diff(d, axis=0)
        return d
    coeffs = [(-1.0) ** k * math.comb(order, k) for k in range(order + 1)]
    d = np.zeros((n_basis, n_basis))
    for row in range(n_basis):
        for k, c in enumerate(coeffs):
            d[row, (row + k) % n_basis] += c
    return d


def difference_penalty(n_basis: int, order: int = 2, cyclic: bool = False) -> PenaltyMatrix:
    """Quadratic difference penalty D'D of the given order.

    The open variant has a null space of dimension `order` (polynomial
    coefficient sequences of degree < order); the cyclic variant wraps
    indices and only leaves constants unpenalized.
    """
    d = _difference_operator(n_basis, order, cyclic)
    return PenaltyMatrix(d.T @ d, order=order)


def tensor_penalty(p1: PenaltyMatrix, p2: PenaltyMatrix) -> PenaltyMatrix:
    """Penalty for a row-major tensor block: P1 (x) I  +  I (x) P2."""
    i1 = np.eye(p1.size)
    i2 = np.eye(p2.size)
    mat = np.kron(p1.matrix, i2) + np.kron(i1, p2.matrix)
    return PenaltyMatrix(mat, order=max(p1.order, p2.order))


def penalty_for(spec: BasisSpec, order: int = 2) -> PenaltyMatrix:
    """Default difference penalty matching a basis spec."""
    return difference_penalty(spec.n_basis, order=order, cyclic=spec.kind == "cyclic")
