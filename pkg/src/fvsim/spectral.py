"""Principal eigentriple of ``L = 1/2 sigma^2 d^2 + b d - kappa`` on an interval.

The operator is discretised by second order central differences on ``n + 1``
uniform nodes with mirrored ghost nodes for the Neumann condition. The
resulting matrix ``A`` is tridiagonal; when every product of opposite
off-diagonal entries is positive (always true for ``b = 0`` and for small
cell Peclet numbers) it is diagonally similar to a symmetric matrix and the
top eigenpair comes from a tridiagonal symmetric solver. Otherwise a dense
solve is used for ``n <= 2048`` and shifted inverse iteration beyond.

``pi_weights`` is the left principal eigenvector of ``A`` itself. Because the
ghost-node scheme is symmetric with respect to trapezoid weights, this vector
already equals "density times quadrature weight" and the discrete pairing
``<pi, f> = sum_i w_i f_i`` satisfies ``<pi, A f> = -lambda <pi, f>`` exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg as sla
from scipy import sparse
from scipy.sparse import linalg as spla

from .domain import CoefficientField, FormSpec

__all__ = [
    "SolverFailure",
    "EigenTriple",
    "DerivedScalars",
    "generator_matrix",
    "principal_eigentriple",
    "carre_du_champ",
    "theta",
    "effective_population",
    "derived_scalars",
    "simpson",
    "q_process_field",
    "toy_reference",
]

DENSE_LIMIT = 2048


class SolverFailure(RuntimeError):
    """The computed principal eigenvector was not strictly positive."""


def simpson(values: np.ndarray, h: float) -> float:
    """Composite Simpson rule on uniform nodes (trapezoid fallback for an odd panel count)."""
    v = np.asarray(values, dtype=float)
    n = v.size - 1
    if n < 2:
        return float(0.5 * h * (v[0] + v[-1])) if n == 1 else 0.0
    if n % 2:
        return simpson(v[:-1], h) + 0.5 * h * (v[-2] + v[-1])
    return float(h / 3 * (v[0] + v[-1] + 4 * v[1:-1:2].sum() + 2 * v[2:-1:2].sum()))


def _tridiagonal(field: CoefficientField, n: int, with_killing: bool = True):
    lo, hi = field.lo[0], field.hi[0]
    grid = np.linspace(lo, hi, n + 1)
    h = (hi - lo) / n
    s2 = field.sigma_values(grid)[:, 0] ** 2
    b = field.drift_values(grid)[:, 0]
    diff = 0.5 * s2 / h**2
    upper = diff[:-1] + b[:-1] / (2 * h)
    lower = diff[1:] - b[1:] / (2 * h)
    # mirrored ghost nodes: the drift term cancels and the diffusion doubles
    upper[0] = 2 * diff[0]
    lower[-1] = 2 * diff[-1]
    diag = -2 * diff
    if with_killing:
        diag = diag - field.kappa_values(grid)
    return grid, h, diag, upper, lower


def generator_matrix(field: CoefficientField, n: int, with_killing: bool = True) -> sparse.csr_matrix:
    """Sparse discretisation of ``L`` (or of ``L0`` when ``with_killing`` is false)."""
    _, _, diag, upper, lower = _tridiagonal(field, n, with_killing)
    return sparse.diags([lower, diag, upper], [-1, 0, 1], format="csr")


@dataclass(frozen=True)
class EigenTriple:
    grid: np.ndarray
    pi_weights: np.ndarray
    lam: float
    phi_values: np.ndarray
    residual: float
    method: str

    @property
    def h(self) -> float:
        return float(self.grid[1] - self.grid[0])

    @property
    def n(self) -> int:
        return self.grid.size - 1

    def pair(self, f) -> float:
        """``<pi, f>`` for grid values ``f``."""
        return float(np.dot(self.pi_weights, f))

    def phi_at(self, x) -> np.ndarray:
        return np.interp(np.asarray(x, dtype=float).ravel(), self.grid, self.phi_values)

    def log_phi_gradient(self) -> np.ndarray:
        """``phi'/phi`` on the grid (central differences, zero at the ends)."""
        g = np.gradient(self.phi_values, self.h)
        g[0] = g[-1] = 0.0
        return g / self.phi_values

    def pi_density(self) -> np.ndarray:
        """Density of pi with respect to Lebesgue measure at the nodes."""
        q = np.full(self.grid.size, self.h)
        q[0] = q[-1] = self.h / 2
        # trapezoid integral of this density is sum(pi_weights) = 1
        return self.pi_weights / q

    def bin_masses(self, edges, density: np.ndarray | None = None) -> np.ndarray:
        """Masses of consecutive bins under the piecewise-linear interpolant of ``density``.

        With ``density=None`` the pi density is used.
        """
        dens = self.pi_density() if density is None else np.asarray(density, dtype=float)
        edges = np.asarray(edges, dtype=float)
        fine = np.union1d(self.grid, edges)
        vals = np.interp(fine, self.grid, dens)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (vals[1:] + vals[:-1]) * np.diff(fine))])
        at = np.interp(edges, fine, cum)
        m = np.diff(at)
        return m / m.sum()

    def to_json(self) -> dict:
        ds = derived_scalars(self)
        return {
            "grid": self.grid.tolist(),
            "pi_weights": self.pi_weights.tolist(),
            "lambda": self.lam,
            "phi_values": self.phi_values.tolist(),
            "theta": ds.theta,
            "n_eff_ratio": ds.n_eff_ratio,
            "pi_kappa": ds.pi_kappa,
            "residual": self.residual,
            "method": self.method,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EigenTriple":
        return cls(np.asarray(d["grid"]), np.asarray(d["pi_weights"]), float(d["lambda"]),
                   np.asarray(d["phi_values"]), float(d.get("residual", float("nan"))), d.get("method", "json"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    def rescaled(self, c: float) -> "EigenTriple":
        return EigenTriple(self.grid, self.pi_weights, self.lam, c * self.phi_values, self.residual, self.method)


def _top_symmetrizable(diag, upper, lower):
    prod = upper * lower
    if np.any(prod <= 0):
        return None
    off = np.sqrt(prod)
    # D^{-1} A D = S with d_{i+1}/d_i = sqrt(lower_i / upper_i)
    logd = np.concatenate([[0.0], np.cumsum(0.5 * (np.log(lower) - np.log(upper)))])
    logd -= logd.max()
    d = np.exp(logd)
    n = diag.size
    w, v = sla.eigh_tridiagonal(diag, off, select="i", select_range=(n - 1, n - 1))
    v = v[:, 0]
    return float(w[0]), d * v, v / d


def _top_dense(A: np.ndarray):
    w, vl, vr = sla.eig(A, left=True, right=True)
    k = int(np.argmax(w.real))
    return float(w[k].real), vr[:, k].real, vl[:, k].real


def _top_shift_invert(A: sparse.csr_matrix, diag, upper, lower):
    # Gershgorin: every eigenvalue has real part below this shift
    shift = float(np.max(diag + np.concatenate([upper, [0]]) + np.concatenate([[0], lower]))) + 1.0
    mu, vr = spla.eigs(A, k=1, sigma=shift, which="LM")
    _, vl = spla.eigs(A.T.tocsc(), k=1, sigma=shift, which="LM")
    return float(mu[0].real), vr[:, 0].real, vl[:, 0].real


def principal_eigentriple(field: CoefficientField, n: int = 1024, method: str = "auto") -> EigenTriple:
    """Top eigenpair of the discretised ``L`` with ``<pi, 1> = <pi, phi> = 1``.

    Args:
        field: one dimensional coefficient field.
        n: number of grid cells (``n + 1`` nodes), at least 16.
        method: ``"auto"``, ``"tridiagonal"``, ``"dense"`` or ``"shift-invert"``.

    Raises:
        SolverFailure: if either eigenvector cannot be made strictly positive.
    """
    if field.dim != 1:
        raise ValueError("the eigensolver is one dimensional")
    if n < 16:
        raise ValueError("need n >= 16")
    grid, h, diag, upper, lower = _tridiagonal(field, n)
    A = sparse.diags([lower, diag, upper], [-1, 0, 1], format="csr")
    res = None
    used = method
    if method in ("auto", "tridiagonal"):
        res = _top_symmetrizable(diag, upper, lower)
        used = "tridiagonal"
        if res is None and method == "tridiagonal":
            raise SolverFailure("operator is not symmetrizable on this grid")
    if res is None:
        if method == "dense" or (method == "auto" and n + 1 <= DENSE_LIMIT + 1):
            res = _top_dense(A.toarray())
            used = "dense"
        else:
            res = _top_shift_invert(A, diag, upper, lower)
            used = "shift-invert"
    mu, phi, left = res
    phi = phi * np.sign(phi[np.argmax(np.abs(phi))])
    left = left * np.sign(left[np.argmax(np.abs(left))])
    if np.any(phi <= 0) or np.any(left < 0):
        raise SolverFailure(f"principal eigenvector is not positive (min phi {phi.min():.3e}, min pi {left.min():.3e})")
    pi = left / left.sum()
    phi = phi / np.dot(pi, phi)
    resid = float(np.max(np.abs(A @ phi - mu * phi)))
    return EigenTriple(grid, pi, -mu, phi, resid, used)


def carre_du_champ(triple: EigenTriple, field: CoefficientField, f: np.ndarray | None = None) -> np.ndarray:
    """Discrete ``Gamma0(f) = L0(f^2) - 2 f L0 f``, by default for ``f = phi``.

    In the interior this is ``sigma^2/2 * ((f_{i+1}-f_i)^2 + (f_{i-1}-f_i)^2) / h^2`` plus a
    drift correction of order ``h^2``; it converges to ``sigma^2 f'^2``.
    """
    f = triple.phi_values if f is None else np.asarray(f, dtype=float)
    L0 = generator_matrix(field, triple.n, with_killing=False)
    return L0 @ (f * f) - 2 * f * (L0 @ f)


def theta(triple: EigenTriple) -> float:
    m1 = triple.pair(triple.phi_values)
    m2 = triple.pair(triple.phi_values**2)
    return 2 * triple.lam * m2 / m1**2


def effective_population(triple: EigenTriple, N: int) -> float:
    if N < 2:
        raise ValueError("N must be at least 2")
    return triple.lam * N / theta(triple)


@dataclass(frozen=True)
class DerivedScalars:
    theta: float
    n_eff_ratio: float
    gamma0_phi: np.ndarray
    pi_kappa: float


def derived_scalars(triple: EigenTriple, field: CoefficientField | None = None) -> DerivedScalars:
    th = theta(triple)
    if field is None:
        return DerivedScalars(th, triple.lam / th, np.full(triple.grid.size, np.nan), float("nan"))
    g = carre_du_champ(triple, field)
    return DerivedScalars(th, triple.lam / th, g, triple.pair(field.kappa_values(triple.grid)))


def q_process_field(field: CoefficientField, triple: EigenTriple) -> CoefficientField:
    """The unkilled reflected diffusion with drift ``b + sigma^2 phi'/phi`` tabulated on the grid."""
    s2 = field.sigma_values(triple.grid)[:, 0] ** 2
    b = field.drift_values(triple.grid)[:, 0] + s2 * triple.log_phi_gradient()
    return CoefficientField(field.lo, field.hi,
                            FormSpec("tabulated", {"grid_lo": float(triple.grid[0]), "grid_hi": float(triple.grid[-1]),
                                                   "values": b.tolist()}),
                            field.sigma, FormSpec("zero"), 0.0)


def toy_reference(x) -> np.ndarray:
    """Closed-form right eigenfunction ``2 + cos(pi x)`` of the cosine-killing example."""
    return 2.0 + np.cos(math.pi * np.asarray(x, dtype=float))
