"""Non-local coarse systems built from multiscale basis functions.

Coarse unknowns are kept in two normalizations:

* integral form ``u`` (what the basis constraints produce): the matrix entry of
  block K is int_K u, a fracture entry is int_f u;
* average-pressure form ``p = u / w`` with ``w`` the continuum measures.

The transmissibility matrix ``T = Psi^T A_f Psi`` is the Galerkin operator in
integral form. The finite-volume operator ``A_T`` is built in average-pressure
form, where a constant pressure is the vector of ones, so its zero row sums
express conservation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sps

from .basis import MultiscaleBasis, basis_matrix
from .fem_fine import backward_euler

DENSE_LIMIT = 60_000_000


def _pair(Psi: sps.csc_matrix, K: sps.spmatrix) -> np.ndarray:
    """Psi^T K Psi as a dense array."""
    X = K @ Psi
    if Psi.shape[0] * Psi.shape[1] <= DENSE_LIMIT:
        P = Psi.toarray()
        X = X.toarray() if sps.issparse(X) else np.asarray(X)
        return P.T @ X
    return np.asarray((Psi.T @ X).todense())


def assemble_transmissibility(bases: list[MultiscaleBasis], A_f: sps.spmatrix) -> np.ndarray:
    """T[a, b] = a(psi_a, psi_b) in continuum order."""
    n_nodes = A_f.shape[0]
    if A_f.shape[1] != n_nodes:
        raise ValueError("stiffness matrix must be square")
    for b in bases:
        if b.nodes.size and b.nodes.max() >= n_nodes:
            raise ValueError(f"basis of block {b.block} does not fit a mesh with {n_nodes} nodes")
    return _pair(basis_matrix(bases, n_nodes), A_f)


def assemble_coarse_mass(bases: list[MultiscaleBasis], M_f: sps.spmatrix) -> np.ndarray:
    return _pair(basis_matrix(bases, M_f.shape[0]), M_f)


def finite_volume_correct(T: np.ndarray) -> np.ndarray:
    """Keep the off-diagonal couplings and replace the diagonal by minus their row sum.

    The result reads sum_b T_ab (u_b - u_a) = -g_a, i.e. ``A_T u = g`` with the
    sign of a stiffness matrix, and ``A_T @ 1 = 0``.
    """
    A = np.array(T, dtype=float, copy=True)
    np.fill_diagonal(A, 0.0)
    np.fill_diagonal(A, -A.sum(axis=1))
    return A


def to_average_pressure(K: np.ndarray, measures: np.ndarray) -> np.ndarray:
    """Rescale an integral-form coarse matrix to average-pressure form (W K W)."""
    return measures[:, None] * K * measures[None, :]


def check_source(b_f: np.ndarray, tol: float = 1e-10) -> None:
    total = float(np.sum(b_f))
    scale = float(np.abs(b_f).sum())
    if abs(total) > tol * max(scale, np.finfo(float).tiny):
        raise ValueError(f"incompatible source: integral {total:.6e} is not zero")


def coarse_rhs(b_f: np.ndarray, bases: list[MultiscaleBasis], mode: str = "galerkin",
               continua=None, coarse=None, g_cells=None, tol: float = 1e-10) -> np.ndarray:
    """Integral-form coarse load vector.

    ``galerkin``: g_a = (g, psi_a) = psi_a^T b_f.
    ``block``: g_{(i,0)} = mean of g over K_i, fracture entries 0 (needs the
    cellwise source, the coarse grid and the continuum index).
    """
    check_source(b_f, tol)
    if mode == "galerkin":
        return np.array([b.values @ b_f[b.nodes] for b in bases])
    if mode in ("block", "block_integral"):
        if continua is None or coarse is None or g_cells is None:
            raise ValueError("block rhs needs continua, coarse grid and cellwise source")
        h2 = coarse.mesh.h ** 2
        per_block = np.bincount(coarse.cell_block, weights=g_cells * h2, minlength=coarse.n_blocks)
        g = np.zeros(continua.n)
        m = continua.is_matrix
        g[m] = per_block[continua.block_of[m]] / coarse.block_area()
        return g
    raise ValueError(f"unknown rhs mode {mode!r}")


def solve_upscaled_steady(A: np.ndarray, g: np.ndarray, gauge: np.ndarray,
                          null: np.ndarray | None = None, tol: float = 1e-10,
                          compat_tol: float | None = None) -> np.ndarray:
    """Solve the singular coarse system with the gauge ``gauge @ u = 0``.

    ``null`` spans the kernel (ones for a finite-volume operator); the load
    must be orthogonal to it within ``compat_tol`` (default ``tol``).
    """
    n = A.shape[0]
    null = np.ones(n) if null is None else null
    compat_tol = tol if compat_tol is None else compat_tol
    imbalance = float(null @ g)
    scale = float(np.abs(null * g).sum())
    if abs(imbalance) > compat_tol * max(scale, np.finfo(float).tiny):
        raise ValueError(f"incompatible coarse load: imbalance {imbalance:.6e}")
    if scale == 0.0:
        return np.zeros(n)
    c = gauge / np.abs(gauge).max()
    s = np.abs(A).max()
    K = np.zeros((n + 1, n + 1))
    K[:n, :n] = A
    K[:n, n] = s * c
    K[n, :n] = s * c
    rhs = np.concatenate([g, [0.0]])
    lu = scipy.linalg.lu_factor(K)
    x = scipy.linalg.lu_solve(lu, rhs)
    for _ in range(2):
        x += scipy.linalg.lu_solve(lu, rhs - K @ x)
    u = x[:n]
    res = np.linalg.norm(A @ u + s * c * x[n] - g)
    if res > tol * np.linalg.norm(g):
        raise RuntimeError(f"coarse solve residual {res:.3e} above tolerance")
    return u


def solve_transient(A: np.ndarray, M: np.ndarray, g: np.ndarray, dt: float, t_end: float,
                    report_times=None, u0=None) -> dict:
    """Backward Euler for M u' + A u = g; (M + dt A) must be SPD."""
    return backward_euler(np.asarray(M), np.asarray(A), g, dt, t_end, report_times, u0)


def downscale(bases: list[MultiscaleBasis], u_T: np.ndarray, n_nodes: int) -> np.ndarray:
    if len(bases) != u_T.shape[0]:
        raise ValueError(f"{u_T.shape[0]} coarse values for {len(bases)} basis functions")
    return basis_matrix(bases, n_nodes) @ u_T


def error_report(u_T: np.ndarray, u_bar: np.ndarray, is_matrix: np.ndarray,
                 measures: np.ndarray | None = None) -> dict:
    """Relative percent errors in the discrete l2 norm over continuum values."""
    if u_T.shape != u_bar.shape:
        raise ValueError("coarse vectors have different lengths")
    ref = np.linalg.norm(u_bar)
    if ref == 0.0:
        raise ValueError("reference has zero norm")

    def pct(a, b):
        nb = np.linalg.norm(b)
        return float(100.0 * np.linalg.norm(a - b) / nb) if nb > 0 else 0.0

    out = {
        "error_pct": float(100.0 * np.linalg.norm(u_T - u_bar) / ref),
        "error_matrix_pct": pct(u_T[is_matrix], u_bar[is_matrix]),
        "error_fracture_pct": pct(u_T[~is_matrix], u_bar[~is_matrix]),
    }
    if measures is not None:
        p, pbar = u_T / measures, u_bar / measures
        out["error_avg_pct"] = float(100.0 * np.linalg.norm(p - pbar) / np.linalg.norm(pbar))
        wt = np.sqrt(measures)
        out["error_weighted_pct"] = float(
            100.0 * np.linalg.norm(wt * (p - pbar)) / np.linalg.norm(wt * pbar))
    return out


@dataclass
class CoarseSystem:
    """Coarse operators of one basis set.

    ``T`` and ``M_T`` are integral-form Galerkin matrices, ``A_T`` the
    finite-volume operator in average-pressure form, ``g`` the integral-form
    load. ``operator`` selects which stiffness the solves use.
    """
    bases: list
    T: np.ndarray
    M_T: np.ndarray
    g: np.ndarray
    measures: np.ndarray
    gauge: np.ndarray
    operator: str = "fv"
    A_T: np.ndarray = field(init=False)
    rhs_imbalance: float = field(init=False, default=0.0)

    def __post_init__(self):
        if self.operator not in ("fv", "galerkin"):
            raise ValueError(f"unknown coarse operator {self.operator!r}")
        self.A_T = finite_volume_correct(to_average_pressure(self.T, self.measures))

    @property
    def A_G(self) -> np.ndarray:
        return self.T

    @classmethod
    def build(cls, bases, A_f, M_f, b_f, measures, g=None, operator: str = "fv"):
        M1 = M_f @ np.ones(M_f.shape[0])
        gauge = np.array([b.values @ M1[b.nodes] for b in bases])
        if g is None:
            g = coarse_rhs(b_f, bases)
        return cls(bases, assemble_transmissibility(bases, A_f),
                   assemble_coarse_mass(bases, M_f), np.asarray(g, dtype=float),
                   np.asarray(measures, dtype=float), gauge, operator)

    def _balanced_load(self, g):
        """Average-pressure load with the localization imbalance removed.

        With localized bases sum_a w_a psi_a is not exactly 1, so the load is
        not exactly orthogonal to the constants; the defect is spread in
        proportion to the gauge weights (what the multiplier would absorb).
        """
        gp = self.measures * g
        c = self.gauge * self.measures
        imbalance = gp.sum()
        scale = np.abs(gp).sum()
        self.rhs_imbalance = float(abs(imbalance) / scale) if scale > 0 else 0.0
        return gp - imbalance * c / c.sum()

    def solve_steady(self, g=None, tol: float = 1e-10) -> np.ndarray:
        """Integral-form coarse solution with int_D u_ms = 0."""
        g = self.g if g is None else g
        if self.operator == "galerkin":
            # T is only singular for global bases; the multiplier absorbs the load defect
            return solve_upscaled_steady(self.T, g, self.gauge, null=self.measures,
                                         tol=tol, compat_tol=np.inf)
        p = solve_upscaled_steady(self.A_T, self._balanced_load(g),
                                  self.gauge * self.measures, tol=tol)
        return self.measures * p

    def solve_transient(self, dt: float, t_end: float, report_times=None, u0=None, g=None):
        g = self.g if g is None else g
        if self.operator == "galerkin":
            return solve_transient(self.T, self.M_T, g, dt, t_end, report_times, u0)
        w = self.measures
        M_p = to_average_pressure(self.M_T, w)
        p0 = None if u0 is None else np.asarray(u0) / w
        out = solve_transient(self.A_T, M_p, self._balanced_load(g), dt, t_end, report_times, p0)
        return {t: w * p for t, p in out.items()}

    def conservation_residual(self) -> float:
        """max |row sum of A_T| / max |A_T|."""
        return float(np.abs(self.A_T.sum(axis=1)).max() / np.abs(self.A_T).max())
