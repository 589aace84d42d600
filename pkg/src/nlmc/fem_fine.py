"""Fine-scale discrete-fracture Q1 finite elements.

Matrix and fracture share nodal unknowns: fractures add a 1D two-point
stiffness along their edges on top of the bilinear matrix stiffness.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .geometry import ContinuumIndex, FineMesh, FractureNetwork, edge_lengths

# Q1 element matrices on a square, corners counterclockwise from lower-left
Q1_STIFFNESS = np.array([
    [4.0, -1.0, -2.0, -1.0],
    [-1.0, 4.0, -1.0, -2.0],
    [-2.0, -1.0, 4.0, -1.0],
    [-1.0, -2.0, -1.0, 4.0],
]) / 6.0
Q1_MASS = np.array([
    [4.0, 2.0, 1.0, 2.0],
    [2.0, 4.0, 2.0, 1.0],
    [1.0, 2.0, 4.0, 2.0],
    [2.0, 1.0, 2.0, 4.0],
]) / 36.0


def cell_field(mesh: FineMesh, value) -> np.ndarray:
    """Broadcast a scalar, (n_cells,) or (ny, nx) array to a flat cell field."""
    v = np.asarray(value, dtype=float)
    if v.ndim == 0:
        return np.full(mesh.n_cells, float(v))
    v = v.reshape(-1)
    if v.size != mesh.n_cells:
        raise ValueError(f"cell field has {v.size} entries, mesh has {mesh.n_cells} cells")
    return v


def _assemble_cells(mesh, element, coef, cells=None):
    cn = mesh.cell_nodes if cells is None else mesh.cell_nodes[cells]
    c = coef if cells is None else coef[cells]
    rows = np.repeat(cn, 4, axis=1).ravel()
    cols = np.tile(cn, (1, 4)).ravel()
    vals = (c[:, None] * element.ravel()[None, :]).ravel()
    return rows, cols, vals


def _assemble_edges(edges, coef, element):
    rows = np.repeat(edges, 2, axis=1).ravel()
    cols = np.tile(edges, (1, 2)).ravel()
    vals = (coef[:, None] * element.ravel()[None, :]).ravel()
    return rows, cols, vals


def assemble_stiffness(mesh: FineMesh, network: FractureNetwork, kappa_m=1.0,
                       cells=None, edge_mask=None) -> sps.csr_matrix:
    """Stiffness of a(u, v) = int kappa grad u . grad v + sum_f c_f int u' v'.

    ``cells`` / ``edge_mask`` restrict assembly to part of the mesh (used for
    block-local forms); the result always has full fine dimension.
    """
    kappa = cell_field(mesh, kappa_m)
    bad = np.flatnonzero(~(kappa > 0))
    if bad.size:
        raise ValueError(f"matrix permeability must be positive; cell {bad[0]} has {kappa[bad[0]]}")
    for f in network.fractures:
        if not f.conductivity > 0:
            raise ValueError(f"fracture {f.id} has nonpositive conductivity {f.conductivity}")
    r, c, v = _assemble_cells(mesh, Q1_STIFFNESS, kappa, cells)
    parts = [(r, c, v)]
    edges = network.edges
    if edges.shape[0]:
        cond = network.edge_conductivity
        if edge_mask is not None:
            edges, cond = edges[edge_mask], cond[edge_mask]
        two_point = np.array([[1.0, -1.0], [-1.0, 1.0]])
        parts.append(_assemble_edges(edges, cond / edge_lengths(mesh, edges), two_point))
    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    vals = np.concatenate([p[2] for p in parts])
    n = mesh.n_nodes
    return sps.csr_matrix((vals, (rows, cols)), shape=(n, n))


def assemble_mass(mesh: FineMesh, network: FractureNetwork | None = None,
                  fracture_mass: bool = False, storage: float = 1.0) -> sps.csr_matrix:
    """Consistent Q1 mass matrix.

    Fracture lines carry no 2D measure. With ``fracture_mass`` a 1D consistent
    mass ``storage * int_f u v`` is added along the fracture edges.
    """
    r, c, v = _assemble_cells(mesh, Q1_MASS * mesh.h ** 2, np.ones(mesh.n_cells))
    if fracture_mass and network is not None and network.edges.shape[0]:
        lengths = edge_lengths(mesh, network.edges)
        r2, c2, v2 = _assemble_edges(network.edges, storage * lengths / 6.0,
                                     np.array([[2.0, 1.0], [1.0, 2.0]]))
        r, c, v = np.concatenate([r, r2]), np.concatenate([c, c2]), np.concatenate([v, v2])
    n = mesh.n_nodes
    return sps.csr_matrix((v, (r, c)), shape=(n, n))


def averaging_matrix(continua: ContinuumIndex, mesh: FineMesh) -> sps.csr_matrix:
    """Integral functionals of every continuum, one row each.

    Matrix rows integrate a Q1 field exactly over the block; fracture rows use
    the trapezoid rule along the component's edges.
    """
    rows, cols, vals = [], [], []
    quarter = mesh.h ** 2 / 4.0
    for k, cont in enumerate(continua.entries):
        if cont.is_matrix:
            ix, iy = mesh.node_ij(cont.nodes)
            ixs, iys = np.unique(ix), np.unique(iy)
            wx = np.where((ix == ixs[0]) | (ix == ixs[-1]), 1.0, 2.0)
            wy = np.where((iy == iys[0]) | (iy == iys[-1]), 1.0, 2.0)
            rows.append(np.full(cont.nodes.size, k))
            cols.append(cont.nodes)
            vals.append(quarter * wx * wy)
        else:
            half = edge_lengths(mesh, cont.edges) / 2.0
            rows.append(np.full(2 * len(half), k))
            cols.append(cont.edges.ravel())
            vals.append(np.repeat(half, 2))
    return sps.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(continua.n, mesh.n_nodes),
    )


def average_fine(u_f: np.ndarray, C: sps.spmatrix) -> np.ndarray:
    if C.shape[1] != u_f.shape[0]:
        raise ValueError(f"field of length {u_f.shape[0]} does not match {C.shape[1]} nodes")
    return C @ u_f


def box_source(mesh: FineMesh, boxes) -> np.ndarray:
    """Cellwise source from (x0, x1, y0, y1, value) boxes, sampled at cell centres."""
    g = np.zeros(mesh.n_cells)
    centres = mesh.coords[mesh.cell_nodes].mean(axis=1)
    for x0, x1, y0, y1, value in boxes:
        inside = ((centres[:, 0] >= x0) & (centres[:, 0] <= x1)
                  & (centres[:, 1] >= y0) & (centres[:, 1] <= y1))
        g[inside] += value
    return g


def load_vector(mesh: FineMesh, g_cells: np.ndarray) -> np.ndarray:
    """Exact (g, phi_k) for a cellwise constant source."""
    b = np.zeros(mesh.n_nodes)
    np.add.at(b, mesh.cell_nodes.ravel(), np.repeat(g_cells * mesh.h ** 2 / 4.0, 4))
    return b


def solve_fine_steady(A: sps.spmatrix, b: np.ndarray, weights: np.ndarray,
                      tol: float = 1e-10) -> np.ndarray:
    """Pure-Neumann solve with the zero-mean gauge ``weights @ u = 0``.

    ``weights`` is ``M @ 1`` so the gauge is int_D u = 0. The singular system is
    bordered by one scalar Lagrange multiplier.
    """
    b = np.asarray(b, dtype=float)
    imbalance = b.sum()
    scale = np.abs(b).sum()
    if abs(imbalance) > tol * max(scale, np.finfo(float).tiny):
        raise ValueError(
            f"incompatible source: total {imbalance:.6e} exceeds {tol:g} * ||g||_1 = {tol * scale:.6e}"
        )
    if scale == 0.0:
        return np.zeros_like(b)
    n = A.shape[0]
    w = np.asarray(weights, dtype=float)
    wn = w / np.abs(w).max()
    K = sps.bmat([[A, sps.csr_matrix(wn[:, None])], [sps.csr_matrix(wn[None, :]), None]],
                 format="csc")
    lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A")
    rhs = np.concatenate([b - imbalance * wn / wn.sum(), [0.0]])
    x = lu.solve(rhs)
    for _ in range(3):
        r = rhs - K @ x
        if np.linalg.norm(r[:n]) <= 0.01 * tol * np.linalg.norm(b) and abs(r[n]) <= 1e-14:
            break
        x += lu.solve(r)
    u = x[:n]
    res = np.linalg.norm(A @ u - rhs[:n])
    if res > tol * np.linalg.norm(b):
        raise RuntimeError(f"fine solve residual {res:.3e} above tolerance")
    return u


def backward_euler(M, A, b, dt: float, t_end: float, report_times=None, u0=None):
    """Integrate M u' + A u = b with backward Euler.

    Each step solves ``(M + dt A) u^n = dt b + M u^{n-1}``. Returns a dict
    mapping each report time (default: ``t_end``) to the state at that time.
    Works with sparse or dense matrices; dense systems must be SPD.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_steps = int(round(t_end / dt))
    if n_steps < 1 or abs(n_steps * dt - t_end) > 1e-9 * max(t_end, 1.0):
        raise ValueError(f"t_end={t_end} is not a multiple of dt={dt}")
    times = [t_end] if report_times is None else list(report_times)
    report_steps = {}
    for t in times:
        s = int(round(t / dt))
        if abs(s * dt - t) > 1e-9 * max(t, 1.0) or not 0 <= s <= n_steps:
            raise ValueError(f"report time {t} is not on the time grid")
        report_steps[s] = t
    n = A.shape[0]
    u = np.zeros(n) if u0 is None else np.array(u0, dtype=float)
    rhs_const = dt * np.asarray(b, dtype=float)
    if sps.issparse(A):
        lu = spla.splu(sps.csc_matrix(M + dt * A))
        solve = lu.solve
    else:
        S = np.asarray(M) + dt * np.asarray(A)
        S = 0.5 * (S + S.T)
        try:
            factor = scipy.linalg.cho_factor(S)
        except np.linalg.LinAlgError as exc:
            raise ValueError("backward Euler system matrix M + dt*A is not SPD") from exc
        solve = lambda r: scipy.linalg.cho_solve(factor, r)  # noqa: E731
    out = {}
    if 0 in report_steps:
        out[report_steps[0]] = u.copy()
    for step in range(1, n_steps + 1):
        u = solve(rhs_const + M @ u)
        if step in report_steps:
            out[report_steps[step]] = u.copy()
    return out


_GAUSS3 = (np.array([-np.sqrt(0.6), 0.0, np.sqrt(0.6)]), np.array([5.0, 8.0, 5.0]) / 9.0)


def l2_error(mesh: FineMesh, u: np.ndarray, exact) -> float:
    """||u_h - exact||_{L2} with 3x3 Gauss quadrature per cell."""
    pts, wts = _GAUSS3
    xi = (pts + 1.0) / 2.0
    w1 = wts / 2.0
    h = mesh.h
    ll = mesh.coords[mesh.cell_nodes[:, 0]]
    uc = u[mesh.cell_nodes]
    total = 0.0
    for a, wa in zip(xi, w1):
        for c, wc in zip(xi, w1):
            shape = np.array([(1 - a) * (1 - c), a * (1 - c), a * c, (1 - a) * c])
            uh = uc @ shape
            ue = exact(ll[:, 0] + a * h, ll[:, 1] + c * h)
            total += wa * wc * np.sum((uh - ue) ** 2)
    return float(np.sqrt(total * h * h))
