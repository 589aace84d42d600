"""Constrained energy-minimizing multiscale basis functions.

Every basis function minimizes the energy a(psi, psi) over an oversampled
region subject to a set of linear functionals taking Kronecker values. The
simplified path uses the integral of each continuum as functionals; the
spectral path uses s-inner products with local eigenfunctions.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .fem_fine import Q1_MASS, assemble_stiffness, cell_field
from .geometry import (GLOBAL, CoarseGrid, ContinuumIndex, FractureNetwork,
                       OversampleRegion, chebyshev_distance, edge_lengths, oversample)

log = logging.getLogger(__name__)

DEFAULT_POLICY = "physical_on_domain_boundary"


class RedundantConstraintError(ValueError):
    pass


@dataclass
class MultiscaleBasis:
    block: int
    local: int
    region: OversampleRegion
    nodes: np.ndarray
    values: np.ndarray
    constraint_residual: float
    energy: float

    def vector(self, n_nodes: int) -> np.ndarray:
        v = np.zeros(n_nodes)
        v[self.nodes] = self.values
        return v


class LocalProblem:
    """Factorized saddle-point system of one oversampled region.

    Solves ``[A_r F_r^T; F_r 0] [psi; mu] = [0; e]`` where ``A_r`` is the
    stiffness restricted to the free nodes of the region and ``F_r`` holds
    the region's constraint functionals (one per row).
    """

    def __init__(self, region: OversampleRegion, A: sps.spmatrix, F: sps.spmatrix,
                 labels=None, policy: str = DEFAULT_POLICY):
        self.region = region
        self.free = region.free_nodes(policy)
        self.A = sps.csr_matrix(A)[self.free][:, self.free].tocsr()
        Fr = sps.csr_matrix(F)[:, self.free].tocsr()
        Fr.eliminate_zeros()
        self.labels = labels
        self.F = Fr
        # a functional supported only on Dirichlet nodes holds for any admissible psi
        self.active = np.flatnonzero(np.diff(Fr.indptr) > 0)
        Fa = Fr[self.active]
        self._check_duplicates(Fa, [labels[k] if labels is not None else f"row {k}"
                                    for k in self.active])
        self.scale = 1.0 / abs(Fa).max(axis=1).toarray().ravel()
        Fs = sps.diags(self.scale) @ Fa
        self.K = sps.bmat([[self.A, Fs.T], [Fs, None]], format="csc")
        if self.free.size < region.nodes.size:
            # A_r is SPD: nested dissection with the multipliers last needs no pivoting
            ix, iy = self.free % region.row_length, self.free // region.row_length
            order = np.concatenate([nested_dissection(ix, iy),
                                    np.arange(self.free.size, self.K.shape[0])])
            self.order = order
            self.lu = spla.splu(self.K[order][:, order].tocsc(), permc_spec="NATURAL",
                                diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        else:
            self.order = None
            self.lu = spla.splu(self.K, permc_spec="MMD_AT_PLUS_A")

    def _solve_kkt(self, rhs):
        if self.order is None:
            return self.lu.solve(rhs)
        x = np.empty_like(rhs)
        x[self.order] = self.lu.solve(rhs[self.order])
        return x

    @staticmethod
    def _check_duplicates(Fa, names):
        seen = {}
        for r in range(Fa.shape[0]):
            lo, hi = Fa.indptr[r], Fa.indptr[r + 1]
            key = (Fa.indices[lo:hi].tobytes(), Fa.data[lo:hi].tobytes())
            if key in seen:
                raise RedundantConstraintError(
                    f"constraint {names[r]} duplicates constraint {seen[key]}")
            seen[key] = names[r]

    def solve(self, targets: np.ndarray, tol: float = 1e-9):
        """Minimizer for constraint values ``targets`` (one column per solve)."""
        targets = np.atleast_2d(np.asarray(targets, dtype=float).T).T
        inactive = np.setdiff1d(np.arange(targets.shape[0]), self.active)
        if inactive.size and np.any(targets[inactive] != 0.0):
            k = inactive[np.flatnonzero(np.any(targets[inactive] != 0.0, axis=1))[0]]
            name = self.labels[k] if self.labels is not None else f"row {k}"
            raise RedundantConstraintError(
                f"constraint {name} vanishes on the free nodes of the region")
        nf = self.free.size
        rhs = np.zeros((nf + self.active.size, targets.shape[1]))
        rhs[nf:] = self.scale[:, None] * targets[self.active]
        x = self._solve_kkt(rhs)
        for _ in range(2):
            if np.abs(self.F @ x[:nf] - targets).max() <= 1e-3 * tol:
                break
            x += self._solve_kkt(rhs - self.K @ x)
        psi = x[:nf]
        residual = np.abs(self.F @ psi - targets).max(axis=0)
        if np.any(residual > tol):
            raise RuntimeError(
                f"constraint residual {residual.max():.3e} above tolerance {tol:g} "
                f"in region around block {self.region.center}")
        energy = np.einsum("ij,ij->j", psi, self.A @ psi)
        return psi, residual, energy


def nested_dissection(ix: np.ndarray, iy: np.ndarray, leaf: int = 64) -> np.ndarray:
    """Nested-dissection ordering of nodes on a structured grid."""
    out = []

    def split(idx):
        if idx.size <= leaf:
            out.append(idx)
            return
        x, y = ix[idx], iy[idx]
        if x.max() - x.min() >= y.max() - y.min():
            key, mid = x, (x.max() + x.min()) // 2
        else:
            key, mid = y, (y.max() + y.min()) // 2
        split(idx[key < mid])
        split(idx[key > mid])
        out.append(idx[key == mid])

    split(np.arange(ix.size))
    return np.concatenate(out)


def _region_groups(coarse: CoarseGrid, blocks, layers):
    groups = {}
    for i in blocks:
        region = oversample(coarse, int(i), layers)
        groups.setdefault(region.extent, []).append(region)
    return groups


def build_simplified_basis(i: int, layers, A: sps.spmatrix, C: sps.spmatrix,
                           continua: ContinuumIndex, coarse: CoarseGrid,
                           policy: str = DEFAULT_POLICY, tol: float = 1e-9,
                           _problem: LocalProblem | None = None) -> list[MultiscaleBasis]:
    """The 1 + L_i simplified basis functions of block ``i``."""
    if layers != GLOBAL and int(layers) < 0:
        raise ValueError("layers must be nonnegative or 'global'")
    region = oversample(coarse, i, layers) if _problem is None else _problem.region
    rows = continua.rows_of_blocks(region.blocks)
    problem = _problem
    if problem is None:
        labels = [continua.label(k) for k in rows]
        problem = LocalProblem(region, A, C[rows], labels, policy)
    own = np.arange(continua.offsets[i], continua.offsets[i + 1])
    pos = np.searchsorted(rows, own) if np.all(np.diff(rows) > 0) else \
        np.array([np.flatnonzero(rows == k)[0] for k in own])
    targets = np.zeros((rows.size, own.size))
    targets[pos, np.arange(own.size)] = 1.0
    psi, res, energy = problem.solve(targets, tol)
    if problem.region.center != i:
        region = oversample(coarse, i, layers)
    return [
        MultiscaleBasis(i, int(continua.local_of[k]), region, problem.free,
                        psi[:, c].copy(), float(res[c]), float(energy[c]))
        for c, k in enumerate(own)
    ]


def build_simplified_bases(coarse: CoarseGrid, continua: ContinuumIndex, A, C, layers,
                           policy: str = DEFAULT_POLICY, tol: float = 1e-9,
                           threads: int = 1) -> list[MultiscaleBasis]:
    """All simplified basis functions, in continuum order.

    Blocks whose oversampled regions coincide (always the case for GLOBAL)
    share one factorization.
    """
    C = sps.csr_matrix(C)
    groups = _region_groups(coarse, range(coarse.n_blocks), layers)

    def work(regions):
        region = regions[0]
        rows = continua.rows_of_blocks(region.blocks)
        labels = [continua.label(k) for k in rows]
        problem = LocalProblem(region, A, C[rows], labels, policy)
        out = []
        for reg in regions:
            out.extend(build_simplified_basis(reg.center, layers, A, C, continua, coarse,
                                              policy, tol, _problem=problem))
        return out

    results = _map(work, list(groups.values()), threads)
    bases = [b for chunk in results for b in chunk]
    bases.sort(key=lambda b: continua.index(b.block, b.local))
    return bases


def _map(fn, items, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def basis_matrix(bases: list[MultiscaleBasis], n_nodes: int) -> sps.csc_matrix:
    """Fine-by-coarse matrix with the basis vectors as columns."""
    indptr = np.concatenate([[0], np.cumsum([b.nodes.size for b in bases])])
    indices = np.concatenate([b.nodes for b in bases])
    data = np.concatenate([b.values for b in bases])
    return sps.csc_matrix((data, indices, indptr), shape=(n_nodes, len(bases)))


def basis_decay_profile(basis: MultiscaleBasis, coarse: CoarseGrid) -> np.ndarray:
    """Max |psi| over the blocks at each Chebyshev distance from the owner block."""
    region = basis.region
    dist = chebyshev_distance(coarse, basis.block, region.blocks)
    full = basis.vector(coarse.mesh.n_nodes)
    kmax = int(dist.max()) if basis.region.layers == GLOBAL else int(region.layers)
    profile = np.zeros(kmax + 1)
    for b, d in zip(region.blocks, dist):
        if d <= kmax:
            profile[d] = max(profile[d], np.abs(full[coarse.block_nodes(b)]).max())
    return profile


# --- spectral (CEM) path -------------------------------------------------

@dataclass
class AuxiliarySpace:
    block: int
    nodes: np.ndarray
    S: np.ndarray
    eigenvalues: np.ndarray
    vectors: np.ndarray
    all_eigenvalues: np.ndarray

    @property
    def count(self) -> int:
        return self.vectors.shape[1]

    @property
    def Lambda(self) -> float:
        """Smallest eigenvalue whose eigenfunction is left out."""
        k = self.count
        return float(self.all_eigenvalues[k]) if k < self.all_eigenvalues.size else np.inf


def _tilde_kappa_weights(coarse: CoarseGrid, points: np.ndarray, b: int) -> np.ndarray:
    """sum_j |grad chi_j|^2 of the bilinear coarse partition of unity at points in block b."""
    bx, by = coarse.block_ij(b)
    H = coarse.H
    xi = points[:, 0] / H - bx
    eta = points[:, 1] / H - by
    return 2.0 * ((1 - xi) ** 2 + xi ** 2 + (1 - eta) ** 2 + eta ** 2) / H ** 2


def _tilde_kappa_tangential(coarse, points, tangent, b):
    bx, by = coarse.block_ij(b)
    H = coarse.H
    xi = points[:, 0] / H - bx
    eta = points[:, 1] / H - by
    tx, ty = tangent[:, 0], tangent[:, 1]
    grads = [(-(1 - eta), -(1 - xi)), ((1 - eta), -xi), (eta, xi), (-eta, 1 - xi)]
    return sum((gx * tx + gy * ty) ** 2 for gx, gy in grads) / H ** 2


def block_forms(coarse: CoarseGrid, network: FractureNetwork, kappa_m, i: int):
    """Dense a_i and s_i on the closure nodes of block i.

    a_i is the global energy form restricted to the cells and fracture edges
    of the block. s_i(u, v) = int kappa~ u v with kappa~ = sum_j kappa |grad chi_j|^2,
    evaluated at cell centres for the matrix and at edge midpoints (with the
    tangential gradient and the fracture conductivity) along fractures.
    """
    mesh = coarse.mesh
    nodes = coarse.block_nodes(i)
    cells = coarse.block_cells(i)
    edges = network.edges
    if edges.shape[0]:
        edge_in = coarse.node_in_block(edges, i).all(axis=1)
    else:
        edge_in = np.zeros(0, dtype=bool)
    A_full = assemble_stiffness(mesh, network, kappa_m, cells=cells, edge_mask=edge_in)
    A_i = A_full[nodes][:, nodes].toarray()

    kappa = cell_field(mesh, kappa_m)
    centres = mesh.coords[mesh.cell_nodes[cells]].mean(axis=1)
    kt = kappa[cells] * _tilde_kappa_weights(coarse, centres, i)
    local = {int(k): p for p, k in enumerate(nodes)}
    S = np.zeros((nodes.size, nodes.size))
    mass = Q1_MASS * mesh.h ** 2
    for c, w in zip(mesh.cell_nodes[cells], kt):
        idx = [local[int(k)] for k in c]
        S[np.ix_(idx, idx)] += w * mass
    if edge_in.any():
        e = edges[edge_in]
        cond = network.edge_conductivity[edge_in]
        p0, p1 = mesh.coords[e[:, 0]], mesh.coords[e[:, 1]]
        length = edge_lengths(mesh, e)
        tangent = (p1 - p0) / length[:, None]
        kt_f = cond * _tilde_kappa_tangential(coarse, 0.5 * (p0 + p1), tangent, i)
        line_mass = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
        for (a, b), w, ell in zip(e, kt_f, length):
            idx = [local[int(a)], local[int(b)]]
            S[np.ix_(idx, idx)] += w * ell * line_mass
    return nodes, A_i, S


def build_auxiliary_space(i: int, A_i: np.ndarray, S_i: np.ndarray, l_i: int,
                          nodes: np.ndarray) -> AuxiliarySpace:
    """First ``l_i`` eigenpairs of a_i(phi, v) = lambda s_i(phi, v), ascending."""
    n = A_i.shape[0]
    if not 1 <= l_i <= n:
        raise ValueError(f"requested {l_i} eigenfunctions but block {i} has dimension {n}")
    lam, vec = scipy.linalg.eigh(0.5 * (A_i + A_i.T), 0.5 * (S_i + S_i.T))
    lam = np.maximum(lam, 0.0)
    vec = vec[:, :l_i]
    for k in range(l_i):
        j = np.argmax(np.abs(vec[:, k]))
        if vec[j, k] < 0:
            vec[:, k] = -vec[:, k]
    return AuxiliarySpace(i, nodes, S_i, lam[:l_i].copy(), vec, lam)


def build_auxiliary_spaces(coarse, network, kappa_m, continua: ContinuumIndex,
                           l_counts=None, threshold: float | None = None):
    """Auxiliary spaces of every block.

    The count defaults to 1 + L_i; with ``threshold`` it is the number of
    eigenvalues below ``threshold * lambda_max``.
    """
    spaces = []
    for i in range(coarse.n_blocks):
        nodes, A_i, S_i = block_forms(coarse, network, kappa_m, i)
        if l_counts is not None:
            l_i = int(l_counts[i])
        elif threshold is not None:
            lam = scipy.linalg.eigh(A_i, S_i, eigvals_only=True)
            l_i = max(1, int(np.sum(lam < threshold * lam.max())))
        else:
            l_i = 1 + continua.n_fracture_continua(i)
        spaces.append(build_auxiliary_space(i, A_i, S_i, l_i, nodes))
    return spaces


def spectral_functionals(aux_spaces: list[AuxiliarySpace], n_nodes: int):
    """Rows s_l(., phi^{l,k}) for every auxiliary function, with their block ids."""
    rows, cols, vals, owner, mode = [], [], [], [], []
    r = 0
    for aux in aux_spaces:
        W = aux.S @ aux.vectors
        for k in range(aux.count):
            rows.append(np.full(aux.nodes.size, r))
            cols.append(aux.nodes)
            vals.append(W[:, k])
            owner.append(aux.block)
            mode.append(k)
            r += 1
    F = sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                       shape=(r, n_nodes))
    return F, np.array(owner), np.array(mode)


def build_cem_bases(coarse: CoarseGrid, aux_spaces, A, layers, blocks=None,
                    policy: str = DEFAULT_POLICY, tol: float = 1e-9,
                    threads: int = 1) -> list[MultiscaleBasis]:
    """CEM basis functions psi_{j,ms}^{(i)} for the requested blocks.

    Constraints are s_l(psi, phi^{l,k}) = delta_{li} delta_{kj} s_i(phi^{i,j}, phi^{i,j})
    for every auxiliary function of every block l in the region.
    """
    F, owner, mode = spectral_functionals(aux_spaces, coarse.mesh.n_nodes)
    offsets = np.concatenate([[0], np.cumsum([a.count for a in aux_spaces])])
    blocks = range(coarse.n_blocks) if blocks is None else blocks
    groups = _region_groups(coarse, blocks, layers)

    def work(regions):
        region = regions[0]
        rows = np.concatenate([np.arange(offsets[b], offsets[b + 1]) for b in region.blocks])
        labels = [f"(block {owner[k]}, mode {mode[k]})" for k in rows]
        problem = LocalProblem(region, A, F[rows], labels, policy)
        out = []
        for reg in regions:
            i = reg.center
            aux = aux_spaces[i]
            own = np.arange(offsets[i], offsets[i + 1])
            pos = np.searchsorted(rows, own)
            norms = np.einsum("ij,ij->j", aux.vectors, aux.S @ aux.vectors)
            targets = np.zeros((rows.size, own.size))
            targets[pos, np.arange(own.size)] = norms
            psi, res, energy = problem.solve(targets, tol)
            for c in range(own.size):
                out.append(MultiscaleBasis(i, c, reg, problem.free, psi[:, c].copy(),
                                           float(res[c]), float(energy[c])))
        return out

    results = _map(work, list(groups.values()), threads)
    bases = [b for chunk in results for b in chunk]
    bases.sort(key=lambda b: (b.block, b.local))
    return bases


def build_cem_basis(i: int, j: int, layers, A, aux_spaces, coarse: CoarseGrid,
                    policy: str = DEFAULT_POLICY, tol: float = 1e-9) -> MultiscaleBasis:
    return build_cem_bases(coarse, aux_spaces, A, layers, [i], policy, tol)[j]


def block_mass(coarse: CoarseGrid, i: int) -> np.ndarray:
    """Dense Q1 mass matrix of block i on its closure nodes."""
    mesh = coarse.mesh
    nodes = coarse.block_nodes(i)
    local = {int(k): p for p, k in enumerate(nodes)}
    M = np.zeros((nodes.size, nodes.size))
    mass = Q1_MASS * mesh.h ** 2
    for c in mesh.cell_nodes[coarse.block_cells(i)]:
        idx = [local[int(k)] for k in c]
        M[np.ix_(idx, idx)] += mass
    return M


def cosine(u: np.ndarray, v: np.ndarray, M: np.ndarray) -> float:
    """Normalized L2 inner product (u, v)_M / (|u|_M |v|_M)."""
    uv = u @ M @ v
    return float(uv / np.sqrt((u @ M @ u) * (v @ M @ v)))


def compare_basis_modes(aux: AuxiliarySpace, bases: list[MultiscaleBasis],
                        coarse: CoarseGrid) -> list[dict]:
    """Correlation between basis functions restricted to K_i and eigenfunctions."""
    M = block_mass(coarse, aux.block)
    n = coarse.mesh.n_nodes
    rows = []
    for b in bases:
        u = b.vector(n)[aux.nodes]
        for k in range(aux.count):
            rows.append({"block": aux.block, "basis": b.local, "mode": k,
                         "eigenvalue": float(aux.eigenvalues[k]),
                         "cosine": cosine(u, aux.vectors[:, k], M)})
    return rows


def write_mode_report(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["block", "basis", "mode", "eigenvalue", "cosine"])
        for r in rows:
            w.writerow([r["block"], r["basis"], r["mode"],
                        f"{r['eigenvalue']:.12e}", f"{r['cosine']:.12e}"])


def cem_simplified_cosines(i: int, cem: list[MultiscaleBasis], simplified: list[MultiscaleBasis],
                           C: sps.spmatrix, continua, coarse: CoarseGrid,
                           nodes: np.ndarray) -> np.ndarray:
    """|cosine| on K_i between each simplified basis and the CEM function of the same continuum.

    CEM functions are indexed by eigenmode, so their span is first re-expressed
    in the continuum basis: the combination whose own-continuum integrals are
    the unit vectors, Q = P (C_own P)^{-1}.
    """
    n = coarse.mesh.n_nodes
    own = np.arange(continua.offsets[i], continua.offsets[i + 1])
    P = np.column_stack([b.vector(n) for b in cem])
    Q = P @ np.linalg.inv(np.asarray((C[own] @ P)))
    M = block_mass(coarse, i)
    return np.array([abs(cosine(s.vector(n)[nodes], Q[nodes, k], M))
                     for k, s in enumerate(simplified)])
