import csv

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from nlmc.basis import (RedundantConstraintError, basis_decay_profile, block_forms, block_mass,
                        build_auxiliary_space, build_auxiliary_spaces, build_cem_bases,
                        build_simplified_basis, build_simplified_bases, compare_basis_modes,
                        cosine, nested_dissection, write_mode_report)
from nlmc.fem_fine import assemble_stiffness, averaging_matrix
from nlmc.geometry import (GLOBAL, FractureNetwork, build_coarse_grid, build_fine_mesh,
                           enumerate_continua, oversample, snap_fracture)

LAYER_CHOICES = [1, 2, GLOBAL]


def region_constraints(small, basis):
    rows = small.continua.rows_of_blocks(basis.region.blocks)
    return rows, small.C[rows]


def kronecker(small, basis, rows):
    e = np.zeros(rows.size)
    e[np.flatnonzero(rows == small.continua.index(basis.block, basis.local))] = 1.0
    return e


@pytest.fixture(scope="module")
def bases_by_layers(small):
    return {L: build_simplified_bases(small.coarse, small.continua, small.A, small.C, L)
            for L in LAYER_CHOICES}


def test_constant_basis_on_single_homogeneous_block():
    m = build_fine_mesh(8, 8, 2.0, 2.0)
    c = build_coarse_grid(m, 1, 1)
    ci = enumerate_continua(c, FractureNetwork(()))
    A = assemble_stiffness(m, FractureNetwork(()))
    (psi,) = build_simplified_bases(c, ci, A, averaging_matrix(ci, m), GLOBAL)
    np.testing.assert_allclose(psi.vector(m.n_nodes), 0.25, rtol=1e-12)
    assert psi.energy == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(basis_decay_profile(psi, c), [0.25])


@pytest.mark.parametrize("layers", LAYER_CHOICES)
def test_kronecker_constraints(small, bases_by_layers, layers):
    bases = bases_by_layers[layers]
    assert len(bases) == small.continua.n
    for b in bases:
        rows, Cr = region_constraints(small, b)
        v = b.vector(small.mesh.n_nodes)
        assert np.abs(Cr @ v - kronecker(small, b, rows)).max() <= 1e-9
        assert b.constraint_residual <= 1e-9


def test_artificial_boundary_vanishes(small, bases_by_layers):
    for b in bases_by_layers[1]:
        v = b.vector(small.mesh.n_nodes)
        assert np.all(v[b.region.artificial_nodes] == 0.0)
        outside = np.setdiff1d(np.arange(small.mesh.n_nodes), b.region.nodes)
        assert np.all(v[outside] == 0.0)


def test_dirichlet_policy_vanishes_on_whole_region_boundary(small):
    bases = build_simplified_basis(0, 1, small.A, small.C, small.continua, small.coarse,
                                   policy="dirichlet_everywhere")
    for b in bases:
        v = b.vector(small.mesh.n_nodes)
        assert np.all(v[b.region.boundary_nodes] == 0.0)


def null_space_of(Cr, free):
    """Orthonormal basis of {v on free nodes : Cr v = 0}."""
    F = Cr[:, free].toarray()
    F = F[np.abs(F).sum(axis=1) > 0]
    return scipy.linalg.null_space(F)


@pytest.mark.parametrize("block, layers", [(5, 1), (6, 2), (0, GLOBAL)])
def test_energy_minimality_and_orthogonality(small, bases_by_layers, rng, block, layers):
    bases = [b for b in bases_by_layers[layers] if b.block == block]
    n = small.mesh.n_nodes
    for b in bases:
        rows, Cr = region_constraints(small, b)
        Z = null_space_of(Cr, b.nodes)
        psi = b.vector(n)
        e0 = psi @ small.A @ psi
        for _ in range(100):
            v = np.zeros(n)
            v[b.nodes] = Z @ rng.normal(size=Z.shape[1]) * rng.uniform(1e-3, 1.0)
            assert (psi + v) @ small.A @ (psi + v) >= e0 * (1 - 1e-12)
            # Lagrange stationarity: psi is a-orthogonal to the constrained-zero space
            na = np.sqrt(max(v @ small.A @ v, 0.0) * e0)
            assert abs(psi @ small.A @ v) <= 1e-9 * max(na, 1e-300)


def test_energy_nonincreasing_with_layers(small):
    energies = []
    for L in [1, 2, 3, GLOBAL]:
        bases = build_simplified_bases(small.coarse, small.continua, small.A, small.C, L)
        energies.append(np.array([b.energy for b in bases]))
    for coarse_e, fine_e in zip(energies, energies[1:]):
        assert np.all(fine_e <= coarse_e * (1 + 1e-9))


def test_large_regions_reproduce_global(small, bases_by_layers):
    full = build_simplified_bases(small.coarse, small.continua, small.A, small.C, 3)
    for a, b in zip(full, bases_by_layers[GLOBAL]):
        np.testing.assert_allclose(a.vector(small.mesh.n_nodes), b.vector(small.mesh.n_nodes),
                                   atol=1e-10 * np.abs(b.values).max())


def test_threads_do_not_change_results(small, bases_by_layers):
    par = build_simplified_bases(small.coarse, small.continua, small.A, small.C, 1, threads=3)
    for a, b in zip(par, bases_by_layers[1]):
        assert (a.block, a.local) == (b.block, b.local)
        np.testing.assert_array_equal(a.values, b.values)


def test_interface_fracture_gives_duplicate_constraints():
    m = build_fine_mesh(16, 16)
    net = FractureNetwork((snap_fracture(m, (0.1, 0.5), (0.4, 0.5), 10.0),))
    c = build_coarse_grid(m, 4, 4)
    ci = enumerate_continua(c, net)
    A = assemble_stiffness(m, net)
    with pytest.raises(RedundantConstraintError, match="duplicates"):
        build_simplified_basis(c.block(1, 1), 1, A, averaging_matrix(ci, m), ci, c)


def test_decay_profile_shape(small, bases_by_layers):
    b = bases_by_layers[2][small.continua.index(5, 0)]
    d = basis_decay_profile(b, small.coarse)
    assert d.size == 3 and d[0] == np.abs(b.values).max() and np.all(d >= 0)


@given(nx=st.integers(1, 12), ny=st.integers(1, 12))
@settings(max_examples=30, deadline=None)
def test_nested_dissection_is_a_permutation(nx, ny):
    ix, iy = np.meshgrid(np.arange(nx), np.arange(ny))
    p = nested_dissection(ix.ravel(), iy.ravel(), leaf=4)
    assert np.array_equal(np.sort(p), np.arange(nx * ny))


# --- spectral path -----------------------------------------------------------

def test_auxiliary_space_contract(small):
    i = small.coarse.block(0, 1)  # crossed by the horizontal fracture
    nodes, A_i, S_i = block_forms(small.coarse, small.network, 1.0, i)
    aux = build_auxiliary_space(i, A_i, S_i, 3, nodes)
    lam, phi = aux.eigenvalues, aux.vectors
    assert lam[0] == pytest.approx(0.0, abs=1e-10 * lam[-1])
    np.testing.assert_allclose(phi[:, 0] / phi[0, 0], 1.0, rtol=1e-8)
    np.testing.assert_allclose(phi.T @ S_i @ phi, np.eye(3), atol=1e-9)
    assert np.all(np.diff(aux.all_eigenvalues) >= 0)
    for k in range(3):
        r = A_i @ phi[:, k] - lam[k] * S_i @ phi[:, k]
        assert np.linalg.norm(r) <= 1e-8 * max(np.linalg.norm(A_i @ phi[:, k]), 1.0)
    assert aux.Lambda == aux.all_eigenvalues[3]
    with pytest.raises(ValueError, match="dimension"):
        build_auxiliary_space(i, A_i, S_i, nodes.size + 1, nodes)


def test_block_stiffness_is_restriction_of_global_form(small):
    i = small.coarse.block(2, 1)
    nodes, A_i, _ = block_forms(small.coarse, small.network, 1.0, i)
    total = np.zeros_like(small.A.toarray())
    for b in range(small.coarse.n_blocks):
        nd, Ab, _ = block_forms(small.coarse, small.network, 1.0, b)
        total[np.ix_(nd, nd)] += Ab
    # fracture edges on block interfaces would be counted twice; none here
    np.testing.assert_allclose(total, small.A.toarray(), atol=1e-10)
    assert np.abs(A_i @ np.ones(nodes.size)).max() < 1e-10


def test_cem_constraints_kronecker(small):
    aux = build_auxiliary_spaces(small.coarse, small.network, 1.0, small.continua)
    i = small.coarse.block(1, 1)
    bases = build_cem_bases(small.coarse, aux, small.A, 1, [i])
    n = small.mesh.n_nodes
    for j, psi in enumerate(bases):
        v = psi.vector(n)
        for ell in psi.region.blocks:
            a = aux[ell]
            vals = a.vectors.T @ a.S @ v[a.nodes]
            target = np.zeros(a.count)
            if ell == i:
                target[j] = a.vectors[:, j] @ a.S @ a.vectors[:, j]
            assert np.abs(vals - target).max() <= 1e-9


def test_cem_recovers_constant_on_single_block():
    m = build_fine_mesh(6, 6)
    c = build_coarse_grid(m, 1, 1)
    net = FractureNetwork(())
    ci = enumerate_continua(c, net)
    aux = build_auxiliary_spaces(c, net, 1.0, ci, l_counts=[1])
    (psi,) = build_cem_bases(c, aux, assemble_stiffness(m, net), GLOBAL)
    v = psi.vector(m.n_nodes)
    np.testing.assert_allclose(v / v[0], 1.0, rtol=1e-10)


def test_threshold_selects_auxiliary_count(small):
    aux = build_auxiliary_spaces(small.coarse, small.network, 1.0, small.continua, threshold=1e-2)
    for a in aux:
        assert a.count == max(1, int(np.sum(a.all_eigenvalues < 1e-2 * a.all_eigenvalues.max())))


def homogeneous_matrix_mode_cosines():
    m = build_fine_mesh(40, 40)
    empty = FractureNetwork(())
    c = build_coarse_grid(m, 5, 5)
    ci = enumerate_continua(c, empty)
    aux = build_auxiliary_spaces(c, empty, 1.0, ci, l_counts=[4] * 25)
    i = c.block(2, 2)
    plain = build_simplified_basis(i, 2, assemble_stiffness(m, empty),
                                   averaging_matrix(ci, m), ci, c)
    return [abs(r["cosine"]) for r in compare_basis_modes(aux[i], plain, c)]


def test_matrix_basis_follows_constant_mode():
    cos = homogeneous_matrix_mode_cosines()
    assert int(np.argmax(cos)) == 0 and cos[0] >= 0.95


@pytest.mark.xfail(strict=True, reason="measured 0.97: the basis bends to keep neighbour "
                   "averages at zero (see decisions ledger)")
def test_matrix_basis_constant_mode_cosine_099():
    assert homogeneous_matrix_mode_cosines()[0] >= 0.99


def test_mode_comparison(tmp_path):
    m = build_fine_mesh(24, 24)
    net = FractureNetwork((snap_fracture(m, (1 / 24, 7 / 24), (10 / 24, 7 / 24), 100.0),))
    c = build_coarse_grid(m, 2, 2)
    ci = enumerate_continua(c, net)
    A = assemble_stiffness(m, net)
    C = averaging_matrix(ci, m)
    aux = build_auxiliary_spaces(c, net, 1.0, ci, l_counts=[4, 4, 4, 4])

    fractured = build_simplified_basis(0, GLOBAL, A, C, ci, c)
    rows = compare_basis_modes(aux[0], fractured, c)
    frac_rows = [r for r in rows if r["basis"] == 1]
    best = max(frac_rows, key=lambda r: abs(r["cosine"]))
    # fracture-dominant mode: largest share of s-weight on fracture nodes among k >= 1
    fnodes = np.isin(aux[0].nodes, ci.entries[1].nodes)
    S, V = aux[0].S, aux[0].vectors
    share = [(V[fnodes, k] @ S[np.ix_(fnodes, fnodes)] @ V[fnodes, k]) for k in range(1, 4)]
    assert best["mode"] == 1 + int(np.argmax(share))

    M = block_mass(c, 0)
    assert cosine(V[:, 2], V[:, 2], M) == pytest.approx(1.0)
    path = tmp_path / "modes.csv"
    write_mode_report(rows, path)
    with open(path) as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == len(rows) and set(table[0]) == {"block", "basis", "mode", "eigenvalue", "cosine"}
