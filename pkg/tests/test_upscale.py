import numpy as np
import pytest
import scipy.sparse as sps
from hypothesis import given, settings
from hypothesis import strategies as st

from nlmc.basis import build_simplified_bases
from nlmc.fem_fine import (assemble_mass, assemble_stiffness, averaging_matrix, load_vector,
                           solve_fine_steady)
from nlmc.geometry import (GLOBAL, FractureNetwork, build_coarse_grid, build_fine_mesh,
                           chebyshev_distance, enumerate_continua)
from nlmc.upscale import (CoarseSystem, assemble_coarse_mass, assemble_transmissibility,
                          coarse_rhs, downscale, error_report, finite_volume_correct,
                          solve_transient, solve_upscaled_steady, to_average_pressure)


@pytest.fixture(scope="module")
def setups(small):
    out = {}
    ones = np.ones(small.mesh.n_nodes)
    measures = small.C @ ones
    g_cells = np.zeros(small.mesh.n_cells)
    x, y = small.mesh.coords[small.mesh.cell_nodes].mean(axis=1).T
    g_cells[(x < 0.25) & (y > 0.25) & (y < 0.5)] = 1.0
    g_cells[(x > 0.75) & (y > 0.5) & (y < 0.75)] = -1.0
    b = load_vector(small.mesh, g_cells)
    for L in [1, 2, GLOBAL]:
        bases = build_simplified_bases(small.coarse, small.continua, small.A, small.C, L)
        out[L] = (bases, CoarseSystem.build(bases, small.A, small.M, b, measures))
    out["b"] = b
    out["u_f"] = solve_fine_steady(small.A, b, small.M @ ones)
    return out


def test_single_constant_basis():
    m = build_fine_mesh(6, 6, 2.0, 2.0)
    net = FractureNetwork(())
    c = build_coarse_grid(m, 1, 1)
    ci = enumerate_continua(c, net)
    A, M = assemble_stiffness(m, net), assemble_mass(m)
    bases = build_simplified_bases(c, ci, A, averaging_matrix(ci, m), GLOBAL)
    assert abs(assemble_transmissibility(bases, A)[0, 0]) < 1e-14
    assert assemble_coarse_mass(bases, M)[0, 0] == pytest.approx(0.25)


@pytest.mark.parametrize("layers", [1, 2, GLOBAL])
def test_transmissibility_symmetric_and_mass_spd(setups, layers):
    _, S = setups[layers]
    assert np.abs(S.T - S.T.T).max() <= 1e-9 * np.abs(S.T).max()
    assert np.abs(S.M_T - S.M_T.T).max() <= 1e-12 * np.abs(S.M_T).max()
    assert np.linalg.eigvalsh(0.5 * (S.M_T + S.M_T.T))[0] > 0


def test_transmissibility_locality(small, setups):
    bases, S = setups[1]
    tmax = np.abs(S.T).max()
    blocks = small.continua.block_of
    for a in range(small.continua.n):
        d = chebyshev_distance(small.coarse, blocks[a], blocks)
        far = d >= 2 * 1 + 1
        assert np.all(np.abs(S.T[a, far]) <= 1e-12 * tmax)
        # zero-extension outside the region: no support overlap at all
        assert np.all(S.T[a, far] == 0.0)


def test_dimension_mismatch(setups):
    bases, _ = setups[1]
    with pytest.raises(ValueError, match="does not fit"):
        assemble_transmissibility(bases, sps.identity(10, format="csr"))
    with pytest.raises(ValueError, match="coarse values"):
        downscale(bases, np.zeros(3), 10)


def test_finite_volume_two_by_two():
    t = -2.5
    A = finite_volume_correct(np.array([[7.0, t], [t, 3.0]]))
    np.testing.assert_array_equal(A, [[-t, t], [t, -t]])
    assert np.linalg.matrix_rank(A) == 1


@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 30))
@settings(max_examples=50, deadline=None)
def test_finite_volume_row_sums_vanish(seed, n):
    rng = np.random.default_rng(seed)
    T = rng.normal(size=(n, n))
    T = T + T.T
    A = finite_volume_correct(T)
    assert np.abs(A @ np.ones(n)).max() <= 1e-12 * np.abs(A).max()
    off = ~np.eye(n, dtype=bool)
    np.testing.assert_array_equal(A[off], T[off])


def test_conservation_of_every_system(setups):
    for L in [1, 2, GLOBAL]:
        _, S = setups[L]
        assert S.conservation_residual() <= 1e-12
        p = S.solve_steady() / S.measures
        # net source of the balanced load is zero, and so is the net flux
        assert abs(np.sum(S.A_T @ p)) <= 1e-12 * np.abs(S.A_T @ p).sum()


def test_fv_operator_is_psd_with_constant_kernel(setups):
    _, S = setups[2]
    lam = np.linalg.eigvalsh(0.5 * (S.A_T + S.A_T.T))
    assert lam[0] >= -1e-10 * lam[-1] and lam[1] > 1e-10 * lam[-1]


def test_coarse_rhs_block_constant_source(small):
    bases = build_simplified_bases(small.coarse, small.continua, small.A, small.C, GLOBAL)
    rng = np.random.default_rng(0)
    vals = rng.normal(size=small.coarse.n_blocks)
    vals -= vals.mean()
    g_cells = vals[small.coarse.cell_block]
    b = load_vector(small.mesh, g_cells)
    g = coarse_rhs(b, bases)
    m = small.continua.is_matrix
    np.testing.assert_allclose(g[m], vals[small.continua.block_of[m]], atol=1e-10)
    np.testing.assert_allclose(g[~m], 0.0, atol=1e-10)
    blk = coarse_rhs(b, bases, "block", small.continua, small.coarse, g_cells)
    np.testing.assert_allclose(blk, g, atol=1e-10)
    assert abs(g.sum()) <= 1e-10 * np.abs(g).sum()
    assert np.all(coarse_rhs(np.zeros_like(b), bases) == 0)
    b[0] += 1.0
    with pytest.raises(ValueError, match="incompatible"):
        coarse_rhs(b, bases)


def test_upscaled_steady_small_cases():
    A = np.array([[1.0, -1.0], [-1.0, 1.0]])
    u = solve_upscaled_steady(A, np.array([1.0, -1.0]), np.ones(2))
    assert u[0] == pytest.approx(-u[1]) and u[0] == pytest.approx(0.5)
    assert np.all(solve_upscaled_steady(A, np.zeros(2), np.ones(2)) == 0)
    with pytest.raises(ValueError, match="incompatible"):
        solve_upscaled_steady(A, np.array([1.0, 0.0]), np.ones(2))


def test_downscale_reproduces_coarse_values(small, setups, rng):
    for L in [1, 2, GLOBAL]:
        bases, _ = setups[L]
        u_T = rng.normal(size=len(bases))
        u_ms = downscale(bases, u_T, small.mesh.n_nodes)
        np.testing.assert_allclose(small.C @ u_ms, u_T, atol=1e-9 * np.abs(u_T).max())
        assert np.all(downscale(bases, np.zeros(len(bases)), small.mesh.n_nodes) == 0)


def test_global_exactness_and_galerkin_consistency(small, setups):
    bases, S = setups[GLOBAL]
    u_bar = small.C @ setups["u_f"]
    r = S.A_G @ u_bar - S.g
    assert np.linalg.norm(r) <= 1e-7 * np.linalg.norm(S.g)
    u_fv = S.solve_steady()
    galerkin = CoarseSystem(S.bases, S.T, S.M_T, S.g, S.measures, S.gauge, "galerkin")
    u_g = galerkin.solve_steady()
    assert error_report(u_fv, u_bar, small.continua.is_matrix)["error_pct"] < 1e-6
    assert np.linalg.norm(u_fv - u_g) <= 1e-8 * np.linalg.norm(u_bar)


def test_errors_decrease_with_layers(small, setups):
    u_bar = small.C @ setups["u_f"]
    errs = [error_report(setups[L][1].solve_steady(), u_bar, small.continua.is_matrix)["error_pct"]
            for L in [1, 2, GLOBAL]]
    assert errs[0] > errs[1] > errs[2]


def test_error_report_scaling():
    ref = np.array([1.0, -2.0, 3.0, 0.5])
    is_m = np.array([True, False, True, False])
    assert error_report(ref, ref, is_m)["error_pct"] == 0.0
    rep = error_report(1.01 * ref, ref, is_m, measures=np.array([1.0, 0.1, 1.0, 0.1]))
    for key in ["error_pct", "error_matrix_pct", "error_fracture_pct", "error_avg_pct",
                "error_weighted_pct"]:
        assert rep[key] == pytest.approx(1.0)
    with pytest.raises(ValueError, match="zero norm"):
        error_report(ref, np.zeros(4), is_m)


def test_transient_zero_and_dissipation(setups, rng):
    _, S = setups[2]
    n = S.T.shape[0]
    out = S.solve_transient(0.05, 0.5, [0.5], g=np.zeros(n))
    assert np.all(out[0.5] == 0)
    times = [round(0.05 * k, 10) for k in range(11)]
    u0 = rng.normal(size=n) * S.measures
    out = S.solve_transient(0.05, 0.5, times, u0=u0, g=np.zeros(n))
    energy = [out[t] @ S.M_T @ out[t] for t in times]
    assert all(b <= a * (1 + 1e-12) for a, b in zip(energy, energy[1:]))


def test_transient_rejects_non_spd():
    with pytest.raises(ValueError, match="SPD"):
        solve_transient(np.zeros((2, 2)), -np.eye(2), np.zeros(2), 0.1, 1.0)


def test_average_pressure_rescaling():
    K = np.arange(9.0).reshape(3, 3)
    w = np.array([1.0, 2.0, 4.0])
    np.testing.assert_array_equal(to_average_pressure(K, w), np.diag(w) @ K @ np.diag(w))
