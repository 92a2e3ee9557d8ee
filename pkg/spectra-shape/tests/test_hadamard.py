"""
Unit tests for boundary traces, shape-derivative densities and the
criticality residual, mostly against closed-form disk eigenfunctions.
Run with:  pytest spectra-shape/tests/ -v
"""
import pytest
import numpy as np

import sys, os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from app.assembly import ProblemSpec
from app.eigensolve import cluster_from_indices, find_cluster, kernel_indices
from app.errors import InvalidInputError, UnusableClusterError
from app.geometry import (
    build_boundary, dilation, ellipse, fourier_bump, identity, tangential_gradient, translation,
)
from app.hadamard import (
    cluster_traces, criticality_residual, gamma_differential, hadamard_simple_biharmonic,
    m_density, m_density_unified_biharmonic, nagy_matrix, oracle_traces, rotate_traces,
    scaling_law_slope, shape_gradient_density,
)
from app.mesh import build_disk_mesh
from app.perturb import solve_shape
from app.special import disk_eigenpairs


@pytest.fixture(scope="module")
def circle():
    return build_boundary(identity(), 128)


@pytest.fixture(scope="module")
def laplace_oracle(circle):
    pairs = disk_eigenpairs("P10", 4)
    values = [p.gamma for p in pairs]
    return values, oracle_traces(pairs, circle)


@pytest.fixture(scope="module")
def plate_oracle(circle):
    pairs = disk_eigenpairs("P20", 2)
    values = [p.gamma for p in pairs]
    return values, oracle_traces(pairs, circle)


@pytest.fixture(scope="module")
def mid_ref():
    return build_disk_mesh(0.1)


def _first_cluster_off_kernel(spectrum):
    kernel = set(kernel_indices(spectrum))
    return next(c for c in spectrum.clusters if c.usable and not kernel.intersection(c.indices))


# --- Happy path ---------------------------------------------------------

def test_dilation_of_simple_dirichlet_eigenvalue(circle, laplace_oracle):
    values, traces = laplace_oracle
    cluster = cluster_from_indices(values, [0])
    d = gamma_differential(cluster, 1, dilation(1.0), traces[:1], circle)
    assert d == pytest.approx(-2.0 * values[0], rel=1e-10)


def test_dilation_of_clamped_plate_eigenvalue(circle, plate_oracle):
    values, traces = plate_oracle
    cluster = cluster_from_indices(values, [0])
    d = gamma_differential(cluster, 1, dilation(1.0), traces[:1], circle)
    assert d == pytest.approx(-4.0 * values[0], rel=1e-9)
    assert hadamard_simple_biharmonic(traces[0], circle, dilation(1.0)) == pytest.approx(d, rel=1e-9)


def test_translation_leaves_radial_mode_stationary(circle, laplace_oracle):
    values, traces = laplace_oracle
    cluster = cluster_from_indices(values, [0])
    d = gamma_differential(cluster, 1, translation((1.0, 0.0)), traces[:1], circle)
    assert abs(d) < 1e-10 * values[0]


def test_second_symmetric_function_of_double_cluster(circle, laplace_oracle):
    values, traces = laplace_oracle
    cluster = cluster_from_indices(values, [1, 2])
    # Gamma_2 = gamma^2 scales like (1 + eps)^-4
    d = gamma_differential(cluster, 2, dilation(1.0), traces[1:3], circle)
    assert d == pytest.approx(-4.0 * cluster.gamma ** 2, rel=1e-9)


def test_slope_matrix_trace_is_first_differential(circle, laplace_oracle):
    values, traces = laplace_oracle
    cluster = cluster_from_indices(values, [1, 2])
    psi = fourier_bump(2)
    mat = nagy_matrix(cluster, psi, traces[1:3], circle)
    assert np.allclose(mat, mat.T)
    assert np.trace(mat) == pytest.approx(gamma_differential(cluster, 1, psi, traces[1:3], circle), rel=1e-12)


def test_disk_is_critical_for_whole_clusters(circle, laplace_oracle):
    values, traces = laplace_oracle
    for idx in ([0], [1, 2]):
        cluster = cluster_from_indices(values, idx)
        _, rel = criticality_residual(cluster, [traces[i] for i in idx], circle)
        assert rel < 1e-9


def test_half_of_a_pair_is_not_critical(circle, laplace_oracle):
    values, traces = laplace_oracle
    cluster = cluster_from_indices(values, [1])
    _, rel = criticality_residual(cluster, traces[1:2], circle)
    assert rel > 0.1


def test_unified_density_matches_clamped_density(circle, plate_oracle):
    _, traces = plate_oracle
    tr = traces[0]
    plain = m_density(tr.problem, tr, tr, tr.gamma, circle).values
    unified = m_density_unified_biharmonic(tr, tr, tr.gamma).values
    assert np.abs(plain - unified).max() < 1e-9 * np.abs(plain).max()


def test_clamped_traces_vanish(plate_oracle):
    _, traces = plate_oracle
    assert traces[0].clamped_defect() < 1e-9


def test_trace_tangential_gradient_matches_fourier_derivative(circle, laplace_oracle):
    _, traces = laplace_oracle
    tr = traces[1]
    spectral = tangential_gradient(tr.du_dn[:, 0], circle)
    assert np.allclose(tr.tgrad_du_dn[:, 0], spectral, atol=1e-8 * (1.0 + np.abs(spectral).max()))


def test_rotation_of_radial_mode(circle, laplace_oracle):
    _, traces = laplace_oracle
    turned = rotate_traces(traces[0], circle, 16)
    assert np.allclose(turned.du_dn, traces[0].du_dn, atol=1e-12)


@pytest.mark.parametrize("kind, slope", [
    ("P10", -2.0), ("P20", -4.0), ("P21", -2.0), ("P32", -2.0), ("N", -4.0), ("I", -4.0), ("L", -2.0),
])
def test_scaling_law_slopes(kind, slope):
    assert scaling_law_slope(kind) == slope


def test_fe_traces_reproduce_dilation_law():
    ref = build_disk_mesh(0.1)
    spectrum = solve_shape(ProblemSpec(kind="P10"), identity(), ref, 3)
    cluster = find_cluster(spectrum, [1])
    traces, boundary = cluster_traces(spectrum, cluster)
    assert boundary.n == len(ref.boundary_vertices)
    d = gamma_differential(cluster, 1, dilation(1.0), traces, boundary)
    assert d == pytest.approx(-2.0 * cluster.gamma, rel=0.05)


@pytest.mark.parametrize("kind, count, tol", [("N", 8, 0.1), ("I", 6, 0.25), ("L", 6, 0.1)])
def test_fe_densities_follow_dilation_law(mid_ref, kind, count, tol):
    spectrum = solve_shape(ProblemSpec(kind=kind), identity(), mid_ref, count)
    cluster = _first_cluster_off_kernel(spectrum)
    traces, boundary = cluster_traces(spectrum, cluster)
    d = gamma_differential(cluster, 1, dilation(1.0), traces, boundary)
    expected = scaling_law_slope(kind) * cluster.size * cluster.gamma
    assert d == pytest.approx(expected, rel=tol)


def test_lame_density_is_rotation_invariant(mid_ref):
    problem = ProblemSpec(kind="L")
    spectrum = solve_shape(problem, identity(), mid_ref, 4)
    cluster = _first_cluster_off_kernel(spectrum)
    traces, boundary = cluster_traces(spectrum, cluster)
    shift = boundary.n // 6
    for tr in traces:
        turned = rotate_traces(tr, boundary, shift)
        before = m_density(problem, tr, tr, tr.gamma, boundary).values
        after = m_density(problem, turned, turned, tr.gamma, boundary).values
        assert np.allclose(after, np.roll(before, shift), rtol=1e-10, atol=1e-12 * np.abs(before).max())
        # A^T (u o A) moves the vector, not only the sample index
        assert not np.allclose(turned.du_dn, np.roll(tr.du_dn, shift, axis=0))


def test_reissner_mindlin_density_on_disk(mid_ref):
    problem = ProblemSpec(kind="R")
    spectrum = solve_shape(problem, identity(), mid_ref, 3)
    cluster = find_cluster(spectrum, [1])
    traces, boundary = cluster_traces(spectrum, cluster)
    density = m_density(problem, traces[0], traces[0], cluster.gamma, boundary).values
    assert density.min() >= -1e-12 * np.abs(density).max()
    _, rel = criticality_residual(cluster, traces, boundary)
    assert rel <= 0.1
    shift = gamma_differential(cluster, 1, translation((1.0, 0.0)), traces, boundary)
    assert abs(shift) <= 0.02 * cluster.gamma


# --- Failure cases ------------------------------------------------------

def test_unusable_cluster_rejected(circle, laplace_oracle):
    values, traces = laplace_oracle
    cluster = cluster_from_indices(values, [1])
    assert not cluster.usable
    with pytest.raises(UnusableClusterError) as exc:
        shape_gradient_density(cluster, 1, traces[1:2], circle)
    assert exc.value.exit_code == 0


def test_symmetric_function_order_out_of_range(circle, laplace_oracle):
    values, traces = laplace_oracle
    cluster = cluster_from_indices(values, [0])
    with pytest.raises(InvalidInputError):
        shape_gradient_density(cluster, 2, traces[:1], circle)


def test_oracle_traces_need_unit_circle():
    with pytest.raises(InvalidInputError):
        oracle_traces(disk_eigenpairs("P10", 1), build_boundary(ellipse(1.2), 64))


def test_biharmonic_formula_rejects_second_order_kinds(circle, laplace_oracle):
    _, traces = laplace_oracle
    with pytest.raises(InvalidInputError):
        hadamard_simple_biharmonic(traces[0], circle, dilation(1.0))


def test_rotation_needs_equivariant_samples(circle, laplace_oracle):
    _, traces = laplace_oracle
    with pytest.raises(InvalidInputError):
        rotate_traces(traces[0], build_boundary(ellipse(1.2), 128), 16)


def test_reissner_mindlin_has_no_scaling_law():
    with pytest.raises(InvalidInputError):
        scaling_law_slope("R")

