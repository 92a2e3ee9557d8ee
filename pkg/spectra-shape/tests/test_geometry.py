"""
Unit tests for maps, boundary sampling and tangential calculus.
Run with:  pytest spectra-shape/tests/ -v
"""
import pytest
import numpy as np

import sys, os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from app.errors import InvalidInputError
from app.geometry import (
    Compose, build_boundary, dilation, ellipse, enclosed_area, fourier_bump, harmonic_extension,
    identity, linear, normal_component, normal_jacobian, perturbation_field, pull_back, shape_map,
    tangential_divergence, tangential_gradient, tangential_laplacian,
    translation, volume_derivative,
)


# --- Happy path ---------------------------------------------------------

def test_unit_circle_geometry():
    b = build_boundary(identity(), 128)
    assert b.n == 128
    assert b.length == pytest.approx(2 * np.pi, rel=1e-12)
    assert enclosed_area(b) == pytest.approx(np.pi, rel=1e-12)
    assert np.allclose(b.curvature, 1.0, atol=1e-12)
    assert np.allclose(b.normal, b.points, atol=1e-12)


def test_ellipse_keeps_area_and_bends():
    b = build_boundary(ellipse(1.3), 256)
    assert enclosed_area(b) == pytest.approx(np.pi, rel=1e-10)
    # curvature a / b^2 at the tip of the long axis
    assert b.curvature[0] == pytest.approx(1.3 ** 3, rel=1e-10)


def test_polynomial_maps_compose_linearly():
    field = identity() + translation((0.5, -0.25)) * 2.0
    pts = np.array([[0.1, 0.2], [-0.3, 0.4]])
    assert np.allclose(field(pts), pts + np.array([1.0, -0.5]))


def test_dilation_normal_component_is_one_on_circle():
    b = build_boundary(identity(), 64)
    assert np.allclose(normal_component(dilation(1.0), b), 1.0, atol=1e-12)
    assert volume_derivative(dilation(1.0), b) == pytest.approx(2 * np.pi, rel=1e-12)


def test_fourier_bump_is_cosine_radial_on_circle():
    b = build_boundary(identity(), 64)
    zn = normal_component(fourier_bump(3), b)
    assert np.allclose(zn, np.cos(3 * b.theta), atol=1e-12)


def test_tangential_laplacian_of_trig_mode():
    b = build_boundary(identity(), 64)
    lap = tangential_laplacian(np.cos(2 * b.theta), b)
    assert np.allclose(lap, -4 * np.cos(2 * b.theta), atol=1e-10)


def test_harmonic_extension_matches_boundary_samples():
    b = build_boundary(identity(), 64)
    samples = (0.1 * np.cos(2 * b.theta) + 0.05 * np.sin(3 * b.theta))[:, None] * b.normal
    field = harmonic_extension(samples, 8)
    assert np.allclose(field(b.ref), samples, atol=1e-12)


def test_named_shapes_and_fields():
    assert np.allclose(shape_map("disk")(np.array([[0.3, 0.4]])), [[0.3, 0.4]])
    assert np.allclose(shape_map("dilated", 2.0)(np.array([[0.3, 0.4]])), [[0.6, 0.8]])
    assert np.allclose(perturbation_field("translation")(np.zeros((1, 2))), [[1.0, 0.0]])
    assert isinstance(pull_back(dilation(1.0), ellipse(1.2), "image"), Compose)


def test_ellipse_and_dilated_curvature():
    assert np.allclose(build_boundary(dilation(2.0), 64).curvature, 0.5)
    assert build_boundary(ellipse(2.0, 1.0), 64).curvature[0] == pytest.approx(2.0, rel=1e-12)


def test_tangential_divergence_examples():
    b = build_boundary(identity(), 64)
    ident = np.broadcast_to(np.eye(2), (64, 2, 2))
    assert np.allclose(tangential_divergence(b.points, ident, b), 1.0)
    assert np.allclose(tangential_divergence(np.ones((64, 2)), np.zeros((64, 2, 2)), b), 0.0)
    assert np.allclose(tangential_divergence(b.normal, normal_jacobian(b), b), b.curvature)


def test_tangential_gradient_points_along_tangent():
    b = build_boundary(identity(), 64)
    grad = tangential_gradient(np.cos(2 * b.theta), b)
    assert np.allclose(grad, (-2.0 * np.sin(2 * b.theta))[:, None] * b.tangent, atol=1e-10)


def test_tangential_laplacian_scales_with_radius():
    b = build_boundary(dilation(2.0), 64)
    lap = tangential_laplacian(np.cos(3 * b.theta), b)
    assert np.allclose(lap, -2.25 * np.cos(3 * b.theta), atol=1e-10)
    assert abs(b.integrate(lap)) < 1e-10


def test_map_derivatives_match_finite_differences():
    field = identity() + fourier_bump(2, 1, 0.1)
    x = np.array([[0.3, -0.2], [-0.5, 0.4]])
    _, jac, hess = field.derivatives(x, 2)
    step = 1e-6
    for a in range(2):
        e = np.zeros(2)
        e[a] = step
        fd = (field(x + e) - field(x - e)) / (2 * step)
        assert np.allclose(jac[:, :, a], fd, rtol=1e-6, atol=1e-9)
        fd2 = (field.jacobian(x + e) - field.jacobian(x - e)) / (2 * step)
        assert np.allclose(hess[:, :, :, a], fd2, rtol=1e-6, atol=1e-8)


def test_composed_map_third_derivatives_match_finite_differences():
    field = Compose(identity() + fourier_bump(2, 1, 0.1), ellipse(1.2) + fourier_bump(3, 0, 0.05))
    x = np.array([[0.3, -0.2], [-0.5, 0.4], [0.1, 0.7]])
    third = field.derivatives(x, 3)[3]
    step = 1e-5
    for c in range(2):
        e = np.zeros(2)
        e[c] = step
        fd3 = (field.derivatives(x + e, 2)[2] - field.derivatives(x - e, 2)[2]) / (2 * step)
        assert np.allclose(third[..., c], fd3, rtol=1e-6, atol=1e-7)


def test_fourier_bump_interior_profile_is_polynomial():
    # r^(p + 2q + 1) cos(p theta) e_r, not confined to a boundary collar
    r, theta = 0.5, np.pi / 5
    x = np.array([[r * np.cos(theta), r * np.sin(theta)]])
    value = fourier_bump(2, 1)(x)[0]
    expected = r ** 4 * np.cos(2 * theta) * np.array([np.cos(theta), np.sin(theta)])
    assert np.allclose(value, expected, atol=1e-14)
    assert np.linalg.norm(value) > 0.0


def test_area_derivative_matches_boundary_formula():
    psi = fourier_bump(2, 0, 1.0) + dilation(1.0)
    base = ellipse(1.2)
    eps = 1e-5
    plus = enclosed_area(build_boundary(base + psi * eps, 256))
    minus = enclosed_area(build_boundary(base + psi * -eps, 256))
    b = build_boundary(base, 256)
    assert (plus - minus) / (2 * eps) == pytest.approx(volume_derivative(psi, b), rel=2e-3)


# --- Failure cases ------------------------------------------------------

def test_orientation_reversing_map_rejected():
    with pytest.raises(InvalidInputError) as exc:
        build_boundary(linear([[-1.0, 0.0], [0.0, 1.0]]), 64)
    assert "orientation" in exc.value.detail


def test_folded_boundary_rejected():
    # radius 1 + 1.5 cos(6 theta) dips below zero
    with pytest.raises(InvalidInputError):
        build_boundary(identity() + fourier_bump(6, 0, 1.5), 256)


def test_too_few_samples_rejected():
    with pytest.raises(InvalidInputError):
        build_boundary(identity(), 8)


def test_unknown_names_rejected():
    with pytest.raises(InvalidInputError):
        shape_map("square")
    with pytest.raises(InvalidInputError):
        perturbation_field("twist")
    with pytest.raises(InvalidInputError):
        pull_back(dilation(1.0), identity(), "world")
