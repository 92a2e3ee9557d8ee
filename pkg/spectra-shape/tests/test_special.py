"""
Unit tests for the Bessel oracle and the closed-form disk eigenpairs.
Run with:  pytest spectra-shape/tests/ -v
"""
import pytest
import numpy as np

import sys, os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from app.errors import InvalidInputError
from app.special import bessel, disk_eigenpairs, find_root, frequencies, make_eigenpair

J01 = 2.404825557695773
J11 = 3.831705970207512
CLAMPED_01 = 3.196220616582


def _interior(n=40, seed=0):
    rng = np.random.default_rng(seed)
    r = 0.9 * np.sqrt(rng.random(n))
    t = 2 * np.pi * rng.random(n)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=1)


def _circle(n=32):
    t = 2 * np.pi * np.arange(n) / n
    return np.stack([np.cos(t), np.sin(t)], axis=1)


# --- Happy path ---------------------------------------------------------

def test_bessel_derivative_identity():
    # J_0' = -J_1
    val, d1, _, _ = bessel("J", 0, np.array([0.5, 2.0, 7.0]))
    assert np.allclose(d1, -bessel("J", 1, np.array([0.5, 2.0, 7.0]))[0], atol=1e-14)


def test_dirichlet_and_clamped_frequencies():
    assert frequencies("P10", 0, 1)[0] == pytest.approx(J01, abs=1e-12)
    assert frequencies("P10", 1, 1)[0] == pytest.approx(J11, abs=1e-12)
    assert frequencies("P20", 0, 1)[0] == pytest.approx(CLAMPED_01, abs=1e-7)


def test_disk_eigenpairs_ascending_with_trig_partners():
    pairs = disk_eigenpairs("P10", 5)
    gammas = [p.gamma for p in pairs]
    assert gammas == sorted(gammas)
    assert gammas[0] == pytest.approx(J01 ** 2)
    assert (pairs[1].order, pairs[1].trig) == (1, "cos")
    assert (pairs[2].order, pairs[2].trig) == (1, "sin")
    assert pairs[1].gamma == pairs[2].gamma


@pytest.mark.parametrize("kind, order, index, trig", [
    ("P10", 0, 1, "cos"), ("P10", 2, 1, "sin"), ("P20", 0, 1, "cos"), ("P20", 1, 1, "cos"),
])
def test_pde_residual_vanishes(kind, order, index, trig):
    pair = make_eigenpair(kind, order, index, trig)
    res = pair.pde_residual(_interior())
    assert np.abs(res).max() < 1e-8 * pair.gamma


def test_boundary_conditions_hold():
    lap = make_eigenpair("P10", 1, 1, "cos")
    assert np.abs(lap.derivative(_circle())).max() < 1e-12
    plate = make_eigenpair("P20", 1, 1, "sin")
    u, grad = plate.jets(_circle(), 1)
    radial = np.einsum("ni,ni->n", grad, _circle())
    assert np.abs(u).max() < 1e-10
    assert np.abs(radial).max() < 1e-9


def test_eigenfunction_is_l2_normalized():
    pair = make_eigenpair("P10", 2, 1, "cos")
    x, w = np.polynomial.legendre.leggauss(60)
    r, wr = 0.5 * (x + 1.0), 0.5 * w
    t = 2 * np.pi * np.arange(64) / 64
    R, T = np.meshgrid(r, t, indexing="ij")
    pts = np.stack([(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()], axis=1)
    vals = pair.derivative(pts).reshape(R.shape)
    total = np.sum(wr[:, None] * R * vals ** 2) * (2 * np.pi / 64)
    assert total == pytest.approx(1.0, rel=1e-10)


def test_jets_are_symmetric_tensors():
    pair = make_eigenpair("P20", 2, 1, "cos")
    _, _, hess, third = pair.jets(_interior(8), 3)
    assert np.allclose(hess, np.transpose(hess, (0, 2, 1)))
    assert np.allclose(third, np.transpose(third, (0, 2, 1, 3)))


# --- Failure cases ------------------------------------------------------

def test_bessel_domain_checks():
    with pytest.raises(InvalidInputError):
        bessel("Y", 0, 1.0)
    with pytest.raises(InvalidInputError):
        bessel("J", 13, 1.0)
    with pytest.raises(InvalidInputError):
        bessel("I", 0, 61.0)


def test_find_root_needs_bracket():
    with pytest.raises(InvalidInputError):
        find_root(np.cos, 0.0, 1.0)
    assert find_root(np.cos, 1.0, 2.0) == pytest.approx(np.pi / 2, abs=1e-12)


def test_oracle_only_for_laplace_and_clamped():
    with pytest.raises(InvalidInputError):
        disk_eigenpairs("N", 3)
