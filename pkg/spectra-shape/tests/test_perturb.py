"""
Unit tests for branch tracking, finite differences, crossings and
the volume-constrained flow.
Run with:  pytest spectra-shape/tests/ -v
"""
import pytest
import numpy as np

import sys, os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from app.assembly import ProblemSpec
from app.errors import InvalidInputError
from app.geometry import dilation, ellipse, fourier_bump, identity
from app.mesh import build_disk_mesh
from app.perturb import (
    FLOW_COLUMNS, FlowState, _chain_order, constrained_gradient_step, crossing_probe, dgamma_comparison,
    eigen_path, fd_derivative, flow_frame, flow_monotone_verdict, match_spectra, nagy_check, run_flow,
    shape_volume, solve_shape, start_flow, symmetric_grid, toy_crossing_probe, trial_frame,
)


@pytest.fixture(scope="module")
def ref():
    return build_disk_mesh(0.2)


@pytest.fixture(scope="module")
def mid_ref():
    return build_disk_mesh(0.1)


@pytest.fixture(scope="module")
def dilation_path(ref):
    return eigen_path(ProblemSpec(kind="P10"), dilation(1.0), symmetric_grid(1e-3), 3, ref=ref)


# --- Happy path ---------------------------------------------------------

def test_symmetric_grid():
    assert symmetric_grid(1e-3) == [-1e-3, 1e-3]
    assert symmetric_grid(1e-3, richardson=True) == [-1e-3, -5e-4, 5e-4, 1e-3]


def test_central_difference_exact_for_quadratics():
    eps = np.array(symmetric_grid(0.1))
    values = eps ** 2 + 3.0 * eps + 1.0
    assert fd_derivative(eps, values) == pytest.approx(3.0, rel=1e-12)


def test_richardson_cancels_cubic_term():
    eps = np.array(symmetric_grid(0.1, richardson=True))
    values = eps ** 3 + 2.0 * eps
    plain = fd_derivative(eps, values, eps0=0.1)
    extrapolated = fd_derivative(eps, values, richardson=True)
    assert plain == pytest.approx(2.01, rel=1e-12)
    assert extrapolated == pytest.approx(2.0, rel=1e-12)


def test_chain_starts_at_smallest_positive_step():
    start, steps = _chain_order(np.array([-2.0, -1.0, 0.0, 1.0, 2.0]))
    assert start == 3
    assert steps == [(3, 4), (3, 1), (1, 0), (3, 2)]


def test_matching_identical_spectra(ref):
    s = solve_shape(ProblemSpec(kind="P10"), identity(), ref, 4)
    perm, quality = match_spectra(s, s)
    assert perm.tolist() == [0, 1, 2, 3]
    assert quality == pytest.approx(1.0, abs=1e-8)


def test_dilation_branches_follow_scaling_law(dilation_path):
    assert not dilation_path.flagged
    slopes = fd_derivative(dilation_path)
    base = dilation_path.spectra[0].values * (1 - 1e-3) ** 2
    assert np.allclose(slopes, -2.0 * base, rtol=1e-4)
    frame = dilation_path.frame()
    assert list(frame.columns[:3]) == ["eps", "quality", "branch_1"]
    assert len(frame) == 2


def test_gamma_series_of_pair(dilation_path):
    series = dilation_path.gamma_series([2, 3], 2)
    values = dilation_path.sorted_values()
    assert np.allclose(series, values[:, 1] * values[:, 2])


def test_toy_crossing_is_smooth_in_gamma():
    report = toy_crossing_probe()
    assert report.status == "pass"
    assert report.gamma_jump < 1e-6
    # lower sorted eigenvalue has a kink of 2 sqrt(13/4)
    assert report.sorted_jump == pytest.approx(np.sqrt(13.0), rel=1e-3)


def test_dgamma_comparison_under_dilation(mid_ref):
    res = dgamma_comparison(ProblemSpec(kind="P10"), dilation(1.0), [1], 1, ref=mid_ref, tolerance=0.1)
    assert res.status == "pass"
    # discrete eigenvalues scale exactly, so the difference quotient is sharp
    assert res.fd == pytest.approx(-2.0 * res.gamma, rel=1e-4)
    assert res.formula == pytest.approx(-2.0 * res.gamma, rel=0.1)
    assert res.nagy.predicted[0] == pytest.approx(res.formula, rel=1e-12)


def test_dgamma_comparison_of_product_over_pair(mid_ref):
    res = dgamma_comparison(ProblemSpec(kind="P10"), dilation(1.0), [2, 3], 2, ref=mid_ref, tolerance=0.1)
    assert res.status == "pass"
    assert res.value == pytest.approx(res.gamma ** 2, rel=1e-8)
    assert res.fd == pytest.approx(-4.0 * res.value, rel=1e-4)


def test_nagy_check_splits_pair_under_bump(mid_ref):
    res = nagy_check(ProblemSpec(kind="P10"), fourier_bump(2), [2, 3], ref=mid_ref, tolerance=0.15)
    assert res.status == "pass"
    assert res.predicted[0] < 0.0 < res.predicted[1]
    assert res.predicted.sum() == pytest.approx(res.fd.sum(), abs=0.15 * np.abs(res.fd).max())


def test_crossing_of_pair_keeps_gamma_smooth(ref):
    report = crossing_probe(ProblemSpec(kind="P10"), fourier_bump(2) + dilation(0.5), (2, 3), ref=ref)
    assert report.status == "pass"
    assert abs(report.location) < 2e-3
    assert report.gamma_jump < 0.01
    assert report.sorted_jump > 1.0


def test_zero_step_flow_is_identity(ref):
    state = start_flow(ellipse(1.2))
    assert state.initial_volume == pytest.approx(np.pi, rel=1e-10)
    same = constrained_gradient_step(state, ProblemSpec(kind="P10"), [1], 1, 0.0, ref)
    assert same is state
    assert list(flow_frame(same).columns) == FLOW_COLUMNS


def test_shape_volume_of_dilated_disk():
    assert shape_volume(dilation(1.5)) == pytest.approx(np.pi * 2.25, rel=1e-10)


def test_ellipse_flow_records_post_step_volume_and_trials(ref):
    state = run_flow(ellipse(1.2), ProblemSpec(kind="P10"), [1], 1, steps=2, eta=0.02, ref=ref)
    frame = flow_frame(state)
    accepted = frame[frame["accepted"]]
    assert len(accepted) == state.step >= 1
    # volume of the shape each step lands on
    assert np.allclose(accepted["volume"], state.initial_volume, rtol=1e-9)
    assert (accepted["gamma_after"] < accepted["gamma"]).all()
    assert state.gamma_history[-1] < state.gamma_history[0]
    assert len(state.gamma_history) == len(frame) + int(frame["accepted"].iloc[-1])

    trials = trial_frame(state)
    assert len(trials) == state.rejected + state.step
    assert int(trials["accepted"].sum()) == state.step
    assert int(frame["rejected"].sum()) == state.rejected
    assert flow_monotone_verdict(state)[0] == "pass"


def _row(gamma, gamma_after, accepted, rejected=0):
    return {"step": 0, "gamma": gamma, "gamma_after": gamma_after, "volume": np.pi, "residual": 0.1,
            "velocity_norm": 1.0, "eta": 0.01 if accepted else 0.0, "rejected": rejected, "accepted": accepted}


def test_flow_verdict_reads_resolved_gamma():
    steady = FlowState(identity(), 2, np.pi, (_row(5.0, 4.9, True), _row(4.9, 4.8, True, rejected=3)))
    verdict, detail = flow_monotone_verdict(steady)
    assert verdict == "pass"
    assert "3 rejected" in detail

    # fresh solve above the value the previous step was accepted at
    drifted = FlowState(identity(), 2, np.pi, (_row(5.0, 4.9, True), _row(4.95, 4.8, True)))
    assert flow_monotone_verdict(drifted)[0] == "fail"


def test_stalled_flow_is_inconclusive():
    stalled = FlowState(identity(), 1, np.pi, (_row(5.0, 4.9, True), _row(4.9, 4.9, False, rejected=21)),
                        status="stalled")
    verdict, detail = flow_monotone_verdict(stalled)
    assert verdict == "inconclusive"
    assert "21 rejected" in detail
    assert stalled.gamma_history == [5.0, 4.9]


# --- Failure cases ------------------------------------------------------

def test_fd_needs_symmetric_pair():
    with pytest.raises(InvalidInputError):
        fd_derivative(np.array([-1e-3, 2e-3]), np.array([0.0, 1.0]), eps0=1e-3)


def test_richardson_needs_two_steps():
    eps = np.array(symmetric_grid(1e-3))
    with pytest.raises(InvalidInputError):
        fd_derivative(eps, eps, richardson=True)


def test_eigen_path_rejects_repeated_points(ref):
    with pytest.raises(InvalidInputError):
        eigen_path(ProblemSpec(kind="P10"), dilation(1.0), [1e-3, 1e-3], 2, ref=ref)


def test_value_count_mismatch():
    with pytest.raises(InvalidInputError):
        fd_derivative(np.array([-1.0, 1.0]), np.array([1.0, 2.0, 3.0]))
