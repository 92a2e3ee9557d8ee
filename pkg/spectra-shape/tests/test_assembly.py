"""
Unit tests for problem parsing, form assembly and the IPG penalty guard.
Run with:  pytest spectra-shape/tests/ -v
"""
import pytest
import numpy as np
from scipy import special

import sys, os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from app.assembly import ProblemSpec, assemble, interpolate, parse_kind, rayleigh_quotient
from app.errors import DiscretizationError, InvalidInputError
from app.geometry import identity
from app.mesh import build_disk_mesh, map_mesh


@pytest.fixture(scope="module")
def ref():
    return build_disk_mesh(0.25)


# --- Happy path ---------------------------------------------------------

@pytest.mark.parametrize("name, kind", [
    ("P10", "P10"), ("p_20", "P20"), ("P21", "P21"), ("neumann", "N"),
    ("intermediate", "I"), ("Lame", "L"), ("reissner-mindlin", "R"),
])
def test_parse_kind_aliases(name, kind):
    assert parse_kind(name) == kind


def test_problem_layout():
    assert ProblemSpec(kind="P10").degree == 2
    assert ProblemSpec(kind="N").degree == 3
    assert ProblemSpec(kind="L").components == 2
    assert ProblemSpec(kind="R").components == 3
    assert ProblemSpec(kind="I").fourth_order
    assert not ProblemSpec(kind="L").fourth_order


def test_forms_are_symmetric(ref):
    problem = ProblemSpec(kind="P20")
    _, pair = assemble(problem, map_mesh(ref, identity(), problem.degree))
    assert abs(pair.A - pair.A.T).max() == 0.0
    assert abs(pair.B - pair.B.T).max() == 0.0


def test_mass_form_integrates_area(ref):
    problem = ProblemSpec(kind="N")
    space, pair = assemble(problem, map_mesh(ref, identity(), problem.degree))
    one = interpolate(space, lambda x: np.ones(len(x)))
    assert float(one @ (pair.B @ one)) == pytest.approx(np.pi, rel=1e-3)


def test_affine_functions_have_zero_energy_for_neumann(ref):
    problem = ProblemSpec(kind="N")
    space, pair = assemble(problem, map_mesh(ref, identity(), problem.degree))
    lin = interpolate(space, lambda x: 1.0 + 2.0 * x[:, 0] - x[:, 1])
    assert abs(rayleigh_quotient(pair, lin)) < 1e-8


def test_lame_constrains_both_components(ref):
    problem = ProblemSpec(kind="L")
    space, _ = assemble(problem, map_mesh(ref, identity(), problem.degree))
    assert space.n_dofs == 2 * space.n_nodes
    assert len(space.constrained) == 2 * len(space.mesh.boundary_nodes)


def test_reissner_mindlin_mass_patch(ref):
    problem = ProblemSpec(kind="R")
    space, pair = assemble(problem, map_mesh(ref, identity(), problem.degree))
    zeros = lambda x: np.zeros(len(x))
    ones = lambda x: np.ones(len(x))
    deflection = interpolate(space, lambda x: np.column_stack([zeros(x), zeros(x), ones(x)]))
    assert float(deflection @ (pair.B @ deflection)) == pytest.approx(np.pi, rel=2e-3)
    rotation = interpolate(space, lambda x: np.column_stack([ones(x), zeros(x), zeros(x)]))
    assert float(rotation @ (pair.B @ rotation)) == pytest.approx(problem.t ** 2 / 12.0 * np.pi, rel=2e-3)


def test_lame_quotient_without_first_parameter():
    # mu = 1, lam -> 0 (lam must stay positive): A = |grad u|^2 + (div u)^2,
    # and for u = (sin x, 0) both terms are cos^2 x.
    # Over the unit disk, int cos(2x) = pi J1(2).
    problem = ProblemSpec(kind="L", mu=1.0, lam=1e-12)
    space, pair = assemble(problem, map_mesh(build_disk_mesh(0.1), identity(), problem.degree))
    u = interpolate(space, lambda x: np.column_stack([np.sin(x[:, 0]), np.zeros(len(x))]))
    j = special.j1(2.0)
    exact = 2.0 * (1.0 + j) / (1.0 - j)
    assert rayleigh_quotient(pair, u) == pytest.approx(exact, rel=1e-3)


# --- Failure cases ------------------------------------------------------

@pytest.mark.parametrize("name", ["P12", "P31", "Q10", "plate"])
def test_parse_kind_rejects(name):
    with pytest.raises(InvalidInputError):
        parse_kind(name)


def test_penalty_below_floor_fails_loudly(ref):
    problem = ProblemSpec(kind="P20")
    with pytest.raises(DiscretizationError) as exc:
        assemble(problem, map_mesh(ref, identity(), problem.degree), penalty_scale=0.5)
    assert "penalty" in exc.value.detail
    assert exc.value.exit_code == 1


def test_interpolate_component_mismatch(ref):
    problem = ProblemSpec(kind="L")
    space, _ = assemble(problem, map_mesh(ref, identity(), problem.degree))
    with pytest.raises(InvalidInputError):
        interpolate(space, lambda x: np.ones(len(x)))
