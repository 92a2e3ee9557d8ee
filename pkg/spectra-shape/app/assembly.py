"""
Bilinear-form pairs (A, B) for the seven eigenvalue problems.

Second-order kinds (P10, Lame, Reissner-Mindlin) use continuous quadratic
Lagrange elements. Fourth-order kinds (P20, P21, N, I) use continuous cubic
elements with a C0 interior-penalty discretization of the Hessian form
    sum_T int D2u : D2v
  - sum_e int ({u_nn}[v_n] + {v_nn}[u_n]) + sigma_e int [u_n][v_n],
with sigma_e = 20 p^2 / h_e. Clamped kinds add the same terms on boundary
edges, which imposes du/dnu = 0 weakly.
"""
import logging
import re
from dataclasses import dataclass, replace
from typing import Callable, Literal, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.sparse.linalg import splu

from .config import get_settings
from .errors import DiscretizationError, InvalidInputError
from .mesh import LOCAL_EDGES, REF_VERTICES, MappedMesh, edge_quadrature, edge_xi, map_mesh

logger = logging.getLogger(__name__)

Kind = Literal["P10", "P20", "P21", "N", "I", "L", "R"]

FOURTH_ORDER = {"P20", "P21", "N", "I"}
CLAMPED = {"P20", "P21"}
PENALTY_FLOOR = 20.0

_ALIASES = {
    "n": "N", "neumann": "N", "neumann-biharmonic": "N", "neumannbiharmonic": "N",
    "i": "I", "intermediate": "I",
    "l": "L", "lame": "L", "lamé": "L",
    "r": "R", "rm": "R", "reissner-mindlin": "R", "reissnermindlin": "R",
}


def parse_kind(name: str) -> str:
    key = str(name).strip().lower()
    if key in _ALIASES:
        return _ALIASES[key]
    match = re.fullmatch(r"p_?(\d)(\d)", key)
    if match:
        n, m = int(match.group(1)), int(match.group(2))
        if m >= n:
            raise InvalidInputError(f"P{n}{m}: the lower order m must be smaller than n")
        if n >= 3:
            raise InvalidInputError(
                f"P{n}{m} is not discretized (order 2n = {2 * n}); "
                f"use the dilation scaling law slope -2(n-m) = {-2 * (n - m)} instead"
            )
        return f"P{n}{m}"
    raise InvalidInputError(f"unknown problem kind '{name}'")


# ---------------------------------------------------------------------------
# Problem description
# ---------------------------------------------------------------------------
class ProblemSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind:  Kind
    lam:   float = Field(1.0, gt=0)
    mu:    float = Field(1.0, gt=0)
    kappa: float = Field(5.0 / 6.0, gt=0)
    t:     float = Field(0.2, gt=0)

    @field_validator("kind", mode="before")
    @classmethod
    def _normalize_kind(cls, v):
        return parse_kind(v)

    @property
    def k(self) -> int:
        """Regularity order of the admissible maps."""
        if self.kind.startswith("P"):
            return int(self.kind[1])
        return 2 if self.kind in ("N", "I") else 1

    @property
    def degree(self) -> int:
        return 3 if self.kind in FOURTH_ORDER else 2

    @property
    def components(self) -> int:
        return {"L": 2, "R": 3}.get(self.kind, 1)

    @property
    def fourth_order(self) -> bool:
        return self.kind in FOURTH_ORDER


@dataclass(frozen=True)
class FESpace:
    mesh:        MappedMesh
    problem:     ProblemSpec
    components:  int
    degree:      int
    constrained: np.ndarray
    penalty:     Optional[float] = None     # sigma_e * h_e
    penalized_boundary: bool = False

    @property
    def n_nodes(self) -> int:
        return self.mesh.n_nodes

    @property
    def n_dofs(self) -> int:
        return self.components * self.n_nodes

    @property
    def free(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.constrained] = False
        return np.nonzero(mask)[0]

    def dofs(self, comp: int, nodes) -> np.ndarray:
        return comp * self.n_nodes + np.asarray(nodes)


@dataclass(frozen=True)
class FormPair:
    A:     sp.csr_matrix
    B:     sp.csr_matrix
    space: FESpace

    def restricted(self) -> Tuple[sp.csr_matrix, sp.csr_matrix]:
        free = self.space.free
        return self.A[free][:, free], self.B[free][:, free]


# ---------------------------------------------------------------------------
# Local forms
# ---------------------------------------------------------------------------
def _element_blocks(problem: ProblemSpec, mm: MappedMesh):
    jets, w = mm.jets, mm.quad_weights
    phi, grad = jets.phi, jets.grad
    mass = np.einsum("eq,eqk,eql->ekl", w, phi, phi)
    stiff = np.einsum("eq,eqki,eqli->ekl", w, grad, grad)
    kind = problem.kind

    if kind in FOURTH_ORDER:
        hess = np.einsum("eq,eqkij,eqlij->ekl", w, jets.hess, jets.hess)
        return hess, (stiff if kind == "P21" else mass)
    if kind == "P10":
        return stiff, mass

    cross = [[np.einsum("eq,eqk,eql->ekl", w, grad[..., c], grad[..., d]) for d in range(2)] for c in range(2)]
    C = problem.components
    E, nb = mass.shape[:2]
    A = np.zeros((E, C * nb, C * nb))
    B = np.zeros_like(A)

    def blk(c, d):
        return (slice(None), slice(c * nb, (c + 1) * nb), slice(d * nb, (d + 1) * nb))

    lam, mu = problem.lam, problem.mu
    if kind == "L":
        for c in range(2):
            B[blk(c, c)] = mass
            for d in range(2):
                A[blk(c, d)] = (lam + mu) * cross[c][d] + (mu * stiff if c == d else 0.0)
        return A, B

    # Reissner-Mindlin, unknowns (beta_1, beta_2, w)
    shear = problem.kappa * mu / problem.t ** 2
    val_grad = [np.einsum("eq,eqk,eql->ekl", w, phi, grad[..., d]) for d in range(2)]
    for c in range(2):
        B[blk(c, c)] = problem.t ** 2 / 12.0 * mass
        for d in range(2):
            A[blk(c, d)] = (mu + lam) / 12.0 * cross[c][d]
        A[blk(c, c)] += mu / 12.0 * stiff + shear * mass
        A[blk(c, 2)] = -shear * val_grad[c]
        A[blk(2, c)] = -shear * np.transpose(val_grad[c], (0, 2, 1))
    A[blk(2, 2)] = shear * stiff
    B[blk(2, 2)] = mass
    return A, B


def _element_dofs(mm: MappedMesh, components: int) -> np.ndarray:
    return np.concatenate([c * mm.n_nodes + mm.elem_nodes for c in range(components)], axis=1)


def _scatter(dofs: np.ndarray, local: np.ndarray, n: int) -> sp.csr_matrix:
    nd = dofs.shape[1]
    rows = np.broadcast_to(dofs[:, :, None], (len(dofs), nd, nd)).ravel()
    cols = np.broadcast_to(dofs[:, None, :], (len(dofs), nd, nd)).ravel()
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def _edge_side(mm: MappedMesh, elems, local, lo, t):
    tri = mm.ref.triangles
    from_lo = tri[elems, LOCAL_EDGES[local, 0]] == lo
    return mm.element_jets(elems, edge_xi(local, from_lo, t))


def _ipg_edges(mm: MappedMesh, penalty: float, with_boundary: bool) -> sp.csr_matrix:
    """Consistency, symmetry and penalty terms on interior (and optionally boundary) edges."""
    topo = mm.ref.topology
    t, wt = edge_quadrature()
    n = mm.n_nodes
    total = sp.csr_matrix((n, n))

    groups = [np.nonzero(topo["edge_count"] == 2)[0]]
    if with_boundary:
        groups.append(np.nonzero(topo["edge_count"] == 1)[0])

    for ids in groups:
        if len(ids) == 0:
            continue
        lo = topo["edges"][ids, 0]
        e1, l1 = topo["edge_elems"][ids, 0], topo["edge_local"][ids, 0]
        side1 = _edge_side(mm, e1, l1, lo, t)

        direction = REF_VERTICES[LOCAL_EDGES[l1, 1]] - REF_VERTICES[LOCAL_EDGES[l1, 0]]
        tang = np.einsum("eqia,ea->eqi", side1.DF, direction)
        norm = np.linalg.norm(tang, axis=2)
        nrm = np.stack([tang[..., 1], -tang[..., 0]], axis=2) / norm[..., None]
        ds = norm * wt[None, :]
        sigma = penalty / ds.sum(axis=1)

        jump = np.einsum("eqki,eqi->eqk", side1.grad, nrm)
        avg = np.einsum("eqkij,eqi,eqj->eqk", side1.hess, nrm, nrm)
        dofs = mm.elem_nodes[e1]
        if topo["edge_elems"][ids[0], 1] >= 0:
            e2, l2 = topo["edge_elems"][ids, 1], topo["edge_local"][ids, 1]
            side2 = _edge_side(mm, e2, l2, lo, t)
            jump = np.concatenate([jump, -np.einsum("eqki,eqi->eqk", side2.grad, nrm)], axis=2)
            avg = 0.5 * np.concatenate([avg, np.einsum("eqkij,eqi,eqj->eqk", side2.hess, nrm, nrm)], axis=2)
            dofs = np.concatenate([dofs, mm.elem_nodes[e2]], axis=1)

        consist = np.einsum("eq,eqk,eql->ekl", ds, avg, jump)
        local = -(consist + np.transpose(consist, (0, 2, 1)))
        local += np.einsum("eq,eqk,eql->ekl", ds * sigma[:, None], jump, jump)
        total = total + _scatter(dofs, local, n)
    return total


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------
def apply_essential_conditions(problem: ProblemSpec, space: FESpace) -> FESpace:
    """Strongly constrained DOFs per kind: boundary values for all but N."""
    kind = problem.kind
    bnodes = space.mesh.boundary_nodes
    if kind == "N":
        constrained = np.zeros(0, dtype=int)
    elif kind in ("P10", "P20", "P21", "I", "L", "R"):
        constrained = np.concatenate([space.dofs(c, bnodes) for c in range(space.components)])
    else:
        raise InvalidInputError(f"no essential conditions defined for kind '{kind}'")
    return replace(space, constrained=np.sort(constrained), penalized_boundary=kind in CLAMPED)


def check_penalty_stability(pair: FormPair, seed: int, trials: int = 8) -> float:
    """Smallest x'Ax / x'Bx over random free vectors; must not fall below -1e-10."""
    A, B = pair.restricted()
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(trials):
        x = rng.standard_normal(A.shape[0])
        worst = min(worst, float(x @ (A @ x)) / float(x @ (B @ x)))
    if worst < -1e-10:
        raise DiscretizationError(f"IPG form is indefinite: x'Ax/x'Bx = {worst:.3e} on a random vector")
    return worst


def assemble(problem: ProblemSpec, domain: MappedMesh, penalty_scale: Optional[float] = None,
             seed: Optional[int] = None) -> Tuple[FESpace, FormPair]:
    settings = get_settings()
    penalty_scale = settings.penalty_scale if penalty_scale is None else penalty_scale
    seed = settings.seed if seed is None else seed

    mm = domain if domain.degree == problem.degree else map_mesh(domain.ref, domain.map, problem.degree)
    C = problem.components
    n = C * mm.n_nodes

    penalty = None
    if problem.fourth_order:
        floor = PENALTY_FLOOR * problem.degree ** 2
        penalty = floor * penalty_scale
        if penalty < floor:
            raise DiscretizationError(
                f"IPG penalty {penalty:.1f}/h_e is below the stability threshold {floor:.1f}/h_e"
            )

    A_loc, B_loc = _element_blocks(problem, mm)
    dofs = _element_dofs(mm, C)
    A = _scatter(dofs, A_loc, n)
    B = _scatter(dofs, B_loc, n)
    if problem.fourth_order:
        A = A + _ipg_edges(mm, penalty, with_boundary=problem.kind in CLAMPED)
    A = ((A + A.T) * 0.5).tocsr()
    B = ((B + B.T) * 0.5).tocsr()

    space = FESpace(mesh=mm, problem=problem, components=C, degree=problem.degree,
                    constrained=np.zeros(0, dtype=int), penalty=penalty)
    space = apply_essential_conditions(problem, space)
    pair = FormPair(A, B, space)

    _, B_free = pair.restricted()
    try:
        splu(B_free.tocsc())
    except RuntimeError as e:
        raise DiscretizationError(f"B is singular on the constrained space: {e}")
    if problem.fourth_order:
        check_penalty_stability(pair, seed)

    logger.info(
        f"Assembled {problem.kind}: {n} dofs ({len(space.free)} free), "
        f"nnz(A)={A.nnz}, nnz(B)={B.nnz}"
    )
    return space, pair


def interpolate(space: FESpace, func: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """Nodal interpolant of ``func`` (physical points -> values, one column per component)."""
    vals = np.asarray(func(space.mesh.node_phys), dtype=float)
    vals = vals.reshape(space.n_nodes, -1)
    if vals.shape[1] != space.components:
        raise InvalidInputError(f"function has {vals.shape[1]} components, space has {space.components}")
    return vals.T.reshape(-1).copy()


def rayleigh_quotient(pair: FormPair, vector) -> float:
    v = np.asarray(vector, dtype=float)
    return float(v @ (pair.A @ v)) / float(v @ (pair.B @ v))


def dump_forms(pair: FormPair, path: str) -> None:
    with open(path, "w") as fh:
        for name, mat in (("A", pair.A), ("B", pair.B)):
            coo = mat.tocoo()
            fh.write(f"MATRIX {name} {mat.shape[0]} {coo.nnz}\n")
            for r, c, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{r} {c} {v:.16e}\n")
    logger.info(f"Forms written to {path}")
