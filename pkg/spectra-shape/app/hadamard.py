"""
Boundary traces of eigenfunctions and the shape-derivative densities built
from them.

Traces come either from the closed-form disk eigenpairs (exact jets) or
from an FE eigenvector through a local least-squares polynomial fit around
each boundary vertex. Everything downstream (densities, the differential
of the symmetric functions, the branch-slope matrix, the criticality
residual) only sees ``TraceBundle`` samples on a ``BoundaryGeom``.
"""
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import comb, factorial
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.signal import resample

from .assembly import FESpace, ProblemSpec
from .config import get_settings
from .eigensolve import ClusterF, Spectrum
from .errors import DiscretizationError, InvalidInputError, UnusableClusterError
from .geometry import (
    BoundaryGeom, MapExpr, build_boundary, normal_component, normal_jacobian,
    tangential_divergence, tangential_laplacian,
)
from .mesh import MappedMesh
from .special import DiskEigenpair

logger = logging.getLogger(__name__)

FIT_DEGREE = 4
MIN_PATCH_NODES = 20
UNIFIED_KINDS = {"P20", "N", "I"}


# ---------------------------------------------------------------------------
# Trace bundles
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class TraceBundle:
    """Per-sample boundary jets of one eigenfunction; component axis is 1."""
    problem:     ProblemSpec
    gamma:       float
    source:      str            # "oracle" or "fe"
    u:           np.ndarray     # (n, C)
    grad:        np.ndarray     # (n, C, 2)
    hess:        np.ndarray     # (n, C, 2, 2)
    third:       np.ndarray     # (n, C, 2, 2, 2)
    du_dn:       np.ndarray     # (n, C)
    d2u_dn2:     np.ndarray
    d3u_dn3:     np.ndarray
    lap:         np.ndarray
    dlap_dn:     np.ndarray
    div_hess_nu: np.ndarray     # div_dOmega[(D2u) nu]
    tgrad_du_dn: np.ndarray     # (n, C, 2) tangential gradient of du/dnu

    @property
    def n(self) -> int:
        return len(self.u)

    @property
    def kind(self) -> str:
        return self.problem.kind

    def clamped_defect(self) -> float:
        """max |u|, |du/dnu| over the samples."""
        return float(max(np.abs(self.u).max(), np.abs(self.du_dn).max()))


@dataclass(frozen=True)
class FEFunction:
    space:  FESpace
    vector: np.ndarray          # full dof vector, block ordered by component
    gamma:  float

    def nodal(self) -> np.ndarray:
        return self.vector.reshape(self.space.components, self.space.n_nodes).T


def _bundle_from_jets(problem: ProblemSpec, gamma: float, source: str,
                      jets: Sequence[np.ndarray], boundary: BoundaryGeom) -> TraceBundle:
    u, grad, hess, third = jets
    if len(u) != boundary.n:
        raise InvalidInputError(f"{len(u)} trace samples for a boundary with {boundary.n} samples")
    nu, tau, K = boundary.normal, boundary.tangent, boundary.curvature

    du_dn = np.einsum("nci,ni->nc", grad, nu)
    d2 = np.einsum("ncij,ni,nj->nc", hess, nu, nu)
    d3 = np.einsum("ncijk,ni,nj,nk->nc", third, nu, nu, nu)
    lap = np.einsum("ncii->nc", hess)
    dlap_dn = np.einsum("nciia,na->nc", third, nu)

    hess_nu = np.einsum("ncij,nj->nci", hess, nu)
    jac = np.einsum("ncija,nj->ncia", third, nu) + np.einsum("ncij,nja->ncia", hess, normal_jacobian(boundary))
    div_hess_nu = np.stack(
        [tangential_divergence(hess_nu[:, c], jac[:, c], boundary) for c in range(u.shape[1])], axis=1
    )
    u_tau = np.einsum("nci,ni->nc", grad, tau)
    d_tau = np.einsum("ni,ncij,nj->nc", tau, hess, nu) + K[:, None] * u_tau
    tgrad = d_tau[..., None] * tau[:, None, :]

    return TraceBundle(problem, float(gamma), source, u, grad, hess, third,
                       du_dn, d2, d3, lap, dlap_dn, div_hess_nu, tgrad)


def _oracle_jets(pair: DiskEigenpair, boundary: BoundaryGeom) -> List[np.ndarray]:
    radius = np.linalg.norm(boundary.points, axis=1)
    if np.abs(radius - 1.0).max() > 1e-12:
        raise InvalidInputError("closed-form traces exist only on the unit circle")
    return [j[:, None] for j in pair.jets(boundary.points, 3)]


# ---------------------------------------------------------------------------
# FE recovery
# ---------------------------------------------------------------------------
def _monomials(degree: int) -> List[Tuple[int, int]]:
    return [(a, t - a) for t in range(degree + 1) for a in range(t, -1, -1)]


class PatchFitter:
    """
    Degree-4 least-squares fits of FE data on the element patch (graph distance 2)
    around every boundary vertex, differentiated analytically at the vertex.
    """

    def __init__(self, mesh: MappedMesh, degree: int = FIT_DEGREE):
        self.mesh = mesh
        self.monomials = _monomials(degree)
        ref = mesh.ref
        tri = ref.triangles
        self.vertices = ref.boundary_vertices
        self.theta = ref.boundary_theta
        self.patches: List[Tuple[np.ndarray, np.ndarray, float]] = []
        for v in self.vertices:
            first = ref.vertex_elements[v]
            ring = np.unique(tri[first])
            elems = np.unique(np.concatenate([ref.vertex_elements[w] for w in ring]))
            nodes = np.unique(mesh.elem_nodes[elems])
            if len(nodes) < MIN_PATCH_NODES:
                raise DiscretizationError(
                    f"patch around boundary vertex {v} has {len(nodes)} nodes; "
                    f"a degree-{degree} fit needs {MIN_PATCH_NODES} (mesh too coarse)"
                )
            offset = mesh.node_phys[nodes] - mesh.node_phys[v]
            rho = float(np.linalg.norm(offset, axis=1).max())
            s = offset / rho
            design = np.stack([s[:, 0] ** a * s[:, 1] ** b for a, b in self.monomials], axis=1)
            rank = np.linalg.matrix_rank(design)
            if rank < len(self.monomials):
                raise DiscretizationError(
                    f"patch around boundary vertex {v} supports rank {rank} < {len(self.monomials)}"
                )
            self.patches.append((nodes, np.linalg.pinv(design), rho))
        logger.debug(f"Patch fitter: {len(self.patches)} boundary patches")

    def boundary(self) -> BoundaryGeom:
        """Boundary samples at the reference angles of the boundary vertices."""
        return build_boundary(self.mesh.map, len(self.vertices))

    def jets(self, nodal: np.ndarray) -> List[np.ndarray]:
        """[u, grad, hess, third] at the boundary vertices for nodal data (n_nodes, C)."""
        n, C = len(self.patches), nodal.shape[1]
        out = [np.zeros((n, C) + (2,) * r) for r in range(4)]
        index = {m: k for k, m in enumerate(self.monomials)}
        for p, (nodes, pinv, rho) in enumerate(self.patches):
            coef = pinv @ nodal[nodes]                      # (n_monomials, C)
            for r in range(4):
                for idx in np.ndindex(*((2,) * r)):
                    dx = idx.count(0)
                    dy = r - dx
                    out[r][(p, slice(None)) + idx] = coef[index[(dx, dy)]] * factorial(dx) * factorial(dy) / rho ** r
        return out


def _resample_jets(jets: List[np.ndarray], n: int) -> List[np.ndarray]:
    return [resample(j, n, axis=0) for j in jets]


def recover_traces(eigenfunction: Union[DiskEigenpair, FEFunction], boundary: BoundaryGeom,
                   fitter: Optional[PatchFitter] = None) -> TraceBundle:
    if isinstance(eigenfunction, DiskEigenpair):
        problem = ProblemSpec(kind=eigenfunction.kind)
        return _bundle_from_jets(problem, eigenfunction.gamma, "oracle",
                                 _oracle_jets(eigenfunction, boundary), boundary)
    if not isinstance(eigenfunction, FEFunction):
        raise InvalidInputError(f"cannot recover traces from {type(eigenfunction).__name__}")

    fitter = fitter or PatchFitter(eigenfunction.space.mesh)
    jets = fitter.jets(eigenfunction.nodal())
    if boundary.n != len(fitter.vertices):
        jets = _resample_jets(jets, boundary.n)
    return _bundle_from_jets(eigenfunction.space.problem, eigenfunction.gamma, "fe", jets, boundary)


def cluster_traces(spectrum: Spectrum, cluster: ClusterF, boundary: Optional[BoundaryGeom] = None,
                   fitter: Optional[PatchFitter] = None) -> Tuple[List[TraceBundle], BoundaryGeom]:
    """Traces of every cluster member, recovered in parallel and returned in index order."""
    fitter = fitter or PatchFitter(spectrum.space.mesh)
    boundary = boundary or fitter.boundary()
    members = [FEFunction(spectrum.space, spectrum.vectors[:, i], float(spectrum.values[i]))
               for i in cluster.indices]
    with ThreadPoolExecutor(max_workers=get_settings().threads) as pool:
        traces = list(pool.map(lambda f: recover_traces(f, boundary, fitter), members))
    return traces, boundary


def oracle_traces(pairs: Sequence[DiskEigenpair], boundary: BoundaryGeom) -> List[TraceBundle]:
    return [recover_traces(p, boundary) for p in pairs]


# ---------------------------------------------------------------------------
# Densities
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class MDensity:
    values:  np.ndarray
    variant: str

    def integrate(self, boundary: BoundaryGeom, weight=None) -> float:
        vals = self.values if weight is None else self.values * weight
        return boundary.integrate(vals)


def _check_pair(tu: TraceBundle, tv: TraceBundle) -> None:
    if tu.n != tv.n:
        raise InvalidInputError(f"trace bundles of different length ({tu.n} vs {tv.n})")
    if tu.kind != tv.kind:
        raise InvalidInputError(f"trace bundles of different problems ({tu.kind} vs {tv.kind})")


def _hess_dot(tu: TraceBundle, tv: TraceBundle) -> np.ndarray:
    return np.einsum("ncij,ncij->n", tu.hess, tv.hess)


def m_density(problem: ProblemSpec, tu: TraceBundle, tv: TraceBundle, gamma: float,
              boundary: Optional[BoundaryGeom] = None) -> MDensity:
    """Pointwise boundary density M[u, v] for the problem family."""
    _check_pair(tu, tv)
    if tu.kind != problem.kind:
        raise InvalidInputError(f"traces of {tu.kind} used with problem {problem.kind}")
    kind = problem.kind

    if kind == "P10":
        vals = tu.du_dn[:, 0] * tv.du_dn[:, 0]
    elif kind in ("P20", "P21"):
        vals = tu.d2u_dn2[:, 0] * tv.d2u_dn2[:, 0]
    elif kind == "N":
        vals = gamma * tu.u[:, 0] * tv.u[:, 0] - _hess_dot(tu, tv)
    elif kind == "I":
        if boundary is None:
            raise InvalidInputError("the intermediate-problem density needs the boundary for its tangential Laplacian")
        prod = tu.du_dn[:, 0] * tv.du_dn[:, 0]
        vals = (_hess_dot(tu, tv) - 2.0 * tangential_laplacian(prod, boundary)
                - (tu.du_dn[:, 0] * tv.d3u_dn3[:, 0] + tv.du_dn[:, 0] * tu.d3u_dn3[:, 0]))
    elif kind == "L":
        un, vn = tu.du_dn[:, :2], tv.du_dn[:, :2]
        nu = _normal_from(tu, boundary)
        vals = (problem.mu * np.einsum("ni,ni->n", un, vn)
                + (problem.mu + problem.lam) * np.einsum("ni,ni->n", un, nu) * np.einsum("ni,ni->n", vn, nu))
    elif kind == "R":
        bn, tn = tu.du_dn[:, :2], tv.du_dn[:, :2]
        nu = _normal_from(tu, boundary)
        vals = (problem.mu / 12.0 * np.einsum("ni,ni->n", bn, tn)
                + (problem.mu + problem.lam) / 12.0 * np.einsum("ni,ni->n", bn, nu) * np.einsum("ni,ni->n", tn, nu)
                + problem.kappa * problem.mu / problem.t ** 2 * tu.du_dn[:, 2] * tv.du_dn[:, 2])
    else:
        raise InvalidInputError(f"no boundary density for kind {kind}")
    return MDensity(vals, kind)


def _normal_from(trace: TraceBundle, boundary: Optional[BoundaryGeom]) -> np.ndarray:
    if boundary is None:
        raise InvalidInputError(f"the {trace.kind} density needs the boundary normal")
    return boundary.normal


def m_density_unified_biharmonic(tu: TraceBundle, tv: TraceBundle, gamma: float) -> MDensity:
    """Single density valid for P20, N and I eigenfunctions."""
    _check_pair(tu, tv)
    if tu.kind not in UNIFIED_KINDS:
        raise InvalidInputError(f"unified biharmonic density covers P20, N, I, not {tu.kind}")
    vals = (2.0 * tu.d2u_dn2[:, 0] * tv.d2u_dn2[:, 0] - _hess_dot(tu, tv) + gamma * tu.u[:, 0] * tv.u[:, 0]
            - tu.du_dn[:, 0] * (tv.div_hess_nu[:, 0] + tv.dlap_dn[:, 0])
            - tv.du_dn[:, 0] * (tu.div_hess_nu[:, 0] + tu.dlap_dn[:, 0]))
    return MDensity(vals, "unified-biharmonic")


# ---------------------------------------------------------------------------
# Shape derivatives
# ---------------------------------------------------------------------------
def _require_usable(cluster: ClusterF, traces: Sequence[TraceBundle]) -> None:
    if not cluster.usable:
        raise UnusableClusterError(f"cluster {cluster.labels} is not usable: {cluster.reason}")
    if len(traces) != cluster.size:
        raise InvalidInputError(f"{len(traces)} trace bundles for a cluster of size {cluster.size}")


def cluster_density_sum(traces: Sequence[TraceBundle], boundary: BoundaryGeom) -> np.ndarray:
    """sum_l M[u_l, u_l], accumulated in index order."""
    total = np.zeros(boundary.n)
    for tr in traces:
        total = total + m_density(tr.problem, tr, tr, tr.gamma, boundary).values
    return total


def shape_gradient_density(cluster: ClusterF, h: int, traces: Sequence[TraceBundle],
                           boundary: BoundaryGeom) -> np.ndarray:
    """g with dGamma_{F,h}[psi] = int g zeta.nu over the boundary."""
    _require_usable(cluster, traces)
    if not 1 <= h <= cluster.size:
        raise InvalidInputError(f"symmetric function order h={h} outside 1..{cluster.size}")
    factor = cluster.gamma ** (h - 1) * comb(cluster.size - 1, h - 1)
    return -factor * cluster_density_sum(traces, boundary)


def gamma_differential(cluster: ClusterF, h: int, psi: MapExpr, traces: Sequence[TraceBundle],
                       boundary: BoundaryGeom) -> float:
    g = shape_gradient_density(cluster, h, traces, boundary)
    return boundary.integrate(g * normal_component(psi, boundary))


def nagy_matrix(cluster: ClusterF, psi: MapExpr, traces: Sequence[TraceBundle],
                boundary: BoundaryGeom) -> np.ndarray:
    """(-int M[u_i, u_j] zeta.nu); its eigenvalues are the branch slopes."""
    _require_usable(cluster, traces)
    zn = normal_component(psi, boundary)
    m = cluster.size
    mat = np.zeros((m, m))
    for i in range(m):
        for j in range(i, m):
            dens = m_density(traces[i].problem, traces[i], traces[j], cluster.gamma, boundary)
            mat[i, j] = mat[j, i] = -dens.integrate(boundary, zn)
    return mat


def criticality_residual(cluster: ClusterF, traces: Sequence[TraceBundle],
                         boundary: BoundaryGeom) -> Tuple[float, float]:
    """Boundary mean of sum_l M[u_l, u_l] and its relative L2 deviation from that constant."""
    if len(traces) != cluster.size:
        raise InvalidInputError(f"{len(traces)} trace bundles for a cluster of size {cluster.size}")
    s = cluster_density_sum(traces, boundary)
    mean = boundary.integrate(s) / boundary.length
    dev = np.sqrt(boundary.integrate((s - mean) ** 2))
    size = np.sqrt(boundary.integrate(s ** 2))
    scale = max(abs(mean), size)
    rel = float(dev / scale) if scale > 0 else 0.0
    logger.debug(f"criticality residual for {cluster.labels}: C={mean:.6e}, rel={rel:.3e}")
    return float(mean), rel


def hadamard_simple_biharmonic(trace: TraceBundle, boundary: BoundaryGeom, psi: MapExpr) -> float:
    """Simple-eigenvalue derivative written with the full biharmonic boundary integrand."""
    if trace.kind not in UNIFIED_KINDS:
        raise InvalidInputError(f"biharmonic simple-eigenvalue formula does not apply to {trace.kind}")
    u = trace.u[:, 0]
    integrand = (np.einsum("ncij,ncij->n", trace.hess, trace.hess) - 2.0 * trace.d2u_dn2[:, 0] ** 2
                 + 2.0 * trace.du_dn[:, 0] * (trace.div_hess_nu[:, 0] + trace.dlap_dn[:, 0])
                 - trace.gamma * u ** 2)
    return boundary.integrate(integrand * normal_component(psi, boundary))


# ---------------------------------------------------------------------------
# Analytic checks
# ---------------------------------------------------------------------------
def scaling_law_slope(kind: str) -> float:
    """d gamma / d eps / gamma under phi = (1 + eps) x."""
    key = str(kind).strip().upper()
    match = re.fullmatch(r"P_?(\d)(\d)", key)
    if match:
        n, m = int(match.group(1)), int(match.group(2))
        if m >= n:
            raise InvalidInputError(f"P{n}{m}: the lower order m must be smaller than n")
        return -2.0 * (n - m)
    kind = ProblemSpec(kind=kind).kind
    if kind in ("N", "I"):
        return -4.0
    if kind == "L":
        return -2.0
    raise InvalidInputError("Reissner-Mindlin eigenvalues have no dilation scaling law (thickness t is fixed)")


def _component_rotation(problem: ProblemSpec, rot: np.ndarray) -> np.ndarray:
    if problem.kind == "L":
        return rot
    if problem.kind == "R":
        out = np.eye(3)
        out[:2, :2] = rot
        return out
    return np.eye(1)


def rotate_traces(trace: TraceBundle, boundary: BoundaryGeom, shift: int) -> TraceBundle:
    """
    Traces of the rotated eigenfunction Q u(R^T y), R the rotation by 2 pi shift / n,
    on a boundary whose sample grid is carried into itself by R.
    """
    n = boundary.n
    angle = 2.0 * np.pi * shift / n
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    moved = np.roll(boundary.points @ rot.T, shift, axis=0)
    if np.abs(moved - boundary.points).max() > 1e-10 * max(1.0, np.abs(boundary.points).max()):
        raise InvalidInputError("boundary samples are not equivariant under the requested rotation")

    Q = _component_rotation(trace.problem, rot)
    u = np.einsum("cd,nd->nc", Q, trace.u)
    grad = np.einsum("cd,ia,nda->nci", Q, rot, trace.grad)
    hess = np.einsum("cd,ia,jb,ndab->ncij", Q, rot, rot, trace.hess)
    third = np.einsum("cd,ia,jb,kg,ndabg->ncijk", Q, rot, rot, rot, trace.third)
    jets = [np.roll(j, shift, axis=0) for j in (u, grad, hess, third)]
    return _bundle_from_jets(trace.problem, trace.gamma, trace.source, jets, boundary)
