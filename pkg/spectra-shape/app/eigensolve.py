import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla
from scipy.sparse.linalg import ArpackNoConvergence, eigsh, splu
from scipy.sparse.linalg import norm as spnorm

from .assembly import FESpace, FormPair, ProblemSpec
from .config import get_settings
from .errors import InvalidInputError, SolverError

logger = logging.getLogger(__name__)

# bound on the scaled backward error, see backward_errors
RESIDUAL_TOL = 1e-10
REFINE_PASSES = 2
ORTHO_TOL = 1e-8


@dataclass(frozen=True)
class ClusterF:
    indices: Tuple[int, ...]      # 0-based, contiguous
    values:  Tuple[float, ...]
    gamma:   float                # common value (mean)
    spread:  float
    gap:     float                # distance to the nearest eigenvalue outside
    usable:  bool
    reason:  str = ""

    @property
    def size(self) -> int:
        return len(self.indices)

    @property
    def labels(self) -> List[int]:
        return [i + 1 for i in self.indices]


@dataclass(frozen=True)
class Spectrum:
    values:    np.ndarray         # ascending
    vectors:   np.ndarray         # (n_dofs, k), B-orthonormal, zero on constrained dofs
    pair:      FormPair
    residuals: np.ndarray
    clusters:  List[ClusterF]

    @property
    def space(self) -> FESpace:
        return self.pair.space

    @property
    def problem(self) -> ProblemSpec:
        return self.pair.space.problem

    @property
    def B(self):
        return self.pair.B

    def __len__(self) -> int:
        return len(self.values)


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------
def _rayleigh_ritz(A, B, Q):
    Ar = Q.T @ (A @ Q)
    Br = Q.T @ (B @ Q)
    w, y = sla.eigh(0.5 * (Ar + Ar.T), 0.5 * (Br + Br.T))
    return w, Q @ y


def backward_errors(A, B, vals: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    """||A u - gamma B u|| / ((||A||_1 + |gamma| ||B||_1) ||u||) per column."""
    norm_a, norm_b = spnorm(A, 1), spnorm(B, 1)
    res = np.linalg.norm(A @ vecs - (B @ vecs) * vals, axis=0)
    scale = (norm_a + np.abs(vals) * norm_b) * np.linalg.norm(vecs, axis=0)
    return res / scale


def _refine(A, B, vecs: np.ndarray, shift: float):
    """One block inverse iteration with (A - shift B) followed by Rayleigh-Ritz."""
    try:
        lu = splu((A - shift * B).tocsc())
    except RuntimeError as e:
        raise SolverError(f"refinement factorization breakdown at shift {shift}: {e}")
    block = lu.solve(np.asarray(B @ vecs))
    block, _ = np.linalg.qr(block)
    return _rayleigh_ritz(A, B, block)


def solve_lowest(pair: FormPair, count: int, tau: Optional[float] = None, shift: Optional[float] = None,
                 dense_limit: Optional[int] = None, seed: Optional[int] = None) -> Spectrum:
    """Lowest ``count`` eigenpairs of A u = gamma B u on the free dofs."""
    settings = get_settings()
    tau = settings.cluster_tol if tau is None else tau
    shift = settings.eig_shift if shift is None else shift
    dense_limit = settings.dense_limit if dense_limit is None else dense_limit
    seed = settings.seed if seed is None else seed

    A, B = pair.restricted()
    nf = A.shape[0]
    if not 1 <= count <= nf:
        raise InvalidInputError(f"requested {count} eigenvalues from {nf} free dofs")

    if nf <= dense_limit:
        try:
            vals, vecs = sla.eigh(A.toarray(), B.toarray(), subset_by_index=[0, count - 1])
        except sla.LinAlgError as e:
            raise SolverError(f"dense factorization breakdown: {e}")
    else:
        v0 = np.random.default_rng(seed).standard_normal(nf)
        try:
            vals, vecs = eigsh(A.tocsc(), k=count, M=B.tocsc(), sigma=shift, which="LM", v0=v0, tol=0)
        except ArpackNoConvergence as e:
            res = backward_errors(A, B, e.eigenvalues, e.eigenvectors).tolist()
            raise SolverError(f"Lanczos did not converge ({len(res)} of {count} pairs)", residuals=res)
        except RuntimeError as e:
            raise SolverError(f"shift-invert factorization breakdown at shift {shift}: {e}")
        vals, vecs = _rayleigh_ritz(A, B, vecs)

    residuals = backward_errors(A, B, vals, vecs)
    for _ in range(REFINE_PASSES):
        if residuals.max() <= RESIDUAL_TOL:
            break
        logger.info(f"Refining {count} pairs, backward error {residuals.max():.2e}")
        vals, vecs = _refine(A, B, vecs, shift)
        residuals = backward_errors(A, B, vals, vecs)

    order = np.argsort(vals, kind="stable")
    vals, vecs, residuals = vals[order], vecs[:, order], residuals[order]
    vecs = vecs / np.sqrt(np.einsum("ik,ik->k", vecs, B @ vecs))
    lead = np.argmax(np.abs(vecs), axis=0)
    vecs = vecs * np.sign(vecs[lead, np.arange(count)])

    bad = residuals > RESIDUAL_TOL
    if bad.any():
        raise SolverError(f"eigenpair backward errors above tolerance: {residuals[bad].tolist()}",
                          residuals=residuals.tolist())
    BV = B @ vecs
    ortho = np.abs(vecs.T @ BV - np.eye(count)).max()
    if ortho > ORTHO_TOL:
        raise SolverError(f"eigenvectors lost B-orthonormality ({ortho:.2e})")
    if vals.min() < -1e-9 * max(1.0, np.abs(vals).max()):
        logger.warning(f"negative eigenvalue {vals.min():.3e} for a nonnegative quotient")

    full = np.zeros((pair.space.n_dofs, count))
    full[pair.space.free] = vecs
    clusters = detect_clusters(vals, tau)
    logger.info(f"Solved {pair.space.problem.kind}: lowest {count} eigenvalues {np.round(vals, 6).tolist()}")
    return Spectrum(values=vals, vectors=full, pair=pair, residuals=residuals, clusters=clusters)


# ---------------------------------------------------------------------------
# Clusters and symmetric functions
# ---------------------------------------------------------------------------
def _values_of(spectrum) -> np.ndarray:
    return spectrum.values if isinstance(spectrum, Spectrum) else np.asarray(spectrum, dtype=float)


def _floor(vals: np.ndarray) -> float:
    return 1e-8 * max(1.0, float(np.abs(vals).max()))


def cluster_from_indices(spectrum, indices: Sequence[int], tau: Optional[float] = None) -> ClusterF:
    """Cluster record for a contiguous index set, with its outer gap and usability flag."""
    vals = _values_of(spectrum)
    tau = get_settings().cluster_tol if tau is None else tau
    idx = tuple(int(i) for i in indices)
    if not idx or list(idx) != list(range(idx[0], idx[-1] + 1)) or idx[0] < 0 or idx[-1] >= len(vals):
        raise InvalidInputError(f"cluster indices {list(idx)} are not a contiguous range of computed eigenvalues")
    sub = vals[list(idx)]
    gamma = float(sub.mean())
    floor = _floor(vals)
    lower = vals[idx[0]] - vals[idx[0] - 1] if idx[0] > 0 else np.inf
    if idx[-1] + 1 >= len(vals):
        gap, usable, reason = float(lower), False, "no computed eigenvalue above the cluster"
    else:
        gap = float(min(lower, vals[idx[-1] + 1] - vals[idx[-1]]))
        usable = gap > 3.0 * tau * abs(gamma) + floor
        reason = "" if usable else f"outer gap {gap:.3e} not above 3 tau gamma_F = {3 * tau * abs(gamma):.3e}"
    return ClusterF(idx, tuple(float(v) for v in sub), gamma, float(sub.max() - sub.min()), gap, bool(usable), reason)


def detect_clusters(spectrum, tau: Optional[float] = None) -> List[ClusterF]:
    """Maximal groups of consecutive eigenvalues with relative gap below tau."""
    vals = _values_of(spectrum)
    tau = get_settings().cluster_tol if tau is None else tau
    floor = _floor(vals)
    groups = [[0]]
    for j in range(1, len(vals)):
        if vals[j] - vals[j - 1] <= tau * max(abs(vals[j]), abs(vals[j - 1])) + floor:
            groups[-1].append(j)
        else:
            groups.append([j])
    clusters = [cluster_from_indices(vals, g, tau) for g in groups]
    for c in clusters:
        if not c.usable:
            logger.debug(f"cluster {c.labels} flagged: {c.reason}")
    return clusters


def find_cluster(spectrum: Spectrum, labels: Sequence[int]) -> ClusterF:
    """Detected cluster with the given 1-based labels, or a flagged record if F is not a whole cluster."""
    idx = tuple(int(l) - 1 for l in labels)
    for c in spectrum.clusters:
        if c.indices == idx:
            return c
    partial = cluster_from_indices(spectrum, idx)
    return ClusterF(partial.indices, partial.values, partial.gamma, partial.spread, partial.gap,
                    False, "index set is not a whole eigenvalue cluster")


def elementary_symmetric(values: Sequence[float]) -> List[float]:
    """Coefficients of prod (1 + gamma_j x): [Gamma_1, ..., Gamma_m]."""
    coef = np.zeros(len(values) + 1)
    coef[0] = 1.0
    for g in values:
        coef[1:] = coef[1:] + g * coef[:-1]
    return coef[1:].tolist()


def symmetric_functions(cluster: ClusterF, spectrum: Optional[Spectrum] = None) -> List[float]:
    values = cluster.values if spectrum is None else [spectrum.values[i] for i in cluster.indices]
    return elementary_symmetric(values)


def kernel_indices(spectrum, tol: float = 1e-6) -> List[int]:
    vals = _values_of(spectrum)
    scale = max(1.0, float(np.abs(vals).max()))
    return [int(j) for j in np.nonzero(np.abs(vals) <= tol * scale)[0]]
