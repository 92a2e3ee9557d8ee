"""
One-parameter domain families phi_eps = phi + eps psi: eigenvalue branches
matched by eigenvector overlap, central differences, the branch-slope
comparison, crossing checks and a volume-constrained descent of the
symmetric functions.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment

from .assembly import ProblemSpec, assemble
from .config import get_settings
from .eigensolve import Spectrum, elementary_symmetric, find_cluster, solve_lowest
from .errors import DiscretizationError, InvalidInputError, UnusableClusterError
from .geometry import MapExpr, build_boundary, enclosed_area, harmonic_extension, identity
from .hadamard import (
    cluster_traces, criticality_residual, gamma_differential, nagy_matrix, shape_gradient_density,
)
from .mesh import RefMesh, build_disk_mesh, map_mesh

logger = logging.getLogger(__name__)

MATCH_QUALITY = 0.7
MAX_HALVINGS = 20
FLOW_TOL = 0.05
FLOW_COLUMNS = ["step", "gamma", "gamma_after", "volume", "residual", "velocity_norm", "eta", "rejected", "accepted"]


# ---------------------------------------------------------------------------
# Solving along a family
# ---------------------------------------------------------------------------
def solve_shape(problem: ProblemSpec, mapping: MapExpr, ref: RefMesh, count: int,
                tau: Optional[float] = None) -> Spectrum:
    mm = map_mesh(ref, mapping, problem.degree)
    _, pair = assemble(problem, mm)
    return solve_lowest(pair, count, tau=tau)


def match_spectra(sa: Spectrum, sb: Spectrum) -> Tuple[np.ndarray, float]:
    """
    Permutation ``perm`` with eigenvector a_i continued by b_perm[i], maximizing
    the summed squared B-overlaps; quality is the smallest captured fraction
    of a_i inside the eigenvalue cluster of its partner.
    """
    B = 0.5 * (sa.B + sb.B)
    overlap = sa.vectors.T @ (B @ sb.vectors)
    weight = overlap ** 2
    rows, cols = linear_sum_assignment(-weight)
    perm = np.empty(len(rows), dtype=int)
    perm[rows] = cols

    group = np.empty(len(sb), dtype=int)
    for g, c in enumerate(sb.clusters):
        group[list(c.indices)] = g
    capture = [np.sqrt(weight[i, group == group[perm[i]]].sum()) for i in range(len(perm))]
    return perm, float(min(capture))


@dataclass(frozen=True)
class EigenPath:
    eps:        np.ndarray           # ascending
    spectra:    List[Spectrum]
    assignment: np.ndarray           # (n_eps, count): sorted index of each branch
    branches:   np.ndarray           # (n_eps, count): branch values g_i(eps)
    quality:    np.ndarray           # (n_eps,) matching quality into each point
    flagged:    bool
    message:    str = ""

    def sorted_values(self) -> np.ndarray:
        return np.array([s.values for s in self.spectra])

    def gamma_series(self, labels: Sequence[int], h: int) -> np.ndarray:
        """Gamma_{F,h} along the grid from the sorted eigenvalues with 1-based labels F."""
        idx = [l - 1 for l in labels]
        return np.array([elementary_symmetric(s.values[idx])[h - 1] for s in self.spectra])

    def frame(self) -> pd.DataFrame:
        data = {"eps": self.eps, "quality": self.quality}
        for b in range(self.branches.shape[1]):
            data[f"branch_{b + 1}"] = self.branches[:, b]
        for j in range(self.branches.shape[1]):
            data[f"sorted_{j + 1}"] = self.sorted_values()[:, j]
        return pd.DataFrame(data)


def _chain_order(eps: np.ndarray) -> Tuple[int, List[Tuple[int, int]]]:
    """Reference point and (from, to) matching steps outward from it; eps = 0 is bypassed."""
    pos = [i for i in range(len(eps)) if eps[i] > 0]
    neg = [i for i in range(len(eps)) if eps[i] < 0][::-1]
    zero = [i for i in range(len(eps)) if eps[i] == 0]
    if pos:
        start = pos[0]
        steps = [(pos[k - 1], pos[k]) for k in range(1, len(pos))]
        if neg:
            steps.append((start, neg[0]))
            steps += [(neg[k - 1], neg[k]) for k in range(1, len(neg))]
        steps += [(start, z) for z in zero]
    elif neg:
        start = neg[0]
        steps = [(neg[k - 1], neg[k]) for k in range(1, len(neg))] + [(start, z) for z in zero]
    else:
        start, steps = zero[0], []
    return start, steps


def eigen_path(problem: ProblemSpec, psi: MapExpr, eps_grid: Sequence[float], count: int,
               base: Optional[MapExpr] = None, ref: Optional[RefMesh] = None,
               h: Optional[float] = None) -> EigenPath:
    """Lowest ``count`` eigenvalues of phi + eps psi over the grid, continued as branches."""
    eps = np.sort(np.asarray(eps_grid, dtype=float))
    if len(eps) == 0 or len(np.unique(eps)) != len(eps):
        raise InvalidInputError("eps grid must be non-empty without repeated points")
    base = base or identity()
    ref = ref or build_disk_mesh(h if h is not None else get_settings().selftest_h)

    with ThreadPoolExecutor(max_workers=get_settings().threads) as pool:
        spectra = list(pool.map(lambda e: solve_shape(problem, base + psi * float(e), ref, count), eps))

    start, steps = _chain_order(eps)
    assignment = np.zeros((len(eps), count), dtype=int)
    assignment[start] = np.arange(count)
    quality = np.ones(len(eps))
    for a, b in steps:
        perm, q = match_spectra(spectra[a], spectra[b])
        assignment[b] = perm[assignment[a]]
        quality[b] = q
    branches = np.array([spectra[k].values[assignment[k]] for k in range(len(eps))])

    flagged = bool(quality.min() < MATCH_QUALITY)
    message = ""
    if flagged:
        k = int(np.argmin(quality))
        message = f"ambiguous branch overlap {quality[k]:.3f} at eps={eps[k]:.3e}; refine the eps grid"
        logger.warning(message)
    logger.info(f"Eigen path over {len(eps)} points, min matching quality {quality.min():.3f}")
    return EigenPath(eps, spectra, assignment, branches, quality, flagged, message)


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------
def _symmetric_pair(eps: np.ndarray, e0: float) -> Tuple[int, int]:
    tol = 1e-9 * max(abs(e0), 1e-300)
    plus = np.nonzero(np.abs(eps - e0) <= tol)[0]
    minus = np.nonzero(np.abs(eps + e0) <= tol)[0]
    if len(plus) == 0 or len(minus) == 0:
        raise InvalidInputError(f"eps grid lacks the symmetric pair +-{e0:.3e}")
    return int(minus[0]), int(plus[0])


def fd_derivative(eps, values=None, eps0: Optional[float] = None, richardson: bool = False,
                  eps1: Optional[float] = None) -> np.ndarray:
    """
    Central difference at 0 from a series over a symmetric grid; with
    ``richardson`` two step sizes are combined to cancel the eps^2 term.
    An ``EigenPath`` may be passed in place of (eps, values).
    """
    if isinstance(eps, EigenPath):
        eps, values = eps.eps, (eps.branches if values is None else values)
    eps = np.asarray(eps, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(values) != len(eps):
        raise InvalidInputError(f"{len(values)} values for {len(eps)} grid points")
    positive = np.sort(eps[eps > 0])
    if eps0 is None:
        if len(positive) == 0:
            raise InvalidInputError("eps grid has no positive point")
        eps0 = float(positive[-1] if richardson else positive[0])

    def central(e):
        lo, hi = _symmetric_pair(eps, e)
        return (values[hi] - values[lo]) / (2.0 * e)

    d0 = central(eps0)
    if not richardson:
        return d0
    if eps1 is None:
        smaller = positive[positive < eps0 * (1 - 1e-9)]
        if len(smaller) == 0:
            raise InvalidInputError("Richardson extrapolation needs a second, smaller symmetric step")
        eps1 = float(smaller[-1])
    r2 = (eps0 / eps1) ** 2
    return (r2 * central(eps1) - d0) / (r2 - 1.0)


def symmetric_grid(eps0: float, richardson: bool = False, eps1: Optional[float] = None) -> List[float]:
    steps = [eps0] + ([eps1 if eps1 is not None else 0.5 * eps0] if richardson else [])
    return sorted([-e for e in steps] + steps)


# ---------------------------------------------------------------------------
# Branch slopes vs the boundary-integral matrix
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class NagyCheck:
    labels:     List[int]
    gamma:      float
    matrix:     np.ndarray
    predicted:  np.ndarray
    fd:         np.ndarray
    max_rel_dev: float
    tolerance:  float
    status:     str            # pass / fail / inconclusive
    message:    str = ""


def nagy_check(problem: ProblemSpec, psi: MapExpr, labels: Sequence[int], base: Optional[MapExpr] = None,
               h: Optional[float] = None, eps0: float = 1e-3, tolerance: float = 0.05,
               richardson: bool = False, ref: Optional[RefMesh] = None) -> NagyCheck:
    """Sorted eigenvalues of the slope matrix against sorted FD branch slopes."""
    labels = sorted(int(l) for l in labels)
    base = base or identity()
    ref = ref or build_disk_mesh(h if h is not None else get_settings().selftest_h)
    count = labels[-1] + 1

    spectrum = solve_shape(problem, base, ref, count)
    cluster = find_cluster(spectrum, labels)
    if not cluster.usable:
        logger.warning(f"cluster {labels} unusable: {cluster.reason}")
        empty = np.zeros(0)
        return NagyCheck(labels, cluster.gamma, np.zeros((0, 0)), empty, empty, float("nan"),
                         tolerance, "inconclusive", cluster.reason)

    traces, boundary = cluster_traces(spectrum, cluster)
    matrix = nagy_matrix(cluster, psi, traces, boundary)
    predicted = np.sort(np.linalg.eigvalsh(matrix))

    path = eigen_path(problem, psi, symmetric_grid(eps0, richardson), count, base=base, ref=ref)
    slopes = fd_derivative(path, eps0=eps0, richardson=richardson)
    start, _ = _chain_order(path.eps)
    members = [b for b in range(count) if path.assignment[start, b] in cluster.indices]
    fd = np.sort(slopes[members])

    floor = 1e-3 * abs(cluster.gamma)
    dev = float(np.max(np.abs(predicted - fd) / np.maximum(np.abs(fd), floor)))
    if path.flagged:
        status, message = "inconclusive", path.message
    else:
        status, message = ("pass" if dev <= tolerance else "fail"), ""
    logger.info(f"Nagy check {problem.kind} {labels}: predicted {predicted.tolist()}, fd {fd.tolist()}, {status}")
    return NagyCheck(labels, cluster.gamma, matrix, predicted, fd, dev, tolerance, status, message)


@dataclass(frozen=True)
class DGammaCheck:
    labels:     List[int]
    order:      int
    gamma:      float
    value:      float             # Gamma_{F,h} at the base shape
    formula:    float
    fd:         float
    rel_dev:    float
    tolerance:  float
    status:     str
    nagy:       Optional[NagyCheck] = None
    message:    str = ""


def dgamma_comparison(problem: ProblemSpec, psi: MapExpr, labels: Sequence[int], order: int = 1,
                      base: Optional[MapExpr] = None, h: Optional[float] = None, eps0: float = 1e-3,
                      richardson: bool = False, tolerance: Optional[float] = None,
                      ref: Optional[RefMesh] = None, count: Optional[int] = None) -> DGammaCheck:
    """
    Boundary-integral differential of Gamma_{F,h} against the central difference
    of the same symmetric function, with the branch-slope matrix alongside.
    """
    labels = sorted(int(l) for l in labels)
    base = base or identity()
    ref = ref or build_disk_mesh(h if h is not None else get_settings().selftest_h)
    tolerance = (0.10 if problem.kind == "I" else 0.02) if tolerance is None else tolerance
    count = max(labels[-1] + 1, count or 0)

    spectrum = solve_shape(problem, base, ref, count)
    cluster = find_cluster(spectrum, labels)
    value = _gamma_value(spectrum, labels, order)
    if not cluster.usable:
        logger.warning(f"cluster {labels} unusable: {cluster.reason}")
        return DGammaCheck(labels, order, cluster.gamma, value, float("nan"), float("nan"), float("nan"),
                           tolerance, "inconclusive", None, cluster.reason)

    traces, boundary = cluster_traces(spectrum, cluster)
    formula = gamma_differential(cluster, order, psi, traces, boundary)
    path = eigen_path(problem, psi, symmetric_grid(eps0, richardson), count, base=base, ref=ref)
    fd = float(fd_derivative(path.eps, path.gamma_series(labels, order), eps0=eps0, richardson=richardson))

    floor = 1e-3 * abs(value)
    rel = abs(formula - fd) / max(abs(fd), floor)
    ok = abs(formula - fd) <= tolerance * abs(fd) or max(abs(formula), abs(fd)) <= floor

    matrix = nagy_matrix(cluster, psi, traces, boundary)
    predicted = np.sort(np.linalg.eigvalsh(matrix))
    slopes = fd_derivative(path, eps0=eps0, richardson=richardson)
    start, _ = _chain_order(path.eps)
    branch_fd = np.sort(slopes[[b for b in range(count) if path.assignment[start, b] in cluster.indices]])
    g_floor = 1e-3 * abs(cluster.gamma)
    n_dev = float(np.max(np.abs(predicted - branch_fd) / np.maximum(np.abs(branch_fd), g_floor)))
    n_ok = bool(np.all(np.abs(predicted - branch_fd) <= np.maximum(tolerance * np.abs(branch_fd), g_floor)))
    n_status = "inconclusive" if path.flagged else ("pass" if n_ok else "fail")
    nagy = NagyCheck(labels, cluster.gamma, matrix, predicted, branch_fd, n_dev, tolerance, n_status, path.message)

    status = "inconclusive" if path.flagged else ("pass" if ok else "fail")
    logger.info(f"dGamma {problem.kind} F={labels} h={order}: formula {formula:.6e}, fd {fd:.6e}, {status}")
    return DGammaCheck(labels, order, cluster.gamma, value, float(formula), fd, float(rel), tolerance,
                       status, nagy, path.message)


# ---------------------------------------------------------------------------
# Crossings
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class CrossingReport:
    location:      Optional[float]
    gamma_left:    float
    gamma_right:   float
    sorted_left:   float
    sorted_right:  float
    gamma_jump:    float          # relative left/right mismatch of Gamma_{F,1}
    sorted_jump:   float          # absolute left/right mismatch of the lower sorted eigenvalue
    status:        str
    message:       str = ""


def _one_sided(f0, f1, f2, delta, side):
    """Second-order one-sided slope from f(x), f(x + side d), f(x + 2 side d)."""
    return side * (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * delta)


def _crossing_verdict(location, pair_values, delta, tolerance) -> CrossingReport:
    """``pair_values`` maps offsets -2..2 (units of delta) to the two sorted values of the pair."""
    gam = {k: float(np.sum(v)) for k, v in pair_values.items()}
    low = {k: float(np.min(v)) for k, v in pair_values.items()}
    gl = _one_sided(gam[0], gam[-1], gam[-2], delta, -1)
    gr = _one_sided(gam[0], gam[1], gam[2], delta, 1)
    sl = _one_sided(low[0], low[-1], low[-2], delta, -1)
    sr = _one_sided(low[0], low[1], low[2], delta, 1)
    gamma_abs = abs(gl - gr)
    gamma_rel = gamma_abs / max(abs(gl), abs(gr), 1e-12)
    sorted_abs = abs(sl - sr)
    ok = gamma_rel <= tolerance and sorted_abs >= 10.0 * gamma_abs
    return CrossingReport(location, gl, gr, sl, sr, gamma_rel, sorted_abs, "pass" if ok else "fail")


def toy_crossing_probe(delta: float = 1e-4, tolerance: float = 0.01) -> CrossingReport:
    """Symmetric 2x2 family [[1 + 2e, e], [e, 1 - e]] whose eigenvalues cross at e = 0."""
    def values(e):
        return np.linalg.eigvalsh(np.array([[1.0 + 2.0 * e, e], [e, 1.0 - e]]))
    pair = {k: values(k * delta) for k in range(-2, 3)}
    return _crossing_verdict(0.0, pair, delta, tolerance)


def crossing_probe(problem: ProblemSpec, psi: MapExpr, labels: Sequence[int] = (2, 3),
                   window: Tuple[float, float] = (-0.01, 0.015), scan_points: int = 5,
                   base: Optional[MapExpr] = None, h: Optional[float] = None, delta: float = 1e-3,
                   tolerance: float = 0.01, ref: Optional[RefMesh] = None) -> CrossingReport:
    """
    Locate a crossing of the two tracked branches through the sorted pair
    ``labels`` inside ``window`` by scanning and bisection, then compare
    one-sided slopes of Gamma_{F,1} and of the lower sorted eigenvalue.
    """
    labels = sorted(int(l) for l in labels)
    if len(labels) != 2:
        raise InvalidInputError("a crossing check follows exactly two eigenvalues")
    base = base or identity()
    ref = ref or build_disk_mesh(h if h is not None else get_settings().selftest_h)
    count = labels[-1] + 1
    idx = [l - 1 for l in labels]

    grid = np.linspace(window[0], window[1], scan_points)
    path = eigen_path(problem, psi, grid, count, base=base, ref=ref)
    start, _ = _chain_order(path.eps)
    pair_branches = [b for b in range(count) if path.assignment[start, b] in idx]
    diff = path.branches[:, pair_branches[0]] - path.branches[:, pair_branches[1]]
    sign_change = np.nonzero(np.sign(diff[:-1]) != np.sign(diff[1:]))[0]
    if len(sign_change) == 0:
        message = f"no crossing of eigenvalues {labels} in window {window}"
        logger.warning(message)
        return CrossingReport(None, np.nan, np.nan, np.nan, np.nan, np.nan, np.nan, "inconclusive", message)

    k = int(sign_change[0])
    anchor = path.spectra[k]
    anchor_branch = [path.assignment[k, b] for b in pair_branches]

    def tracked(e):
        s = solve_shape(problem, base + psi * float(e), ref, count)
        perm, _ = match_spectra(anchor, s)
        return s.values[perm[anchor_branch[0]]] - s.values[perm[anchor_branch[1]]]

    lo, hi, d_lo = path.eps[k], path.eps[k + 1], diff[k]
    for _ in range(60):
        if hi - lo <= 1e-6 * (window[1] - window[0]):
            break
        mid = 0.5 * (lo + hi)
        d_mid = tracked(mid)
        if np.sign(d_mid) == np.sign(d_lo):
            lo, d_lo = mid, d_mid
        else:
            hi = mid
    location = 0.5 * (lo + hi)

    offsets = list(range(-2, 3))
    with ThreadPoolExecutor(max_workers=get_settings().threads) as pool:
        spectra = list(pool.map(lambda o: solve_shape(problem, base + psi * float(location + o * delta), ref, count), offsets))
    pair = {o: s.values[idx] for o, s in zip(offsets, spectra)}
    report = _crossing_verdict(location, pair, delta, tolerance)
    logger.info(f"Crossing of {labels} at eps={location:.3e}: Gamma jump {report.gamma_jump:.2e}, "
                f"sorted jump {report.sorted_jump:.3e}, {report.status}")
    return report


# ---------------------------------------------------------------------------
# Volume-constrained flow
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class FlowState:
    """
    Flow position plus its record. ``history`` has one row per attempted step:
    Gamma before the step, Gamma and volume of the shape the step ends on, and
    how many trial shapes were rejected on the way. ``trials`` keeps every
    trial (accepted or not) with its Gamma, NaN when the shape was invalid.
    """
    map:            MapExpr
    step:           int
    initial_volume: float
    history:        Tuple[dict, ...] = field(default_factory=tuple)
    trials:         Tuple[dict, ...] = field(default_factory=tuple)
    status:         str = "running"     # running / stationary / stalled

    @property
    def gamma_history(self) -> List[float]:
        """Gamma along the visited shapes, the final one included."""
        if not self.history:
            return []
        out = [row["gamma"] for row in self.history]
        if self.history[-1]["accepted"]:
            out.append(self.history[-1]["gamma_after"])
        return out

    @property
    def volume_history(self) -> List[float]:
        return [row["volume"] for row in self.history]

    @property
    def residual_history(self) -> List[float]:
        return [row["residual"] for row in self.history]

    @property
    def rejected(self) -> int:
        return sum(row["rejected"] for row in self.history)


def shape_volume(mapping: MapExpr) -> float:
    return enclosed_area(build_boundary(mapping, get_settings().boundary_samples))


def start_flow(mapping: MapExpr) -> FlowState:
    return FlowState(map=mapping, step=0, initial_volume=shape_volume(mapping))


def _gamma_value(spectrum: Spectrum, labels: Sequence[int], h: int) -> float:
    return elementary_symmetric(spectrum.values[[l - 1 for l in labels]])[h - 1]


def _try_shape(problem, mapping, ref, labels, h) -> Optional[float]:
    try:
        build_boundary(mapping, get_settings().boundary_samples)
        spectrum = solve_shape(problem, mapping, ref, max(labels) + 1)
    except (DiscretizationError, InvalidInputError) as e:
        logger.debug(f"trial shape rejected: {e}")
        return None
    return _gamma_value(spectrum, labels, h)


def constrained_gradient_step(state: FlowState, problem: ProblemSpec, labels: Sequence[int], h: int,
                              eta: float, ref: RefMesh, tol: float = FLOW_TOL) -> FlowState:
    """
    One descent step of Gamma_{F,h} along the volume-projected normal velocity
    v = -(g - mean g); ``eta`` is the largest boundary displacement tried.
    The boundary velocity is carried into the domain by its harmonic
    extension (first 16 modes at most), not by a cutoff chi(r) near the
    boundary, and the moved shape is rescaled back to the initial volume.
    """
    if eta == 0 or state.status != "running":
        return state
    labels = sorted(int(l) for l in labels)
    spectrum = solve_shape(problem, state.map, ref, labels[-1] + 1)
    cluster = find_cluster(spectrum, labels)
    if not cluster.usable:
        raise UnusableClusterError(f"flow needs a usable cluster, {labels}: {cluster.reason}")

    traces, boundary = cluster_traces(spectrum, cluster)
    g = shape_gradient_density(cluster, h, traces, boundary)
    g_mean = boundary.integrate(g) / boundary.length
    v = -(g - g_mean)
    v_norm = np.sqrt(boundary.integrate(v ** 2))
    g_norm = np.sqrt(boundary.integrate(g ** 2))
    _, residual = criticality_residual(cluster, traces, boundary)
    gamma_now = _gamma_value(spectrum, labels, h)

    row = {"step": state.step, "gamma": gamma_now, "gamma_after": gamma_now, "volume": shape_volume(state.map),
           "residual": residual, "velocity_norm": float(v_norm), "eta": 0.0, "rejected": 0, "accepted": False}
    if v_norm <= tol * g_norm:
        logger.info(f"Flow stationary at step {state.step}: |v| = {v_norm:.3e} <= {tol} |g|")
        return replace(state, history=state.history + (row,), status="stationary")

    modes = min(16, boundary.n // 4)
    direction = (v / np.abs(v).max())[:, None] * boundary.normal
    trials = []
    trial_eta = eta
    for _ in range(MAX_HALVINGS + 1):
        moved = state.map + harmonic_extension(trial_eta * direction, modes)
        try:
            scale = np.sqrt(state.initial_volume / shape_volume(moved))
        except InvalidInputError:
            trials.append({"step": state.step, "eta": trial_eta, "gamma": float("nan"), "accepted": False})
            trial_eta *= 0.5
            continue
        candidate = moved * float(scale)
        gamma_new = _try_shape(problem, candidate, ref, labels, h)
        accepted = gamma_new is not None and gamma_new < gamma_now
        trials.append({"step": state.step, "eta": trial_eta,
                       "gamma": float("nan") if gamma_new is None else gamma_new, "accepted": accepted})
        if accepted:
            row.update(gamma_after=gamma_new, volume=shape_volume(candidate), eta=trial_eta,
                       rejected=len(trials) - 1, accepted=True)
            logger.info(f"Flow step {state.step}: Gamma {gamma_now:.8f} -> {gamma_new:.8f} "
                        f"(eta={trial_eta:.3e}, {len(trials) - 1} rejected)")
            return FlowState(candidate, state.step + 1, state.initial_volume, state.history + (row,),
                             state.trials + tuple(trials), "running")
        trial_eta *= 0.5

    row["rejected"] = len(trials)
    logger.warning(f"Flow step {state.step}: no decrease after {MAX_HALVINGS} halvings, stopping")
    return replace(state, history=state.history + (row,), trials=state.trials + tuple(trials), status="stalled")


def run_flow(mapping: MapExpr, problem: ProblemSpec, labels: Sequence[int], h: int, steps: int,
             eta: float, ref: RefMesh, tol: float = FLOW_TOL) -> FlowState:
    state = start_flow(mapping)
    for _ in range(steps):
        state = constrained_gradient_step(state, problem, labels, h, eta, ref, tol)
        if state.status != "running":
            break
    return state


def flow_monotone_verdict(state: FlowState, rtol: float = 1e-9) -> Tuple[str, str]:
    """
    Gamma read along the flow: each step's fresh solve, then the accepted trial.
    A re-solve that sits above the value it was accepted at, or an accepted
    trial that does not decrease, fails; a stall after all halvings is inconclusive.
    """
    seq = []
    for row in state.history:
        seq.append(row["gamma"])
        if row["accepted"]:
            seq.append(row["gamma_after"])
    seq = np.array(seq)
    rises = np.diff(seq) > rtol * np.abs(seq[:-1]) if len(seq) > 1 else np.array([], dtype=bool)
    detail = f"{state.step} accepted steps, {state.rejected} rejected trials, status {state.status}"
    if rises.any():
        return "fail", detail + f", Gamma rises at {int(np.argmax(rises))}"
    if state.status == "stalled":
        return "inconclusive", detail
    return "pass", detail


def flow_frame(state: FlowState) -> pd.DataFrame:
    return pd.DataFrame(list(state.history), columns=FLOW_COLUMNS)


def trial_frame(state: FlowState) -> pd.DataFrame:
    return pd.DataFrame(list(state.trials), columns=["step", "eta", "gamma", "accepted"])
