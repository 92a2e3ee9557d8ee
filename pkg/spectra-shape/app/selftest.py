"""
Acceptance suite behind ``selftest``: oracle spectra, boundary formula vs
finite differences, scaling laws, the unified biharmonic density, branch
slopes, ball criticality, crossings, the constrained flow and determinism.
"""
import hashlib
import logging
import time
from typing import Callable, Dict, List, Optional

import numpy as np

from .assembly import ProblemSpec, assemble, check_penalty_stability
from .config import get_settings
from .eigensolve import ClusterF, Spectrum, cluster_from_indices, find_cluster, kernel_indices
from .errors import ShapeLabError, UnusableClusterError
from .geometry import build_boundary, dilation, ellipse, fourier_bump, identity, translation
from .hadamard import (
    cluster_traces, criticality_residual, gamma_differential, m_density, m_density_unified_biharmonic,
    nagy_matrix, oracle_traces, scaling_law_slope,
)
from .main import cmd_eig, render_report
from .mesh import build_disk_mesh, map_mesh
from .perturb import (
    crossing_probe, dgamma_comparison, flow_monotone_verdict, nagy_check, run_flow, solve_shape,
    toy_crossing_probe,
)
from .schemas import CheckResult, RunConfig
from .special import disk_eigenpairs

logger = logging.getLogger(__name__)

MATRIX_KINDS = ("P10", "P20", "P21", "N", "I", "L")
FIELDS = {"dilation": dilation(1.0), "translation": translation((1.0, 0.0)), "bump": fourier_bump(2)}
SPECTRUM_COUNT = 8
FLOW_H = 0.1


def _verdict(ok: bool) -> str:
    return "pass" if ok else "fail"


class SelftestContext:
    """Shared disk meshes and base spectra for the checks."""

    def __init__(self, h: float):
        self.h = h
        self.ref = build_disk_mesh(h)
        self._spectra: Dict[str, Spectrum] = {}

    def spectrum(self, kind: str) -> Spectrum:
        if kind not in self._spectra:
            self._spectra[kind] = solve_shape(ProblemSpec(kind=kind), identity(), self.ref, SPECTRUM_COUNT)
        return self._spectra[kind]

    def clusters(self, kind: str) -> Dict[str, ClusterF]:
        """First usable simple and double clusters away from the kernel."""
        spectrum = self.spectrum(kind)
        kernel = set(kernel_indices(spectrum))
        found: Dict[str, ClusterF] = {}
        for c in spectrum.clusters:
            if not c.usable or kernel.intersection(c.indices):
                continue
            key = {1: "simple", 2: "double"}.get(c.size)
            if key and key not in found:
                found[key] = c
        return found


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------
def check_ipg_stability(ctx: SelftestContext) -> List[CheckResult]:
    problem = ProblemSpec(kind="P20")
    mm = map_mesh(ctx.ref, identity(), problem.degree)
    _, pair = assemble(problem, mm)
    worst = check_penalty_stability(pair, get_settings().seed, trials=16)
    return [CheckResult(name="ipg_stability", verdict="pass", value=worst, reference=0.0,
                        detail="smallest Rayleigh quotient over random vectors")]


def check_disk_oracle(ctx: SelftestContext) -> List[CheckResult]:
    out = []
    for kind, count, tol in (("P10", 4, 0.005), ("P20", 1, 0.01)):
        exact = [p.gamma for p in disk_eigenpairs(kind, count)]
        got = ctx.spectrum(kind).values
        for j in range(count):
            rel = abs(got[j] - exact[j]) / exact[j]
            out.append(CheckResult(name=f"oracle_{kind}_{j + 1}", verdict=_verdict(rel <= tol), value=float(got[j]),
                                   reference=float(exact[j]), tolerance=tol))
    return out


def check_hadamard_matrix(ctx: SelftestContext) -> List[CheckResult]:
    out = []
    for kind in MATRIX_KINDS:
        problem = ProblemSpec(kind=kind)
        for label, cluster in ctx.clusters(kind).items():
            orders = sorted({1, cluster.size})
            for name, psi in FIELDS.items():
                for order in orders:
                    res = dgamma_comparison(problem, psi, cluster.labels, order, ref=ctx.ref,
                                            count=SPECTRUM_COUNT)
                    out.append(CheckResult(
                        name=f"dgamma_{kind}_{name}_{label}_h{order}", verdict=res.status,
                        value=res.formula, reference=res.fd, tolerance=res.tolerance, detail=res.message,
                    ))
                    if name == "dilation" and order == 1 and label == "simple":
                        slope = scaling_law_slope(kind)
                        rel = abs(res.fd / res.gamma - slope) / abs(slope)
                        out.append(CheckResult(name=f"scaling_{kind}", verdict=_verdict(rel <= 0.02),
                                               value=res.fd / res.gamma, reference=slope, tolerance=0.02))
    return out


def check_unified_density(ctx: SelftestContext) -> List[CheckResult]:
    boundary = build_boundary(identity(), 256)
    pair = disk_eigenpairs("P20", 1)[0]
    tr = oracle_traces([pair], boundary)[0]
    spec = m_density(tr.problem, tr, tr, tr.gamma, boundary).values
    uni = m_density_unified_biharmonic(tr, tr, tr.gamma).values
    dev = float(np.abs(uni - spec).max() / np.abs(spec).max())
    out = [CheckResult(name="unified_P20_oracle", verdict=_verdict(dev <= 1e-9), value=dev, tolerance=1e-9)]

    for kind, tol in (("N", 0.05), ("I", 0.10)):
        clusters = ctx.clusters(kind)
        cluster = clusters.get("simple") or clusters.get("double")
        traces, bnd = cluster_traces(ctx.spectrum(kind), cluster)
        a = sum(m_density(t.problem, t, t, t.gamma, bnd).values for t in traces)
        b = sum(m_density_unified_biharmonic(t, t, t.gamma).values for t in traces)
        rel = float(np.sqrt(bnd.integrate((a - b) ** 2) / bnd.integrate(a ** 2)))
        out.append(CheckResult(name=f"unified_{kind}_fe", verdict=_verdict(rel <= tol), value=rel, tolerance=tol))
    return out


def check_nagy(ctx: SelftestContext) -> List[CheckResult]:
    problem = ProblemSpec(kind="P10")
    res = nagy_check(problem, fourier_bump(2), [2, 3], ref=ctx.ref, tolerance=0.05)
    out = [CheckResult(name="nagy_P10_bump", verdict=res.status, value=res.max_rel_dev, tolerance=0.05,
                       detail=f"predicted {np.round(res.predicted, 6).tolist()}, fd {np.round(res.fd, 6).tolist()}")]

    spectrum = ctx.spectrum("P10")
    cluster = find_cluster(spectrum, [1])
    traces, boundary = cluster_traces(spectrum, cluster)
    psi = dilation(1.0)
    single = nagy_matrix(cluster, psi, traces, boundary)[0, 0]
    diff = gamma_differential(cluster, 1, psi, traces, boundary)
    dev = abs(single - diff) / abs(diff)
    out.append(CheckResult(name="nagy_simple_reduction", verdict=_verdict(dev <= 1e-12), value=float(single),
                           reference=float(diff), tolerance=1e-12))
    return out


def check_ball_criticality(ctx: SelftestContext) -> List[CheckResult]:
    out = []
    boundary = build_boundary(identity(), 256)
    pairs = disk_eigenpairs("P10", 4)
    values = [p.gamma for p in pairs]
    for labels in ([1], [2, 3]):
        cluster = cluster_from_indices(values, [l - 1 for l in labels])
        traces = oracle_traces([pairs[l - 1] for l in labels], boundary)
        _, rel = criticality_residual(cluster, traces, boundary)
        out.append(CheckResult(name=f"ball_oracle_P10_{labels}", verdict=_verdict(rel <= 1e-9), value=rel,
                               tolerance=1e-9))

    disk_rel = None
    for kind in ("P10", "P20", "N", "I", "L"):
        clusters = ctx.clusters(kind)
        cluster = clusters.get("simple") or clusters.get("double")
        traces, bnd = cluster_traces(ctx.spectrum(kind), cluster)
        _, rel = criticality_residual(cluster, traces, bnd)
        if kind == "P10":
            disk_rel = rel
        out.append(CheckResult(name=f"ball_fe_{kind}_{cluster.labels}", verdict=_verdict(rel <= 0.05), value=rel,
                               tolerance=0.05))

    spectrum = solve_shape(ProblemSpec(kind="P10"), ellipse(1.3), ctx.ref, 3)
    cluster = find_cluster(spectrum, [1])
    traces, bnd = cluster_traces(spectrum, cluster)
    _, ell_rel = criticality_residual(cluster, traces, bnd)
    out.append(CheckResult(name="ellipse_not_critical", verdict=_verdict(ell_rel >= 5.0 * disk_rel), value=ell_rel,
                           reference=5.0 * disk_rel))
    return out


def check_crossing(ctx: SelftestContext) -> List[CheckResult]:
    toy = toy_crossing_probe()
    out = [CheckResult(name="crossing_toy", verdict=toy.status, value=toy.gamma_jump, tolerance=0.01)]
    psi = fourier_bump(2) + dilation(0.5)
    fe = crossing_probe(ProblemSpec(kind="P10"), psi, (2, 3), ref=ctx.ref)
    out.append(CheckResult(name="crossing_P10_disk", verdict=fe.status, value=fe.gamma_jump, tolerance=0.01,
                           detail=f"sorted slope jump {fe.sorted_jump:.4e}"))
    return out


def check_flow(ctx: SelftestContext) -> List[CheckResult]:
    ref = build_disk_mesh(max(ctx.h, FLOW_H))
    problem = ProblemSpec(kind="P10")
    out = []
    disk = run_flow(identity(), problem, [1], 1, steps=3, eta=0.02, ref=ref)
    out.append(CheckResult(name="flow_disk_stationary", verdict=_verdict(disk.status == "stationary" and disk.step == 0),
                           value=disk.history[0]["velocity_norm"] if disk.history else None))

    state = run_flow(ellipse(1.2), problem, [1], 1, steps=30, eta=0.02, ref=ref)
    gammas = np.array(state.gamma_history)
    volumes = np.array(state.volume_history)
    drift = float(np.abs(volumes - state.initial_volume).max() / state.initial_volume)
    verdict, detail = flow_monotone_verdict(state)
    out.append(CheckResult(name="flow_ellipse_monotone", verdict=verdict,
                           value=float(gammas[-1]), reference=float(gammas[0]), detail=detail))
    out.append(CheckResult(name="flow_volume_drift", verdict=_verdict(drift <= 1e-3), value=drift, tolerance=1e-3))
    return out


def check_determinism(ctx: SelftestContext) -> List[CheckResult]:
    config = RunConfig(problem="P10", h=ctx.h, count=4)
    first = render_report(cmd_eig(config), stable=True).encode()
    second = render_report(cmd_eig(config), stable=True).encode()
    same = first == second
    digest = hashlib.sha256(first).hexdigest()[:12]
    return [CheckResult(name="determinism", verdict=_verdict(same),
                        detail=f"eig report rendered twice, sha256 {digest}" + ("" if same else " differs"))]


CHECKS: List[Callable[[SelftestContext], List[CheckResult]]] = [
    check_ipg_stability,
    check_disk_oracle,
    check_hadamard_matrix,
    check_unified_density,
    check_nagy,
    check_ball_criticality,
    check_crossing,
    check_flow,
    check_determinism,
]


def run_selftest(h: Optional[float] = None,
                 checks: Optional[List[Callable[[SelftestContext], List[CheckResult]]]] = None) -> List[CheckResult]:
    h = get_settings().selftest_h if h is None else h
    ctx = SelftestContext(h)
    results: List[CheckResult] = []
    for check in checks or CHECKS:
        name = check.__name__.replace("check_", "")
        started = time.perf_counter()
        try:
            part = check(ctx)
        except UnusableClusterError as e:
            part = [CheckResult(name=name, verdict="inconclusive", detail=e.detail)]
        except ShapeLabError as e:
            logger.error(f"{name}: {e.detail}")
            part = [CheckResult(name=name, verdict="fail", detail=e.detail)]
        results.extend(part)
        failed = [c.name for c in part if c.verdict == "fail"]
        logger.info(f"Selftest {name}: {len(part)} checks, {len(failed)} failed "
                    f"({time.perf_counter() - started:.1f}s)")
    return results
