import argparse
import configparser
import logging
import os
import sys
from typing import Dict, List, Optional

import numpy as np
from pydantic import ValidationError

from .assembly import assemble, dump_forms
from .config import get_settings
from .eigensolve import find_cluster, kernel_indices, solve_lowest, symmetric_functions
from .errors import InvalidInputError, ShapeLabError
from .hadamard import cluster_traces, criticality_residual
from .mesh import build_disk_mesh, dump_mesh, load_mesh, map_mesh, mesh_stats
from .perturb import (
    crossing_probe, dgamma_comparison, eigen_path, flow_frame, flow_monotone_verdict, nagy_check, run_flow,
)
from .schemas import CheckResult, Provenance, Report, RunConfig, overall_verdict
from .special import disk_eigenpairs

logger = logging.getLogger("spectra-shape")

# [section] key -> RunConfig field
CONFIG_KEYS: Dict[str, Dict[str, str]] = {
    "problem":      {"kind": "problem", "lam": "lam", "mu": "mu", "kappa": "kappa", "t": "t"},
    "shape":        {"name": "shape", "param": "shape_param"},
    "perturbation": {"name": "psi", "param": "psi_param", "frame": "psi_frame"},
    "mesh":         {"h": "h", "file": "mesh_file"},
    "spectrum":     {"count": "count", "cluster": "cluster", "order": "order", "tau": "tau"},
    "fd":           {"eps": "eps", "richardson": "richardson", "points": "points",
                     "crossing": "crossing", "window_lo": "window_lo", "window_hi": "window_hi"},
    "flow":         {"enabled": "flow", "steps": "steps", "step": "step"},
    "output":       {"out": "out", "csv": "csv", "dump_mesh": "dump_mesh",
                     "dump_forms": "dump_forms", "threads": "threads"},
}

ORACLE_TOL = {"P10": 0.005, "P20": 0.01}
CRITICAL_TOL = 0.05


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------
def read_config_file(path: str) -> dict:
    if not os.path.exists(path):
        raise InvalidInputError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as e:
        raise InvalidInputError(f"malformed config file {path}: {e}")
    values = {}
    for section in parser.sections():
        if section not in CONFIG_KEYS:
            raise InvalidInputError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in CONFIG_KEYS[section]:
                raise InvalidInputError(f"unknown config key '{key}' in [{section}]")
            values[CONFIG_KEYS[section][key]] = raw
    return values


def build_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    fields = set(RunConfig.model_fields)
    for key, val in vars(args).items():
        if key in fields and val is not None:
            values[key] = val
    return RunConfig(**values)


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=S, help="key = value file with [section] headers")
    common.add_argument("--out", default=S, help="report path (stdout when omitted)")
    common.add_argument("--dump-mesh", dest="dump_mesh", default=S)
    common.add_argument("--dump-forms", dest="dump_forms", default=S)
    common.add_argument("--threads", type=int, default=S)
    common.add_argument("--problem", default=S)
    common.add_argument("--lam", type=float, default=S)
    common.add_argument("--mu", type=float, default=S)
    common.add_argument("--kappa", type=float, default=S)
    common.add_argument("--t", type=float, default=S)
    common.add_argument("--shape", default=S)
    common.add_argument("--shape-param", dest="shape_param", type=float, default=S)
    common.add_argument("--psi", default=S)
    common.add_argument("--psi-param", dest="psi_param", type=float, default=S)
    common.add_argument("--psi-frame", dest="psi_frame", default=S)
    common.add_argument("--h", type=float, default=S)
    common.add_argument("--mesh", dest="mesh_file", default=S, help="MESH v1 file used instead of the generated disk mesh")
    common.add_argument("-k", "--count", type=int, default=S)
    common.add_argument("--cluster", default=S, help="comma separated 1-based labels, e.g. 2,3")
    common.add_argument("--order", type=int, default=S, help="symmetric function order h")
    common.add_argument("--tau", type=float, default=S)
    common.add_argument("--eps", type=float, default=S)
    common.add_argument("--richardson", action="store_true", default=S)
    common.add_argument("--points", type=int, default=S)
    common.add_argument("--crossing", action="store_true", default=S)
    common.add_argument("--window-lo", dest="window_lo", type=float, default=S)
    common.add_argument("--window-hi", dest="window_hi", type=float, default=S)
    common.add_argument("--flow", action="store_true", default=S)
    common.add_argument("--steps", type=int, default=S)
    common.add_argument("--step", type=float, default=S)
    common.add_argument("--csv", default=S)

    parser = argparse.ArgumentParser(prog="spectra-shape", description="Shape sensitivity of eigenvalue clusters")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("eig", parents=[common], help="eigenvalues, clusters and symmetric functions")
    sub.add_parser("dgamma", parents=[common], help="boundary formula vs finite differences vs branch slopes")
    sub.add_parser("critical", parents=[common], help="criticality residual, optional constrained flow")
    sub.add_parser("branches", parents=[common], help="eigenvalue branches along a perturbation")
    sub.add_parser("selftest", parents=[common], help="full acceptance suite")
    return parser


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------
def _provenance(config: RunConfig, mesh: Optional[dict] = None, **tolerances) -> Provenance:
    settings = get_settings()
    tol = {"cluster": config.tau, "eps": config.eps}
    tol.update({k: float(v) for k, v in tolerances.items()})
    return Provenance(config_sha256=config.sha256(), mesh=mesh or {}, tolerances=tol, seed=settings.seed)


def _floats(values) -> List[float]:
    return [float(v) for v in np.asarray(values).ravel()]


def _reference_mesh(config: RunConfig):
    if config.mesh_file:
        return load_mesh(config.mesh_file)
    return build_disk_mesh(config.h)


def _base_mesh(config: RunConfig):
    ref = _reference_mesh(config)
    mm = map_mesh(ref, config.base_map(), config.problem_spec().degree)
    if config.dump_mesh:
        dump_mesh(ref, config.dump_mesh)
    return ref, mm


def _mesh_block(mm, space=None) -> dict:
    stats = mesh_stats(mm)
    if space is not None:
        stats["dofs"] = int(space.n_dofs)
        stats["free_dofs"] = int(len(space.free))
    return stats


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_eig(config: RunConfig) -> Report:
    problem = config.problem_spec()
    ref, mm = _base_mesh(config)
    space, pair = assemble(problem, mm)
    if config.dump_forms:
        dump_forms(pair, config.dump_forms)
    count = max(config.count, config.cluster[-1] + 1)
    spectrum = solve_lowest(pair, count, tau=config.tau)

    cluster = find_cluster(spectrum, config.cluster)
    kernel = kernel_indices(spectrum)
    results = {
        "eigenvalues": _floats(spectrum.values[: config.count]),
        "residuals": _floats(spectrum.residuals[: config.count]),
        "clusters": [
            {"labels": c.labels, "gamma": c.gamma, "spread": c.spread, "gap": c.gap,
             "usable": c.usable, "reason": c.reason}
            for c in spectrum.clusters
        ],
        "cluster": config.cluster,
        "symmetric_functions": _floats(symmetric_functions(cluster, spectrum)),
        "cluster_usable": cluster.usable,
        "kernel": [i + 1 for i in kernel],
    }

    checks: List[CheckResult] = []
    if config.shape == "disk" and problem.kind in ORACLE_TOL:
        oracle = [p.gamma for p in disk_eigenpairs(problem.kind, config.count)]
        tol = ORACLE_TOL[problem.kind]
        for j, exact in enumerate(oracle[: min(config.count, 4)]):
            got = float(spectrum.values[j])
            rel = abs(got - exact) / exact
            checks.append(CheckResult(name=f"oracle_gamma_{j + 1}", verdict="pass" if rel <= tol else "fail",
                                      value=got, reference=exact, tolerance=tol, detail=f"relative error {rel:.3e}"))
    if problem.kind == "N":
        checks.append(CheckResult(name="affine_kernel", verdict="pass" if len(kernel) == 3 else "fail",
                                  value=float(len(kernel)), reference=3.0,
                                  detail="eigenvalues at zero span {1, x, y}"))
    if not cluster.usable:
        checks.append(CheckResult(name="cluster", verdict="inconclusive", detail=cluster.reason))

    return Report(command="eig", status=overall_verdict(checks), problem=problem.kind, results=results,
                  checks=checks, provenance=_provenance(config, _mesh_block(mm, space)))


def cmd_dgamma(config: RunConfig) -> Report:
    problem = config.problem_spec()
    ref = _reference_mesh(config)
    base, psi = config.base_map(), config.psi_map()
    check = dgamma_comparison(problem, psi, config.cluster, config.order, base=base, eps0=config.eps,
                              richardson=config.richardson, ref=ref, count=config.count)
    mm = map_mesh(ref, base, problem.degree)

    results = {"cluster": check.labels, "order": check.order, "gamma_F": check.gamma,
               "symmetric_function": check.value, "formula": check.formula, "fd": check.fd,
               "rel_dev": check.rel_dev}
    checks = [CheckResult(name="hadamard_vs_fd", verdict=check.status, value=check.formula, reference=check.fd,
                          tolerance=check.tolerance, detail=check.message)]
    if check.nagy is not None:
        results["nagy_matrix"] = check.nagy.matrix.tolist()
        results["nagy_predicted"] = _floats(check.nagy.predicted)
        results["nagy_fd"] = _floats(check.nagy.fd)
        checks.append(CheckResult(name="nagy_vs_fd", verdict=check.nagy.status, value=check.nagy.max_rel_dev,
                                  tolerance=check.tolerance, detail=check.nagy.message))
    return Report(command="dgamma", status=overall_verdict(checks), problem=problem.kind, results=results,
                  checks=checks, provenance=_provenance(config, _mesh_block(mm), formula=check.tolerance))


def cmd_critical(config: RunConfig) -> Report:
    problem = config.problem_spec()
    ref, mm = _base_mesh(config)
    space, pair = assemble(problem, mm)
    spectrum = solve_lowest(pair, max(config.count, config.cluster[-1] + 1), tau=config.tau)
    cluster = find_cluster(spectrum, config.cluster)
    checks: List[CheckResult] = []
    results = {"cluster": config.cluster, "gamma_F": cluster.gamma}

    if not cluster.usable:
        checks.append(CheckResult(name="cluster", verdict="inconclusive", detail=cluster.reason))
    else:
        traces, boundary = cluster_traces(spectrum, cluster)
        mean, rel = criticality_residual(cluster, traces, boundary)
        results.update({"C_mean": mean, "rel_deviation": rel})
        if config.shape in ("disk", "dilated"):
            checks.append(CheckResult(name="ball_criticality", verdict="pass" if rel <= CRITICAL_TOL else "fail",
                                      value=rel, tolerance=CRITICAL_TOL))
        else:
            # informational away from balls
            checks.append(CheckResult(name="criticality_residual", verdict="info", value=rel))

    if config.flow:
        state = run_flow(config.base_map(), problem, config.cluster, config.order, config.steps, config.step, ref)
        frame = flow_frame(state)
        if config.csv:
            frame.to_csv(config.csv, index=False)
            logger.info(f"Flow history written to {config.csv}")
        gammas = np.array(state.gamma_history)
        volumes = frame["volume"].to_numpy()
        drift = float(np.abs(volumes - state.initial_volume).max() / state.initial_volume) if len(volumes) else 0.0
        verdict, detail = flow_monotone_verdict(state)
        results["flow"] = {"status": state.status, "steps": state.step, "rejected": state.rejected,
                           "gamma": _floats(gammas), "volume": _floats(volumes),
                           "residual": _floats(frame["residual"].to_numpy())}
        checks.append(CheckResult(name="flow_monotone", verdict=verdict, detail=detail))
        checks.append(CheckResult(name="flow_volume", verdict="pass" if drift <= 1e-3 else "fail",
                                  value=drift, tolerance=1e-3))

    return Report(command="critical", status=overall_verdict(checks), problem=problem.kind, results=results,
                  checks=checks, provenance=_provenance(config, _mesh_block(mm, space), critical=CRITICAL_TOL))


def cmd_branches(config: RunConfig) -> Report:
    problem = config.problem_spec()
    ref = _reference_mesh(config)
    base, psi = config.base_map(), config.psi_map()
    count = max(config.count, config.cluster[-1] + 1)

    grid = np.linspace(-config.eps, config.eps, config.points)
    path = eigen_path(problem, psi, grid, count, base=base, ref=ref)
    if config.csv:
        path.frame().to_csv(config.csv, index=False)
        logger.info(f"Branch table written to {config.csv}")
    results = {"eps": _floats(path.eps), "branches": path.branches.tolist(),
               "quality": _floats(path.quality), "flagged": path.flagged}
    checks = []
    if path.flagged:
        checks.append(CheckResult(name="branch_matching", verdict="inconclusive", detail=path.message))

    nagy = nagy_check(problem, psi, config.cluster, base=base, eps0=min(config.eps, 1e-3), ref=ref)
    results["nagy"] = {"predicted": _floats(nagy.predicted), "fd": _floats(nagy.fd), "max_rel_dev": nagy.max_rel_dev}
    checks.append(CheckResult(name="nagy_vs_fd", verdict=nagy.status, value=nagy.max_rel_dev,
                              tolerance=nagy.tolerance, detail=nagy.message))

    if config.crossing:
        labels = config.cluster if len(config.cluster) == 2 else [config.cluster[0], config.cluster[0] + 1]
        report = crossing_probe(problem, psi, labels, window=(config.window_lo, config.window_hi),
                                base=base, ref=ref)
        results["crossing"] = {
            "location": report.location, "gamma_slopes": [report.gamma_left, report.gamma_right],
            "sorted_slopes": [report.sorted_left, report.sorted_right],
        }
        checks.append(CheckResult(name="crossing_smoothness", verdict=report.status, value=report.gamma_jump,
                                  tolerance=0.01, detail=report.message))

    mm = map_mesh(ref, base, problem.degree)
    return Report(command="branches", status=overall_verdict(checks), problem=problem.kind, results=results,
                  checks=checks, provenance=_provenance(config, _mesh_block(mm)))


def cmd_selftest(config: RunConfig) -> Report:
    from .selftest import run_selftest

    settings = get_settings()
    checks = run_selftest(settings.selftest_h)
    return Report(command="selftest", status=overall_verdict(checks), results={"h": settings.selftest_h},
                  checks=checks, provenance=_provenance(config, {"h": settings.selftest_h}))


COMMANDS = {
    "eig": cmd_eig,
    "dgamma": cmd_dgamma,
    "critical": cmd_critical,
    "branches": cmd_branches,
    "selftest": cmd_selftest,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------
def render_report(report: Report, stable: bool = False) -> str:
    """JSON text of a report; ``stable`` leaves out the run timestamp."""
    exclude = {"provenance": {"timestamp"}} if stable else None
    return report.model_dump_json(indent=2, exclude=exclude)


def write_report(report: Report, path: Optional[str]) -> None:
    text = render_report(report)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
        logger.info(f"Report written to {path}")
    else:
        sys.stdout.write(text + "\n")


def exit_code(report: Report) -> int:
    return 1 if report.status == "fail" else 0


def main(argv: Optional[List[str]] = None) -> int:
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s [%(name)s] %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 2

    try:
        config = build_config(args)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(p) for p in first["loc"]) or "config"
        logger.error(f"invalid configuration field '{field}': {first['msg']}")
        return 2
    except ShapeLabError as e:
        logger.error(e.detail)
        return e.exit_code

    if config.threads:
        os.environ["SPECTRA_SHAPE_THREADS"] = str(config.threads)

    try:
        report = COMMANDS[args.command](config)
    except ShapeLabError as e:
        logger.error(f"{args.command} failed: {e.detail}")
        return e.exit_code
    write_report(report, config.out)
    if report.status == "fail":
        logger.error(f"{args.command}: checks failed")
    return exit_code(report)


if __name__ == "__main__":
    sys.exit(main())
