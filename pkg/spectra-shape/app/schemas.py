import hashlib
from datetime import datetime, timezone
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from . import __version__
from .assembly import ProblemSpec, parse_kind
from .geometry import build_boundary, perturbation_field, pull_back, shape_map
from .mesh import H_MAX, H_MIN

Verdict = Literal["pass", "fail", "inconclusive", "info"]


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------
class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # [problem]
    problem:     str   = "P10"
    lam:         float = Field(1.0, gt=0)
    mu:          float = Field(1.0, gt=0)
    kappa:       float = Field(5.0 / 6.0, gt=0)
    t:           float = Field(0.2, gt=0)
    # [shape]
    shape:       Literal["disk", "ellipse", "dilated", "bump"] = "disk"
    shape_param: Optional[float] = None
    # [perturbation]
    psi:         Literal["dilation", "translation", "bump", "shear"] = "dilation"
    psi_param:   Optional[float] = None
    psi_frame:   Literal["reference", "image"] = "reference"
    # [mesh]
    h:           float = Field(0.05, ge=H_MIN, le=H_MAX)
    mesh_file:   Optional[str] = None
    # [spectrum]
    count:       int   = Field(5, ge=1, le=200)
    cluster:     List[int] = Field(default_factory=lambda: [1])
    order:       int   = Field(1, ge=1)
    tau:         float = Field(1e-3, gt=0, lt=1)
    # [fd]
    eps:         float = Field(1e-3, gt=0, le=0.1)
    richardson:  bool  = False
    points:      int   = Field(5, ge=2, le=101)
    crossing:    bool  = False
    window_lo:   float = -0.01
    window_hi:   float = 0.015
    # [flow]
    flow:        bool  = False
    steps:       int   = Field(30, ge=0, le=1000)
    step:        float = Field(0.02, ge=0, le=0.2)
    # [output]
    out:         Optional[str] = None
    csv:         Optional[str] = None
    dump_mesh:   Optional[str] = None
    dump_forms:  Optional[str] = None
    threads:     Optional[int] = Field(None, ge=1)

    @field_validator("problem", mode="before")
    @classmethod
    def _kind(cls, v):
        return parse_kind(v)

    @field_validator("cluster", mode="before")
    @classmethod
    def _labels(cls, v):
        if isinstance(v, str):
            v = [int(s) for s in v.replace(" ", "").split(",") if s]
        return v

    @field_validator("cluster")
    @classmethod
    def _contiguous(cls, v):
        if not v or any(l < 1 for l in v):
            raise ValueError("cluster labels must be positive integers")
        v = sorted(v)
        if v != list(range(v[0], v[-1] + 1)):
            raise ValueError(f"cluster {v} is not a contiguous range of eigenvalue labels")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        if self.order > len(self.cluster):
            raise ValueError(f"order h={self.order} exceeds the cluster size {len(self.cluster)}")
        if self.window_lo >= self.window_hi:
            raise ValueError("window_lo must be below window_hi")
        # rejects non-injective base maps before any compute
        build_boundary(self.base_map(), 256)
        return self

    def problem_spec(self) -> ProblemSpec:
        return ProblemSpec(kind=self.problem, lam=self.lam, mu=self.mu, kappa=self.kappa, t=self.t)

    def base_map(self):
        return shape_map(self.shape, self.shape_param)

    def psi_map(self):
        return pull_back(perturbation_field(self.psi, self.psi_param), self.base_map(), self.psi_frame)

    def sha256(self) -> str:
        return hashlib.sha256(self.model_dump_json().encode()).hexdigest()


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------
class CheckResult(BaseModel):
    name:      str
    verdict:   Verdict
    value:     Optional[float] = None
    reference: Optional[float] = None
    tolerance: Optional[float] = None
    detail:    str = ""


class Provenance(BaseModel):
    config_sha256: str
    mesh:          Dict[str, Any] = Field(default_factory=dict)
    tolerances:    Dict[str, float] = Field(default_factory=dict)
    seed:          int
    version:       str = __version__
    timestamp:     str = Field(default_factory=lambda: datetime.now(timezone.utc).isoformat())


class Report(BaseModel):
    command:    str
    status:     Verdict
    problem:    Optional[str] = None
    results:    Dict[str, Any] = Field(default_factory=dict)
    checks:     List[CheckResult] = Field(default_factory=list)
    provenance: Provenance


def overall_verdict(checks: List[CheckResult]) -> str:
    verdicts = {c.verdict for c in checks}
    if "fail" in verdicts:
        return "fail"
    if "inconclusive" in verdicts:
        return "inconclusive"
    if "pass" in verdicts:
        return "pass"
    return "info"
