"""
Analytic oracle on the unit disk: Bessel functions, their roots, and the
closed-form Dirichlet-Laplacian (P10) and clamped-plate (P20) eigenpairs
with exact Cartesian derivatives up to third order.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, List, Tuple

import numpy as np
from scipy import optimize, special

from .errors import InvalidInputError

logger = logging.getLogger(__name__)

X_MAX = 60.0
ORDER_MAX = 12
SCAN_START, SCAN_STEP = 0.5, 0.05


# ---------------------------------------------------------------------------
# Bessel functions and roots
# ---------------------------------------------------------------------------
def bessel(kind: str, order: int, x) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Value and first three derivatives of J_p or I_p."""
    x = np.asarray(x, dtype=float)
    if kind not in ("J", "I"):
        raise InvalidInputError(f"bessel kind must be 'J' or 'I', got {kind!r}")
    if not (0 <= order <= ORDER_MAX) or int(order) != order:
        raise InvalidInputError(f"bessel order {order} outside 0..{ORDER_MAX}")
    if x.size and (x.min() < 0 or x.max() > X_MAX):
        raise InvalidInputError(f"bessel argument outside [0, {X_MAX}]")
    fn = special.jvp if kind == "J" else special.ivp
    return tuple(fn(order, x, n) for n in range(4))


def find_root(f: Callable[[float], float], a: float, b: float) -> float:
    """Root of ``f`` on a sign-changing bracket to 1e-13 absolute."""
    fa, fb = f(a), f(b)
    if fa == 0.0:
        return float(a)
    if fb == 0.0:
        return float(b)
    if np.sign(fa) == np.sign(fb):
        raise InvalidInputError(f"no sign change on [{a}, {b}] (f={fa:.3e}, {fb:.3e})")
    return float(optimize.brentq(f, a, b, xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=200))


def scan_roots(f: Callable[[float], float], count: int, start: float = SCAN_START,
               step: float = SCAN_STEP, stop: float = X_MAX) -> List[float]:
    roots = []
    a, fa = start, f(start)
    while len(roots) < count and a + step <= stop:
        b = a + step
        fb = f(b)
        if np.sign(fa) != np.sign(fb):
            roots.append(find_root(f, a, b))
        a, fa = b, fb
    return roots


def clamped_frequency(order: int) -> Callable[[float], float]:
    """J_p(k) I_p'(k) - J_p'(k) I_p(k); its zeros are the clamped-plate frequencies."""
    def f(k):
        return float(special.jv(order, k) * special.ivp(order, k) - special.jvp(order, k) * special.iv(order, k))
    return f


@lru_cache(maxsize=None)
def frequencies(kind: str, order: int, count: int) -> Tuple[float, ...]:
    if kind == "P10":
        f = lambda k: float(special.jv(order, k))
    elif kind == "P20":
        f = clamped_frequency(order)
    else:
        raise InvalidInputError(f"no disk oracle for kind {kind}")
    return tuple(scan_roots(f, count))


# ---------------------------------------------------------------------------
# Disk eigenpairs
# ---------------------------------------------------------------------------
def _ladder(terms: Dict[Tuple[str, int], complex], axis: int, kappa: float) -> Dict[Tuple[str, int], complex]:
    """d/dx or d/dy of sum c Z_q(kappa r) e^{i q theta}, via (d_x +- i d_y)."""
    out: Dict[Tuple[str, int], complex] = {}
    for (kind, q), c in terms.items():
        up = -kappa if kind == "J" else kappa     # (d_x + i d_y): q -> q + 1
        down = kappa                              # (d_x - i d_y): q -> q - 1
        if axis == 0:
            contrib = {(kind, q + 1): 0.5 * up * c, (kind, q - 1): 0.5 * down * c}
        else:
            contrib = {(kind, q + 1): -0.5j * up * c, (kind, q - 1): 0.5j * down * c}
        for key, v in contrib.items():
            out[key] = out.get(key, 0.0) + v
    return out


@dataclass(frozen=True)
class DiskEigenpair:
    kind:   str      # P10 or P20
    order:  int      # angular order p
    index:  int      # radial index q
    kappa:  float
    gamma:  float
    trig:   str      # "cos" or "sin"
    norm:   float    # L2(disk) normalization constant
    ratio:  float    # J_p(kappa) / I_p(kappa) for P20, 0 for P10

    def radial(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        out = special.jv(self.order, self.kappa * r)
        if self.kind == "P20":
            out = out - self.ratio * special.iv(self.order, self.kappa * r)
        return out

    def _terms(self) -> Dict[Tuple[str, int], complex]:
        terms = {("J", self.order): complex(self.norm)}
        if self.kind == "P20":
            terms[("I", self.order)] = complex(-self.norm * self.ratio)
        return terms

    def _evaluate(self, terms, pts: np.ndarray) -> np.ndarray:
        r = np.hypot(pts[:, 0], pts[:, 1])
        th = np.arctan2(pts[:, 1], pts[:, 0])
        total = np.zeros(len(pts), dtype=complex)
        for (kind, q), c in terms.items():
            z = special.jv(q, self.kappa * r) if kind == "J" else special.iv(q, self.kappa * r)
            total += c * z * np.exp(1j * q * th)
        return total.real if self.trig == "cos" else total.imag

    def derivative(self, pts, axes: Tuple[int, ...] = ()) -> np.ndarray:
        """Partial derivative along ``axes`` (0 = x, 1 = y) at Cartesian points."""
        terms = self._terms()
        for a in axes:
            terms = _ladder(terms, a, self.kappa)
        return self._evaluate(terms, np.atleast_2d(np.asarray(pts, dtype=float)))

    def jets(self, pts, order: int = 3) -> List[np.ndarray]:
        """[u, grad, hess, third] with shapes (n,), (n, 2), (n, 2, 2), (n, 2, 2, 2)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = [self.derivative(pts)]
        for r in range(1, order + 1):
            arr = np.empty((len(pts),) + (2,) * r)
            cache = {}
            for idx in np.ndindex(*((2,) * r)):
                key = tuple(sorted(idx))
                if key not in cache:
                    cache[key] = self.derivative(pts, key)
                arr[(slice(None),) + idx] = cache[key]
            out.append(arr)
        return out

    def laplacian(self, pts) -> np.ndarray:
        return self.derivative(pts, (0, 0)) + self.derivative(pts, (1, 1))

    def bilaplacian(self, pts) -> np.ndarray:
        return sum(self.derivative(pts, ax) for ax in [(0, 0, 0, 0), (0, 0, 1, 1), (0, 0, 1, 1), (1, 1, 1, 1)])

    def pde_residual(self, pts) -> np.ndarray:
        if self.kind == "P10":
            return -self.laplacian(pts) - self.gamma * self.derivative(pts)
        return self.bilaplacian(pts) - self.gamma * self.derivative(pts)


def _radial_norm(kind: str, order: int, kappa: float, ratio: float) -> float:
    x, w = np.polynomial.legendre.leggauss(80)
    r, w = 0.5 * (x + 1.0), 0.5 * w
    prof = special.jv(order, kappa * r)
    if kind == "P20":
        prof = prof - ratio * special.iv(order, kappa * r)
    angular = 2.0 * np.pi if order == 0 else np.pi
    return 1.0 / np.sqrt(angular * np.sum(w * prof ** 2 * r))


def make_eigenpair(kind: str, order: int, index: int, trig: str = "cos") -> DiskEigenpair:
    roots = frequencies(kind, order, index)
    if len(roots) < index:
        raise InvalidInputError(f"root {index} of order {order} beyond the scan range")
    kappa = roots[index - 1]
    ratio = float(special.jv(order, kappa) / special.iv(order, kappa)) if kind == "P20" else 0.0
    gamma = kappa ** 2 if kind == "P10" else kappa ** 4
    return DiskEigenpair(kind, order, index, kappa, gamma, trig,
                         _radial_norm(kind, order, kappa, ratio), ratio)


def disk_eigenpairs(kind: str, count: int) -> List[DiskEigenpair]:
    """Lowest eigenpairs, ascending; each p >= 1 level contributes its cos and sin member."""
    if kind not in ("P10", "P20"):
        raise InvalidInputError(f"disk oracle covers P10 and P20 only, not {kind}")
    per_order = max(2, count)
    levels = []
    for p in range(ORDER_MAX + 1):
        for q, k in enumerate(frequencies(kind, p, per_order), start=1):
            levels.append((k, p, q))
    levels.sort()
    out: List[DiskEigenpair] = []
    for _, p, q in levels:
        if len(out) >= count:
            break
        out.append(make_eigenpair(kind, p, q, "cos"))
        if p > 0:
            out.append(make_eigenpair(kind, p, q, "sin"))
    return out
