"""
Domains as images of the closed unit disk under closed-form maps, plus the
boundary differential geometry (normal, curvature, arc length) and the
tangential calculus that the boundary densities are built from.

Every map in the catalog is a polynomial vector field, so values and
derivatives up to third order are exact.
"""
import itertools
import logging
from dataclasses import dataclass
from math import comb
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.signal import convolve2d

from .errors import InvalidInputError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi


def _as_points(x) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    if pts.shape[-1] != 2:
        raise InvalidInputError(f"expected points of shape (n, 2), got {pts.shape}")
    return pts


# ---------------------------------------------------------------------------
# Map expressions
# ---------------------------------------------------------------------------
class MapExpr:
    """
    Vector field R^2 -> R^2 with exact derivatives.

    ``derivatives(x, order)`` returns ``[value, jac, hess, third][:order + 1]``
    with shapes (n, 2), (n, 2, 2), (n, 2, 2, 2), (n, 2, 2, 2, 2) and
    ``jac[n, i, a] = d phi_i / d x_a``.
    """

    def derivatives(self, x, order: int = 1) -> List[np.ndarray]:
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        return self.derivatives(x, 0)[0]

    def jacobian(self, x) -> np.ndarray:
        return self.derivatives(x, 1)[1]

    def __add__(self, other):
        if not isinstance(other, MapExpr):
            return NotImplemented
        return Sum(self, other)

    def __mul__(self, scale):
        if not np.isscalar(scale):
            return NotImplemented
        return Scaled(float(scale), self)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-1.0) * other

    def compose(self, inner: "MapExpr") -> "MapExpr":
        return Compose(self, inner)


class PolynomialMap(MapExpr):
    """Polynomial field; ``coef[i, p, q]`` multiplies x**p * y**q in component i."""

    def __init__(self, coef):
        coef = np.asarray(coef, dtype=float)
        if coef.ndim != 3 or coef.shape[0] != 2:
            raise InvalidInputError(f"polynomial map needs coefficients of shape (2, d, d), got {coef.shape}")
        size = max(coef.shape[1], coef.shape[2])
        self.coef = np.zeros((2, size, size))
        self.coef[:, : coef.shape[1], : coef.shape[2]] = coef
        self._dcache: Dict[Tuple[int, int, int], np.ndarray] = {}

    @property
    def degree(self) -> int:
        p, q = np.nonzero(np.abs(self.coef).max(axis=0))
        return int((p + q).max()) if len(p) else 0

    def _deriv(self, comp: int, nx: int, ny: int) -> np.ndarray:
        key = (comp, nx, ny)
        if key not in self._dcache:
            c = self.coef[comp]
            if nx:
                c = npoly.polyder(c, nx, axis=0)
            if ny:
                c = npoly.polyder(c, ny, axis=1)
            self._dcache[key] = c
        return self._dcache[key]

    def derivatives(self, x, order: int = 1) -> List[np.ndarray]:
        pts = _as_points(x)
        X, Y = pts[:, 0], pts[:, 1]
        out = [np.stack([npoly.polyval2d(X, Y, self.coef[i]) for i in range(2)], axis=-1)]
        for r in range(1, order + 1):
            arr = np.empty((len(pts), 2) + (2,) * r)
            evaluated = {}
            for idx in itertools.product(range(2), repeat=r):
                nx = idx.count(0)
                if nx not in evaluated:
                    evaluated[nx] = [npoly.polyval2d(X, Y, self._deriv(i, nx, r - nx)) for i in range(2)]
                for i in range(2):
                    arr[(slice(None), i) + idx] = evaluated[nx][i]
            out.append(arr)
        return out

    def __add__(self, other):
        if isinstance(other, PolynomialMap):
            size = max(self.coef.shape[1], other.coef.shape[1])
            total = np.zeros((2, size, size))
            total[:, : self.coef.shape[1], : self.coef.shape[1]] += self.coef
            total[:, : other.coef.shape[1], : other.coef.shape[1]] += other.coef
            return PolynomialMap(total)
        return super().__add__(other)

    def __mul__(self, scale):
        if not np.isscalar(scale):
            return NotImplemented
        return PolynomialMap(float(scale) * self.coef)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"PolynomialMap(degree={self.degree})"


class Sum(MapExpr):
    def __init__(self, *terms: MapExpr):
        self.terms = terms

    def derivatives(self, x, order: int = 1) -> List[np.ndarray]:
        parts = [t.derivatives(x, order) for t in self.terms]
        return [sum(p[r] for p in parts) for r in range(order + 1)]


class Scaled(MapExpr):
    def __init__(self, scale: float, inner: MapExpr):
        self.scale = scale
        self.inner = inner

    def derivatives(self, x, order: int = 1) -> List[np.ndarray]:
        return [self.scale * d for d in self.inner.derivatives(x, order)]


class Compose(MapExpr):
    """``outer o inner`` with the chain rule carried to third order."""

    def __init__(self, outer: MapExpr, inner: MapExpr):
        self.outer = outer
        self.inner = inner

    def derivatives(self, x, order: int = 1) -> List[np.ndarray]:
        g = self.inner.derivatives(x, order)
        f = self.outer.derivatives(g[0], order)
        out = [f[0]]
        if order >= 1:
            out.append(np.einsum("nij,nja->nia", f[1], g[1]))
        if order >= 2:
            out.append(
                np.einsum("nijk,nja,nkb->niab", f[2], g[1], g[1])
                + np.einsum("nij,njab->niab", f[1], g[2])
            )
        if order >= 3:
            mixed = (
                np.einsum("njab,nkc->njkabc", g[2], g[1])
                + np.einsum("njac,nkb->njkabc", g[2], g[1])
                + np.einsum("nja,nkbc->njkabc", g[1], g[2])
            )
            out.append(
                np.einsum("nijkl,nja,nkb,nlc->niabc", f[3], g[1], g[1], g[1])
                + np.einsum("nijk,njkabc->niabc", f[2], mixed)
                + np.einsum("nij,njabc->niabc", f[1], g[3])
            )
        return out


# ---------------------------------------------------------------------------
# Catalog
# ---------------------------------------------------------------------------
def linear(matrix, shift=(0.0, 0.0)) -> PolynomialMap:
    m = np.asarray(matrix, dtype=float)
    coef = np.zeros((2, 2, 2))
    for i in range(2):
        coef[i, 0, 0] = shift[i]
        coef[i, 1, 0] = m[i, 0]
        coef[i, 0, 1] = m[i, 1]
    return PolynomialMap(coef)


def identity() -> PolynomialMap:
    return linear(np.eye(2))


def translation(vector=(1.0, 0.0)) -> PolynomialMap:
    return linear(np.zeros((2, 2)), shift=vector)


def dilation(scale: float = 1.0) -> PolynomialMap:
    """x -> scale * x; with scale 1 this is the dilation field psi(x) = x."""
    return linear(scale * np.eye(2))


def ellipse(a: float, b: Optional[float] = None) -> PolynomialMap:
    """(x, y) -> (a x, b y); b defaults to 1/a so the area stays pi."""
    return linear(np.diag([a, 1.0 / a if b is None else b]))


def shear_field(amount: float = 1.0) -> PolynomialMap:
    return linear([[0.0, amount], [0.0, 0.0]])


def _complex_power(p: int) -> Tuple[np.ndarray, np.ndarray]:
    """Coefficient arrays of Re (x + iy)^p and Im (x + iy)^p."""
    re = np.zeros((p + 1, p + 1))
    im = np.zeros((p + 1, p + 1))
    for k in range(p + 1):
        unit = 1j ** k
        re[p - k, k] += comb(p, k) * unit.real
        im[p - k, k] += comb(p, k) * unit.imag
    return re, im


def _square(components: Sequence[np.ndarray]) -> np.ndarray:
    size = max(max(c.shape) for c in components)
    out = np.zeros((len(components), size, size))
    for i, c in enumerate(components):
        out[i, : c.shape[0], : c.shape[1]] = c
    return out


def fourier_bump(p: int = 2, q: int = 0, amplitude: float = 1.0) -> PolynomialMap:
    """
    Radial Fourier bump (x^2 + y^2)^q Re[(x + iy)^p] (x, y).

    On the unit circle this is cos(p theta) e_r; the radial weight r^(p + 2q)
    makes it vanish at the centre for p + q > 0. This weight stands in for a
    smooth cutoff chi(r) supported near the boundary: the field is nonzero
    throughout the interior, and only its boundary trace agrees with
    cos(p theta) chi(1) e_r. Boundary formulas see the trace only; interior
    mesh motion and finite differences see the polynomial field.
    """
    if p < 0 or q < 0:
        raise InvalidInputError("fourier bump orders must be non-negative")
    scalar, _ = _complex_power(p)
    r2 = np.zeros((3, 3))
    r2[2, 0] = r2[0, 2] = 1.0
    for _ in range(q):
        scalar = convolve2d(scalar, r2)
    x_coef = np.array([[0.0], [1.0]])
    y_coef = np.array([[0.0, 1.0]])
    comps = [convolve2d(scalar, x_coef), convolve2d(scalar, y_coef)]
    return PolynomialMap(amplitude * _square(comps))


def harmonic_field(cos_coef, sin_coef) -> PolynomialMap:
    """
    Field whose component i is sum_p cos_coef[p, i] Re z^p + sin_coef[p, i] Im z^p.

    It is the harmonic extension of the trigonometric boundary data with the
    same coefficients.
    """
    cos_coef = np.asarray(cos_coef, dtype=float)
    sin_coef = np.asarray(sin_coef, dtype=float)
    top = cos_coef.shape[0] - 1
    coef = np.zeros((2, top + 1, top + 1))
    for p in range(top + 1):
        re, im = _complex_power(p)
        for i in range(2):
            coef[i, : p + 1, : p + 1] += cos_coef[p, i] * re + sin_coef[p, i] * im
    return PolynomialMap(coef)


def harmonic_extension(samples, max_order: int) -> PolynomialMap:
    """
    Harmonic polynomial field matching equispaced boundary samples up to ``max_order`` modes.

    Used in place of a cutoff extension chi(r) v(theta) n: the interior
    displacement is the harmonic one, not one confined to a boundary collar.
    Modes above ``max_order`` are dropped, so the trace matches the samples
    only up to that truncation.
    """
    samples = np.asarray(samples, dtype=float)
    n = len(samples)
    top = int(min(max_order, (n - 1) // 2))
    spec = np.fft.rfft(samples, axis=0)
    cos_coef = np.zeros((top + 1, 2))
    sin_coef = np.zeros((top + 1, 2))
    cos_coef[0] = spec[0].real / n
    cos_coef[1:] = 2.0 * spec[1 : top + 1].real / n
    sin_coef[1:] = -2.0 * spec[1 : top + 1].imag / n
    return harmonic_field(cos_coef, sin_coef)


SHAPES = ("disk", "ellipse", "dilated", "bump")
FIELDS = ("dilation", "translation", "bump", "shear")


def shape_map(name: str, param: Optional[float] = None) -> PolynomialMap:
    """Named base map; ``param`` is the semi-axis, the scale or the bump amplitude."""
    if name == "disk":
        return identity()
    if name == "ellipse":
        return ellipse(1.3 if param is None else param)
    if name == "dilated":
        return dilation(1.0 if param is None else param)
    if name == "bump":
        return identity() + fourier_bump(2, 0, 0.1 if param is None else param)
    raise InvalidInputError(f"unknown shape '{name}' (choose from {', '.join(SHAPES)})")


def perturbation_field(name: str, param: Optional[float] = None) -> PolynomialMap:
    if name == "dilation":
        return dilation(1.0)
    if name == "translation":
        return translation((1.0, 0.0))
    if name == "bump":
        return fourier_bump(2 if param is None else int(param))
    if name == "shear":
        return shear_field(1.0 if param is None else param)
    raise InvalidInputError(f"unknown perturbation '{name}' (choose from {', '.join(FIELDS)})")


def pull_back(field: MapExpr, base: MapExpr, frame: str = "reference") -> MapExpr:
    """psi on the reference disk; an image-frame field is composed with the base map."""
    if frame == "reference":
        return field
    if frame == "image":
        return Compose(field, base)
    raise InvalidInputError(f"unknown perturbation frame '{frame}'")


# ---------------------------------------------------------------------------
# Boundary geometry
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class BoundaryGeom:
    """Samples of the image boundary at equispaced reference angles."""
    theta:     np.ndarray   # reference angles
    ref:       np.ndarray   # (n, 2) preimages on the unit circle
    points:    np.ndarray   # (n, 2) boundary points
    d1:        np.ndarray   # d points / d theta
    d2:        np.ndarray
    speed:     np.ndarray
    tangent:   np.ndarray
    normal:    np.ndarray   # unit outer normal
    curvature: np.ndarray   # signed, +1 on the unit circle
    weights:   np.ndarray   # periodic trapezoid weights in arc length
    jacobian:  np.ndarray   # map Jacobian at ref

    @property
    def n(self) -> int:
        return len(self.theta)

    @property
    def length(self) -> float:
        return float(self.weights.sum())

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, values))


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _check_simple_curve(points: np.ndarray, d1: np.ndarray) -> None:
    ang = np.arctan2(d1[:, 1], d1[:, 0])
    inc = np.diff(np.append(ang, ang[0]))
    inc = (inc + np.pi) % TWO_PI - np.pi
    turns = inc.sum() / TWO_PI
    if abs(turns - 1.0) > 1e-6:
        raise InvalidInputError(f"boundary curve turns {turns:.3f} times; map is not injective on the disk")

    n = len(points)
    start, end = points, np.roll(points, -1, axis=0)
    idx = np.arange(n)
    chunk = 256
    for i0 in range(0, n, chunk):
        a, b = start[i0 : i0 + chunk, None], end[i0 : i0 + chunk, None]
        c, d = start[None], end[None]
        s1 = _cross(b - a, c - a) * _cross(b - a, d - a)
        s2 = _cross(d - c, a - c) * _cross(d - c, b - c)
        gap = np.abs(idx[i0 : i0 + chunk, None] - idx[None])
        hit = (s1 < 0) & (s2 < 0) & (gap > 1) & (gap < n - 1)
        if hit.any():
            i, j = np.argwhere(hit)[0]
            raise InvalidInputError(
                f"boundary self-intersection between samples {i0 + i} and {j}; map is not injective on the disk"
            )


def build_boundary(mapping: MapExpr, n_samples: int = 256, check_injective: bool = True) -> BoundaryGeom:
    """Sample the image of the unit circle at ``n_samples`` equispaced angles."""
    if n_samples < 16:
        raise InvalidInputError(f"n_samples must be >= 16, got {n_samples}")
    theta = TWO_PI * np.arange(n_samples) / n_samples
    c, s = np.cos(theta), np.sin(theta)
    ref = np.stack([c, s], axis=1)
    val, jac, hess = mapping.derivatives(ref, 2)

    det = np.linalg.det(jac)
    if det.min() <= 0:
        j = int(np.argmin(det))
        raise InvalidInputError(
            f"map is not orientation preserving at theta={theta[j]:.4f} (det={det[j]:.3e})"
        )

    t_ref = np.stack([-s, c], axis=1)
    d1 = np.einsum("nia,na->ni", jac, t_ref)
    d2 = np.einsum("niab,na,nb->ni", hess, t_ref, t_ref) - np.einsum("nia,na->ni", jac, ref)
    speed = np.linalg.norm(d1, axis=1)
    tangent = d1 / speed[:, None]
    normal = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
    curvature = _cross(d1, d2) / speed ** 3
    weights = speed * TWO_PI / n_samples

    if check_injective:
        _check_simple_curve(val, d1)

    return BoundaryGeom(
        theta=theta, ref=ref, points=val, d1=d1, d2=d2, speed=speed,
        tangent=tangent, normal=normal, curvature=curvature,
        weights=weights, jacobian=jac,
    )


# ---------------------------------------------------------------------------
# Tangential calculus
# ---------------------------------------------------------------------------
def _require_uniform(boundary: BoundaryGeom) -> None:
    n = boundary.n
    steps = np.diff(np.append(boundary.theta, boundary.theta[0] + TWO_PI))
    if not np.allclose(steps, TWO_PI / n, rtol=0.0, atol=1e-12):
        raise InvalidInputError("tangential operators need samples uniform in the curve parameter")


def _d_theta(values: np.ndarray) -> np.ndarray:
    n = values.shape[0]
    spec = np.fft.rfft(values, axis=0)
    k = np.arange(spec.shape[0]).reshape((-1,) + (1,) * (values.ndim - 1))
    spec = spec * (1j * k)
    if n % 2 == 0:
        spec[-1] = 0.0
    return np.fft.irfft(spec, n=n, axis=0)


def _per_sample(arr: np.ndarray, like: np.ndarray) -> np.ndarray:
    return arr.reshape((-1,) + (1,) * (like.ndim - 1))


def d_ds(values, boundary: BoundaryGeom) -> np.ndarray:
    """Arc-length derivative by Fourier differentiation in the parameter."""
    _require_uniform(boundary)
    values = np.asarray(values, dtype=float)
    return _d_theta(values) / _per_sample(boundary.speed, values)


def tangential_gradient(values, boundary: BoundaryGeom) -> np.ndarray:
    du = d_ds(values, boundary)
    return du[:, None] * boundary.tangent


def tangential_laplacian(values, boundary: BoundaryGeom) -> np.ndarray:
    return d_ds(d_ds(values, boundary), boundary)


def tangential_divergence(values, jacobian, boundary: BoundaryGeom) -> np.ndarray:
    """div f - [(grad f) nu] . nu, given the full Jacobian of f at the boundary samples."""
    if jacobian is None:
        raise InvalidInputError("tangential divergence needs the full Jacobian of the field")
    values = np.asarray(values, dtype=float)
    jac = np.asarray(jacobian, dtype=float)
    if values.shape != (boundary.n, 2) or jac.shape != (boundary.n, 2, 2):
        raise InvalidInputError(
            f"field shapes {values.shape}/{jac.shape} do not match {boundary.n} boundary samples"
        )
    nu = boundary.normal
    return np.trace(jac, axis1=1, axis2=2) - np.einsum("ni,nij,nj->n", nu, jac, nu)


def normal_jacobian(boundary: BoundaryGeom) -> np.ndarray:
    """Jacobian of the normal extended constant along normal lines: K tau (x) tau."""
    tau = boundary.tangent
    return boundary.curvature[:, None, None] * np.einsum("ni,nj->nij", tau, tau)


# ---------------------------------------------------------------------------
# Volume
# ---------------------------------------------------------------------------
def volume(mesh) -> float:
    """Area of a mapped mesh from its quadrature weights."""
    return float(mesh.area())


def enclosed_area(boundary: BoundaryGeom) -> float:
    return 0.5 * boundary.integrate(np.einsum("ni,ni->n", boundary.points, boundary.normal))


def zeta(psi: MapExpr, boundary: BoundaryGeom) -> np.ndarray:
    """psi o phi^-1 at the boundary points; their preimages are the reference samples."""
    return psi(boundary.ref)


def normal_component(psi: MapExpr, boundary: BoundaryGeom) -> np.ndarray:
    return np.einsum("ni,ni->n", zeta(psi, boundary), boundary.normal)


def volume_derivative(psi: MapExpr, boundary: BoundaryGeom) -> float:
    return boundary.integrate(normal_component(psi, boundary))
