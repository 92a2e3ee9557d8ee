import logging
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import List, Tuple

import numpy as np

from .errors import DiscretizationError, InvalidInputError
from .geometry import MapExpr

logger = logging.getLogger(__name__)

H_MIN, H_MAX = 0.005, 0.5
# vertex count stays within 20% of VERTEX_TARGET / h**2 = (4 / pi) * pi / h**2
VERTEX_TARGET = 4.0
SECTORS = (6, 5, 7, 8)
# s = 6 is kept while its count misses the target by less than this (log scale)
PREFERRED_MISS = 0.15

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
LOCAL_EDGES = np.array([[0, 1], [1, 2], [2, 0]])


# ---------------------------------------------------------------------------
# Reference element
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class LagrangeTriangle:
    degree:    int
    nodes:     np.ndarray   # (nb, 2): vertices, edge nodes per local edge, interior
    exponents: np.ndarray   # (nb, 2) monomial powers
    coef:      np.ndarray   # (nb, nb) monomial -> nodal basis

    @property
    def size(self) -> int:
        return len(self.nodes)

    def evaluate(self, xi, order: int = 1) -> List[np.ndarray]:
        """Basis values and derivatives at ``xi`` (N, 2): shapes (N, nb), (N, nb, 2), ..."""
        xi = np.asarray(xi, dtype=float)
        x, y = xi[:, 0], xi[:, 1]
        out = []
        for r in range(order + 1):
            arr = np.zeros((len(xi), self.size) + (2,) * r)
            for idx in np.ndindex(*((2,) * r)):
                dx = idx.count(0)
                dy = r - dx
                mono = np.zeros((len(xi), len(self.exponents)))
                for m, (a, b) in enumerate(self.exponents):
                    if a < dx or b < dy:
                        continue
                    fac = _falling(a, dx) * _falling(b, dy)
                    mono[:, m] = fac * x ** (a - dx) * y ** (b - dy)
                arr[(slice(None), slice(None)) + idx] = mono @ self.coef
            out.append(arr)
        return out


def _falling(a: int, k: int) -> float:
    out = 1.0
    for j in range(k):
        out *= a - j
    return out


@lru_cache(maxsize=None)
def lagrange_triangle(degree: int) -> LagrangeTriangle:
    if degree not in (1, 2, 3):
        raise InvalidInputError(f"Lagrange degree {degree} not supported")
    nodes = [REF_VERTICES[i] for i in range(3)]
    for a, b in LOCAL_EDGES:
        for k in range(1, degree):
            nodes.append(REF_VERTICES[a] + (k / degree) * (REF_VERTICES[b] - REF_VERTICES[a]))
    if degree == 3:
        nodes.append(np.array([1.0 / 3.0, 1.0 / 3.0]))
    nodes = np.array(nodes)
    exps = np.array([(a, t - a) for t in range(degree + 1) for a in range(t, -1, -1)])
    vander = np.stack([nodes[:, 0] ** a * nodes[:, 1] ** b for a, b in exps], axis=1)
    return LagrangeTriangle(degree, nodes, exps, np.linalg.inv(vander))


@lru_cache(maxsize=None)
def triangle_quadrature(order: int = 6):
    """Collapsed Gauss-Legendre rule on the reference triangle, exact to degree 2*order - 2."""
    x, w = np.polynomial.legendre.leggauss(order)
    u, wu = 0.5 * (x + 1.0), 0.5 * w
    U, V = np.meshgrid(u, u, indexing="ij")
    WU, WV = np.meshgrid(wu, wu, indexing="ij")
    pts = np.stack([U.ravel(), (V * (1.0 - U)).ravel()], axis=1)
    return pts, (WU * WV * (1.0 - U)).ravel()


@lru_cache(maxsize=None)
def edge_quadrature(order: int = 4):
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w


def edge_xi(local_edge: np.ndarray, from_lo: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Reference points on local edges, parametrized from the lower global vertex."""
    a = REF_VERTICES[LOCAL_EDGES[local_edge, 0]]
    b = REF_VERTICES[LOCAL_EDGES[local_edge, 1]]
    s = np.where(from_lo[:, None], t[None, :], 1.0 - t[None, :])
    return a[:, None, :] + s[..., None] * (b - a)[:, None, :]


# ---------------------------------------------------------------------------
# Reference disk mesh
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class RefMesh:
    vertices:          np.ndarray
    triangles:         np.ndarray
    boundary_edges:    np.ndarray   # (nb, 2) vertex ids, counter-clockwise
    boundary_angles:   np.ndarray   # (nb, 2) theta_i, theta_j
    boundary_vertices: np.ndarray   # in angle order
    boundary_theta:    np.ndarray
    h:                 float
    rings:             int
    sectors:           int = 6   # vertices on the first ring

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def topology(self) -> dict:
        """Unique edges, triangle -> edge map and edge -> (element, local edge) map."""
        tri = self.triangles
        nt = len(tri)
        pairs = np.sort(tri[:, LOCAL_EDGES], axis=2).reshape(-1, 2)
        edges, inverse, counts = np.unique(pairs, axis=0, return_inverse=True, return_counts=True)
        inverse = inverse.reshape(-1)
        order = np.argsort(inverse, kind="stable")
        starts = np.searchsorted(inverse[order], np.arange(len(edges)))
        first = order[starts]
        second = np.where(counts == 2, order[np.minimum(starts + 1, len(order) - 1)], -1)
        elems = np.stack([np.where(first >= 0, first // 3, -1), np.where(second >= 0, second // 3, -1)], axis=1)
        local = np.stack([first % 3, np.where(second >= 0, second % 3, -1)], axis=1)
        return {
            "edges": edges,
            "tri_edges": inverse.reshape(nt, 3),
            "edge_elems": elems,
            "edge_local": local,
            "edge_count": counts,
        }

    @cached_property
    def vertex_elements(self) -> List[np.ndarray]:
        owners = [[] for _ in range(self.n_vertices)]
        for e, tri in enumerate(self.triangles):
            for v in tri:
                owners[v].append(e)
        return [np.array(o, dtype=int) for o in owners]

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.topology["edges"]) + self.n_triangles


def _layout(h: float) -> Tuple[int, int]:
    """(rings, sectors) whose vertex count 1 + s R (R + 1) / 2 is nearest VERTEX_TARGET / h^2."""
    target = VERTEX_TARGET / h ** 2
    best = None
    for s in SECTORS:
        # nearest R for this s, from s R^2 / 2 + s R / 2 + 1 = target
        r0 = int(np.floor(0.5 * (-1.0 + np.sqrt(1.0 + 8.0 * (target - 1.0) / s))))
        for rings in (max(2, r0), max(2, r0 + 1)):
            miss = abs(np.log((1 + s * rings * (rings + 1) // 2) / target))
            key = (s != 6 or miss > PREFERRED_MISS, miss, abs(s - 6))
            if best is None or key < best[0]:
                best = (key, rings, s)
    return best[1], best[2]


def build_disk_mesh(h: float) -> RefMesh:
    """
    Concentric-ring triangulation of the unit disk.

    Ring k carries s k vertices at angles 2 pi j / (s k) with s = 6 unless
    another s in 5..8 lands closer to the vertex target; neighbouring rings are
    stitched by merging their angle sequences, so the mesh keeps s-fold symmetry.
    Output depends on h only.
    """
    if not (H_MIN <= h <= H_MAX):
        raise InvalidInputError(f"mesh size h={h} outside [{H_MIN}, {H_MAX}]")
    rings, s = _layout(h)
    counts = [1] + [s * k for k in range(1, rings + 1)]
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    verts = [np.zeros(2)]
    for k in range(1, rings + 1):
        ang = 2.0 * np.pi * np.arange(s * k) / (s * k)
        verts.append((k / rings) * np.stack([np.cos(ang), np.sin(ang)], axis=1))
    verts = np.vstack(verts)

    tris = [(0, 1 + j, 1 + (j + 1) % s) for j in range(s)]
    for k in range(2, rings + 1):
        si, m = starts[k - 1], counts[k - 1]
        so, M = starts[k], counts[k]
        i = j = 0
        while i < m or j < M:
            next_in = (i + 1) / m
            next_out = (j + 1) / M
            if j < M and (i >= m or next_out <= next_in + 1e-12):
                tris.append((si + i % m, so + j % M, so + (j + 1) % M))
                j += 1
            else:
                tris.append((si + i % m, so + j % M, si + (i + 1) % m))
                i += 1
    tris = np.array(tris, dtype=int)
    tris = _orient(verts, tris)

    so, M = starts[rings], counts[rings]
    bverts = so + np.arange(M)
    btheta = 2.0 * np.pi * np.arange(M) / M
    bedges = np.stack([bverts, np.roll(bverts, -1)], axis=1)
    bangles = np.stack([btheta, btheta + 2.0 * np.pi / M], axis=1)

    ref = RefMesh(verts, tris, bedges, bangles, bverts, btheta, float(h), rings, s)
    logger.info(f"Disk mesh h={h}: {ref.n_vertices} vertices, {ref.n_triangles} triangles, "
                f"{rings} rings of {s}k")
    return ref


def _orient(verts: np.ndarray, tris: np.ndarray) -> np.ndarray:
    p0, p1, p2 = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    signed = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    flip = signed < 0
    tris = tris.copy()
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


def mesh_quality(ref: RefMesh) -> float:
    """Smallest interior angle in degrees."""
    p = ref.vertices[ref.triangles]
    worst = 180.0
    for i in range(3):
        a = p[:, (i + 1) % 3] - p[:, i]
        b = p[:, (i + 2) % 3] - p[:, i]
        cos = np.einsum("ni,ni->n", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
        worst = min(worst, float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))).min()))
    return worst


def dump_mesh(ref: RefMesh, path: str) -> None:
    lines = ["MESH v1", str(ref.n_vertices)]
    lines += [f"{x:.17g} {y:.17g}" for x, y in ref.vertices]
    lines.append(str(ref.n_triangles))
    lines += [f"{i} {j} {k}" for i, j, k in ref.triangles]
    lines.append(str(len(ref.boundary_edges)))
    lines += [
        f"{i} {j} {ti:.17g} {tj:.17g}"
        for (i, j), (ti, tj) in zip(ref.boundary_edges, ref.boundary_angles)
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    logger.info(f"Mesh written to {path}")


def load_mesh(path: str) -> RefMesh:
    """Read a MESH v1 file written by dump_mesh. The mesh must triangulate the unit disk."""
    try:
        with open(path) as fh:
            rows = [line.split() for line in fh if line.strip()]
    except OSError as exc:
        raise InvalidInputError(f"cannot read mesh file {path}: {exc}") from exc
    if not rows or rows[0] != ["MESH", "v1"]:
        raise InvalidInputError(f"{path} is not a MESH v1 file")
    try:
        pos = 1
        nv = int(rows[pos][0]); pos += 1
        verts = np.array(rows[pos : pos + nv], dtype=float).reshape(nv, 2); pos += nv
        nt = int(rows[pos][0]); pos += 1
        tris = np.array(rows[pos : pos + nt], dtype=int).reshape(nt, 3); pos += nt
        nb = int(rows[pos][0]); pos += 1
        bnd = np.array(rows[pos : pos + nb], dtype=float).reshape(nb, 4)
    except (IndexError, ValueError) as exc:
        raise InvalidInputError(f"{path}: malformed MESH v1 body ({exc})") from exc

    if tris.min() < 0 or tris.max() >= nv:
        raise InvalidInputError(f"{path}: triangle references a vertex outside 0..{nv - 1}")
    bedges = bnd[:, :2].astype(int)
    bverts = bedges[:, 0]
    if not np.allclose(np.linalg.norm(verts[bverts], axis=1), 1.0, atol=1e-12):
        raise InvalidInputError(f"{path}: boundary vertices are not on the unit circle")
    p = verts[tris]
    signed = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    if signed.min() <= 0:
        raise DiscretizationError(f"{path}: {int((signed <= 0).sum())} triangles are degenerate or clockwise")

    radii = np.unique(np.round(np.linalg.norm(verts, axis=1), 12))
    rings = int((radii > 0).sum())
    ref = RefMesh(verts, tris, bedges, bnd[:, 2:], bverts, bnd[:, 2],
                  float(np.sqrt(VERTEX_TARGET / nv)), rings, max(1, nb // max(rings, 1)))
    logger.info(f"Mesh read from {path}: {nv} vertices, {nt} triangles")
    return ref


# ---------------------------------------------------------------------------
# Mapped mesh
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ElementJets:
    phi:  np.ndarray   # (E, q, nb)
    dphi: np.ndarray   # (E, q, nb, 2) reference gradients
    d2phi: np.ndarray  # (E, q, nb, 2, 2)
    X:    np.ndarray   # (E, q, 2) reference-disk points
    Y:    np.ndarray   # (E, q, 2) physical points
    DF:   np.ndarray   # (E, q, 2, 2)
    D2F:  np.ndarray   # (E, q, 2, 2, 2)
    det:  np.ndarray   # (E, q)

    @cached_property
    def inv(self) -> np.ndarray:
        return np.linalg.inv(self.DF)

    @cached_property
    def grad(self) -> np.ndarray:
        """Physical basis gradients (E, q, nb, 2)."""
        return np.einsum("eqka,eqai->eqki", self.dphi, self.inv)

    @cached_property
    def hess(self) -> np.ndarray:
        """Physical basis Hessians (E, q, nb, 2, 2)."""
        corrected = self.d2phi - np.einsum("eqkm,eqmab->eqkab", self.grad, self.D2F)
        return np.einsum("eqai,eqbj,eqkab->eqkij", self.inv, self.inv, corrected)


@dataclass(frozen=True)
class MappedMesh:
    ref:         RefMesh
    map:         MapExpr
    degree:      int
    basis:       LagrangeTriangle
    elem_nodes:  np.ndarray   # (nt, nb) global node ids
    node_ref:    np.ndarray   # node positions in the reference disk
    node_phys:   np.ndarray
    boundary_nodes: np.ndarray
    boundary_node_theta: np.ndarray
    quad_weights: np.ndarray  # (nt, q) physical weights
    jets:        ElementJets

    @property
    def n_nodes(self) -> int:
        return len(self.node_ref)

    @property
    def vertices(self) -> np.ndarray:
        return self.node_phys[: self.ref.n_vertices]

    def area(self) -> float:
        return float(self.quad_weights.sum())

    def element_jets(self, elems: np.ndarray, xi: np.ndarray) -> ElementJets:
        return element_geometry(self.map, self.basis, self.node_ref[self.elem_nodes[elems]], xi)


def element_geometry(mapping: MapExpr, basis: LagrangeTriangle, geo_nodes: np.ndarray, xi: np.ndarray) -> ElementJets:
    """
    Geometric factors of F = phi o G at reference points ``xi``.

    ``geo_nodes`` (E, nb, 2) are the element nodes in the reference disk, so G
    is the isoparametric element map; ``xi`` is (q, 2) shared or (E, q, 2).
    """
    E, nb = geo_nodes.shape[:2]
    if xi.ndim == 2:
        xi = np.broadcast_to(xi, (E,) + xi.shape)
    q = xi.shape[1]
    phi, dphi, d2phi = (a.reshape((E, q) + a.shape[1:]) for a in basis.evaluate(xi.reshape(-1, 2), 2))

    X = np.einsum("eqk,ekd->eqd", phi, geo_nodes)
    DG = np.einsum("eqka,ekd->eqda", dphi, geo_nodes)
    D2G = np.einsum("eqkab,ekd->eqdab", d2phi, geo_nodes)

    Y, Dm, D2m = mapping.derivatives(X.reshape(-1, 2), 2)
    Y = Y.reshape(E, q, 2)
    Dm = Dm.reshape(E, q, 2, 2)
    D2m = D2m.reshape(E, q, 2, 2, 2)

    DF = np.einsum("eqij,eqja->eqia", Dm, DG)
    D2F = np.einsum("eqijk,eqja,eqkb->eqiab", D2m, DG, DG) + np.einsum("eqij,eqjab->eqiab", Dm, D2G)
    det = DF[..., 0, 0] * DF[..., 1, 1] - DF[..., 0, 1] * DF[..., 1, 0]
    return ElementJets(phi, dphi, d2phi, X, Y, DF, D2F, det)


def _number_nodes(ref: RefMesh, degree: int):
    topo = ref.topology
    tri, edges = ref.triangles, topo["edges"]
    nv, nt, ne = ref.n_vertices, ref.n_triangles, len(edges)
    per_edge = degree - 1
    basis = lagrange_triangle(degree)

    elem_nodes = np.empty((nt, basis.size), dtype=int)
    elem_nodes[:, :3] = tri
    for l, (a, b) in enumerate(LOCAL_EDGES):
        g = topo["tri_edges"][:, l]
        forward = tri[:, a] < tri[:, b]
        for k in range(per_edge):
            kk = np.where(forward, k, per_edge - 1 - k)
            elem_nodes[:, 3 + l * per_edge + k] = nv + g * per_edge + kk
    n_nodes = nv + ne * per_edge
    if degree == 3:
        elem_nodes[:, 9] = n_nodes + np.arange(nt)
        n_nodes += nt

    verts = ref.vertices
    node_ref = np.zeros((n_nodes, 2))
    node_ref[:nv] = verts
    on_boundary = topo["edge_count"] == 1
    lo, hi = edges[:, 0], edges[:, 1]
    ang_lo = np.arctan2(verts[lo, 1], verts[lo, 0])
    sweep = (np.arctan2(verts[hi, 1], verts[hi, 0]) - ang_lo + np.pi) % (2.0 * np.pi) - np.pi
    for k in range(per_edge):
        s = (k + 1) / degree
        straight = (1.0 - s) * verts[lo] + s * verts[hi]
        arc = np.stack([np.cos(ang_lo + s * sweep), np.sin(ang_lo + s * sweep)], axis=1)
        node_ref[nv + np.arange(ne) * per_edge + k] = np.where(on_boundary[:, None], arc, straight)
    if degree == 3:
        node_ref[nv + ne * per_edge :] = verts[tri].mean(axis=1)

    bnd_edge_ids = np.nonzero(on_boundary)[0]
    bnodes = np.concatenate(
        [ref.boundary_vertices] + [nv + bnd_edge_ids * per_edge + k for k in range(per_edge)]
    )
    btheta = np.mod(np.arctan2(node_ref[bnodes, 1], node_ref[bnodes, 0]), 2.0 * np.pi)
    order = np.argsort(btheta, kind="stable")
    return elem_nodes, node_ref, bnodes[order], btheta[order]


def map_mesh(ref: RefMesh, mapping: MapExpr, degree: int = 3) -> MappedMesh:
    """Isoparametric mesh of phi(disk); connectivity is that of ``ref`` for every map."""
    basis = lagrange_triangle(degree)
    elem_nodes, node_ref, bnodes, btheta = _number_nodes(ref, degree)
    xi, w = triangle_quadrature()
    jets = element_geometry(mapping, basis, node_ref[elem_nodes], xi)

    bad = jets.det <= 0
    if bad.any():
        e = int(np.nonzero(bad.any(axis=1))[0][0])
        raise DiscretizationError(
            f"non-positive Jacobian (det={jets.det[e].min():.3e}) in element {e} "
            f"with vertices {ref.triangles[e].tolist()}"
        )

    mm = MappedMesh(
        ref=ref, map=mapping, degree=degree, basis=basis,
        elem_nodes=elem_nodes, node_ref=node_ref, node_phys=mapping(node_ref),
        boundary_nodes=bnodes, boundary_node_theta=btheta,
        quad_weights=jets.det * w[None, :], jets=jets,
    )
    logger.debug(f"Mapped mesh degree {degree}: {mm.n_nodes} nodes, area {mm.area():.10f}")
    return mm


def mesh_stats(mm: MappedMesh) -> dict:
    return {
        "vertices": mm.ref.n_vertices,
        "triangles": mm.ref.n_triangles,
        "nodes": mm.n_nodes,
        "h": mm.ref.h,
        "min_angle_deg": round(mesh_quality(mm.ref), 6),
        "area": mm.area(),
    }
