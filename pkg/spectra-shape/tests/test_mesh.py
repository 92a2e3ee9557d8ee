"""
Unit tests for the reference disk mesh and its mapped curved elements.
Run with:  pytest spectra-shape/tests/ -v
"""
import pytest
import numpy as np

import sys, os
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from app.geometry import ellipse, identity
from app.errors import DiscretizationError, InvalidInputError
from app.mesh import H_MAX, VERTEX_TARGET, build_disk_mesh, dump_mesh, load_mesh, map_mesh, mesh_quality, mesh_stats


@pytest.fixture(scope="module")
def ref():
    return build_disk_mesh(0.2)


# --- Happy path ---------------------------------------------------------

def test_ring_counts(ref):
    assert ref.rings == 5
    assert ref.sectors == 6
    assert ref.n_vertices == 1 + 3 * 5 * 6
    assert ref.n_triangles == 6 * 25
    assert len(ref.boundary_vertices) == 30
    assert ref.euler_characteristic() == 1


@pytest.mark.parametrize("h", [0.5, 0.25, 0.2, 0.1, 0.05])
def test_vertex_count_tracks_target_density(h):
    mesh = build_disk_mesh(h)
    target = (VERTEX_TARGET / np.pi) * np.pi / h ** 2
    assert 0.8 <= mesh.n_vertices / target <= 1.2
    assert mesh.rings >= 2
    assert mesh.sectors >= 5
    assert mesh.euler_characteristic() == 1
    assert mesh_quality(mesh) >= 20.0


def test_coarsest_mesh_switches_to_five_sectors():
    mesh = build_disk_mesh(0.5)
    assert (mesh.rings, mesh.sectors) == (2, 5)
    assert mesh.n_vertices == 16


def test_boundary_vertices_on_unit_circle(ref):
    pts = ref.vertices[ref.boundary_vertices]
    assert np.allclose(np.linalg.norm(pts, axis=1), 1.0)
    assert np.allclose(ref.boundary_theta, 2 * np.pi * np.arange(30) / 30)


def test_triangles_counter_clockwise(ref):
    p = ref.vertices[ref.triangles]
    a, b = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    signed = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    assert signed.min() > 0
    assert mesh_quality(ref) >= 20.0


def test_mesh_is_deterministic():
    a, b = build_disk_mesh(0.25), build_disk_mesh(0.25)
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.triangles, b.triangles)


@pytest.mark.parametrize("degree", [2, 3])
def test_curved_elements_recover_disk_area(ref, degree):
    mm = map_mesh(ref, identity(), degree)
    assert mm.area() == pytest.approx(np.pi, rel=5e-4)


def test_area_error_drops_under_refinement():
    coarse, fine = (abs(map_mesh(build_disk_mesh(h), identity(), 2).area() - np.pi) for h in (0.2, 0.1))
    assert fine < 1e-3 * np.pi
    assert 3.0 * fine <= coarse


def test_linear_map_moves_nodes(ref):
    mm = map_mesh(ref, ellipse(1.2), 2)
    assert mm.area() == pytest.approx(np.pi, rel=5e-4)
    assert np.allclose(mm.node_phys[:, 0], 1.2 * mm.node_ref[:, 0])
    stats = mesh_stats(mm)
    assert stats["vertices"] == ref.n_vertices
    assert stats["nodes"] == mm.n_nodes


def test_dump_and_load(ref, tmp_path):
    path = tmp_path / "disk.mesh"
    dump_mesh(ref, str(path))
    back = load_mesh(str(path))
    assert np.array_equal(back.triangles, ref.triangles)
    assert np.allclose(back.vertices, ref.vertices, rtol=0, atol=0)
    assert (back.rings, back.sectors) == (ref.rings, ref.sectors)
    assert back.h == pytest.approx(ref.h, rel=0.1)


# --- Failure cases ------------------------------------------------------

@pytest.mark.parametrize("h", [0.0, 1e-4, H_MAX * 2])
def test_mesh_size_out_of_range(h):
    with pytest.raises(InvalidInputError):
        build_disk_mesh(h)


def test_load_rejects_foreign_file(tmp_path):
    path = tmp_path / "bad.mesh"
    path.write_text("OFF\n3 1 0\n")
    with pytest.raises(InvalidInputError):
        load_mesh(str(path))


def test_load_rejects_missing_file(tmp_path):
    with pytest.raises(InvalidInputError):
        load_mesh(str(tmp_path / "absent.mesh"))


def test_load_rejects_clockwise_triangle(ref, tmp_path):
    path = tmp_path / "flipped.mesh"
    dump_mesh(ref, str(path))
    lines = path.read_text().splitlines()
    first_tri = 2 + ref.n_vertices + 1
    i, j, k = lines[first_tri].split()
    lines[first_tri] = f"{i} {k} {j}"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DiscretizationError):
        load_mesh(str(path))
