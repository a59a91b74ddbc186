import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from shapeprior.mesh import (DomainMask, MeshFormatError, MeshValidationError, TriangleMesh,
                             check_field, load_mask, load_mesh, mesh_to_ply, parse_ply,
                             save_mask, save_mesh)

from conftest import random_mesh

MINIMAL = """ply
format ascii 1.0
element vertex 3
property float x
property float y
property float z
element face 1
property list uchar int vertex_indices
end_header
0 0 0
1 0 0
0 1 0
3 0 1 2
"""


def unit_cube():
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    faces = [(0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5), (0, 4, 5), (0, 5, 1),
             (2, 3, 7), (2, 7, 6), (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3)]
    return TriangleMesh(v, np.array(faces))


def test_minimal_ply(tmp_path):
    p = tmp_path / "m.ply"
    p.write_text(MINIMAL)
    m = load_mesh(p)
    assert m.n_vertices == 3 and m.triangles.shape == (1, 3)


def test_out_of_range_face_index():
    text = MINIMAL.replace("element vertex 3", "element vertex 4").replace(
        "0 1 0\n", "0 1 0\n1 1 1\n").replace("3 0 1 2", "3 0 1 99")
    with pytest.raises(MeshValidationError):
        parse_ply(text)


def test_nan_vertex_rejected():
    with pytest.raises(MeshValidationError):
        parse_ply(MINIMAL.replace("1 0 0\n", "nan 0 0\n"))


@pytest.mark.parametrize("bad", [
    MINIMAL.replace("ply\n", "plx\n"),
    MINIMAL.replace("format ascii 1.0", "format binary_little_endian 1.0"),
    MINIMAL.replace("0 1 0\n3 0 1 2\n", "0 1\n3 0 1 2\n"),
    MINIMAL.replace("end_header\n", ""),
])
def test_malformed_ply(bad):
    with pytest.raises(MeshFormatError):
        parse_ply(bad)


def test_too_few_vertices():
    with pytest.raises(MeshValidationError):
        TriangleMesh(np.zeros((2, 3)), np.zeros((0, 3), dtype=int))


def test_cube_writes_8_vertices_12_faces():
    lines = mesh_to_ply(unit_cube()).splitlines()
    body = lines[lines.index("end_header") + 1:]
    assert len(body) == 20
    assert sum(1 for l in body if l.startswith("3 ")) >= 12
    assert "element vertex 8" in lines and "element face 12" in lines


def test_points_only_mesh(tmp_path):
    m = TriangleMesh(np.eye(3), np.zeros((0, 3), dtype=int))
    save_mesh(m, tmp_path / "p.ply")
    text = (tmp_path / "p.ply").read_text()
    assert "element face 0" in text
    assert load_mesh(tmp_path / "p.ply") == m


@given(st.integers(0, 2 ** 31 - 1))
def test_round_trip_bit_exact(seed):
    rng = np.random.default_rng(seed)
    m = random_mesh(rng)
    # include awkward magnitudes
    v = m.vertices * 10.0 ** rng.integers(-8, 8, size=(m.n_vertices, 1))
    m = m.with_vertices(v)
    back = parse_ply(mesh_to_ply(m))
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.triangles, m.triangles)


def test_save_load_save_byte_identical(tmp_path, rng):
    m = random_mesh(rng)
    save_mesh(m, tmp_path / "a.ply")
    save_mesh(load_mesh(tmp_path / "a.ply"), tmp_path / "b.ply")
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()


def test_load_mask(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("0\n1\n2\n")
    assert np.array_equal(load_mask(p, 10).indices, [0, 1, 2])
    p.write_text("5\n5\n")
    with pytest.raises(MeshValidationError):
        load_mask(p, 10)
    p.write_text("12\n")
    with pytest.raises(MeshValidationError):
        load_mask(p, 10)
    p.write_text("")
    with pytest.raises(MeshValidationError):
        load_mask(p, 10)


def test_mask_round_trip(tmp_path):
    m = DomainMask(np.array([1, 4, 7]))
    save_mask(m, tmp_path / "m.txt")
    assert load_mask(tmp_path / "m.txt", 8) == m


def test_mask_invariants():
    with pytest.raises(MeshValidationError):
        DomainMask(np.array([], dtype=int))
    with pytest.raises(MeshValidationError):
        DomainMask(np.array([3, 1]))
    m = DomainMask.from_indices([3, 1], 5)
    assert np.array_equal(m.indices, [1, 3])
    assert np.array_equal(m.coordinate_rows(), [3, 4, 5, 9, 10, 11])
    assert m.complement(5) == DomainMask(np.array([0, 2, 4]))
    assert DomainMask.full(5).complement(5) is None


def test_check_field_length():
    with pytest.raises(MeshValidationError):
        check_field(np.zeros((4, 3)), 5)
    assert check_field(np.zeros(15), 5).shape == (5, 3)


def test_submesh_keeps_interior_triangles():
    cube = unit_cube()
    mask = DomainMask(np.array([0, 1, 2, 3]))
    sub = cube.submesh(mask)
    assert sub.n_vertices == 4
    assert np.array_equal(sub.vertices, cube.vertices[:4])
    assert len(sub.triangles) == 2


@given(arrays(np.float64, (5, 3), elements=st.floats(-1e3, 1e3)))
def test_area_nonnegative(v):
    m = TriangleMesh(v, np.array([[0, 1, 2], [2, 3, 4]]))
    assert np.all(m.triangle_areas() >= 0)
