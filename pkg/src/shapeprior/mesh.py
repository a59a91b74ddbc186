"""Triangle meshes, domain masks and ASCII PLY / mask file I/O.

Registered meshes share vertex count and ordering, so a deformation field is
simply an ``(N, 3)`` array of displacements indexed like the reference
vertices.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np


class MeshFormatError(ValueError):
    """Malformed PLY header or body."""


class MeshValidationError(ValueError):
    """Geometry violates a mesh or mask invariant."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Vertex positions (mm) plus triangle index triples."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.array(self.triangles, dtype=np.int64).reshape(-1, 3)
        if v.shape[0] < 3:
            raise MeshValidationError(f"need at least 3 vertices, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise MeshValidationError("vertex coordinates contain NaN or Inf")
        if t.size and (t.min() < 0 or t.max() >= v.shape[0]):
            raise MeshValidationError(
                f"triangle index out of range for {v.shape[0]} vertices")
        object.__setattr__(self, "vertices", _readonly(v))
        object.__setattr__(self, "triangles", _readonly(t))

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    def with_vertices(self, vertices) -> "TriangleMesh":
        return TriangleMesh(vertices, self.triangles)

    def deformed(self, field) -> "TriangleMesh":
        """Mesh whose vertices are ``reference + field``."""
        return TriangleMesh(self.vertices + check_field(field, self.n_vertices),
                            self.triangles)

    def triangle_areas(self) -> np.ndarray:
        if not len(self.triangles):
            return np.zeros(0)
        p = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)

    def submesh(self, mask: "DomainMask") -> "TriangleMesh":
        """Triangles whose three corners all lie in ``mask``, re-indexed."""
        keep = np.zeros(self.n_vertices, dtype=bool)
        keep[mask.indices] = True
        remap = np.full(self.n_vertices, -1, dtype=np.int64)
        remap[mask.indices] = np.arange(len(mask))
        tri = self.triangles[keep[self.triangles].all(axis=1)] if len(self.triangles) else self.triangles
        return TriangleMesh(self.vertices[mask.indices], remap[tri])

    def __eq__(self, other):
        if not isinstance(other, TriangleMesh):
            return NotImplemented
        return (np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.triangles, other.triangles))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class DomainMask:
    """Sorted, duplicate-free vertex indices selecting a subdomain X of the reference."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        if idx.size == 0:
            raise MeshValidationError("domain mask is empty")
        if idx.min() < 0:
            raise MeshValidationError("negative mask index")
        if np.any(np.diff(idx) <= 0):
            raise MeshValidationError("mask indices must be sorted and unique")
        object.__setattr__(self, "indices", _readonly(idx.copy()))

    @classmethod
    def from_indices(cls, indices, n: int | None = None) -> "DomainMask":
        """Build from arbitrary indices; duplicates are rejected, order is not."""
        idx = np.asarray(indices, dtype=np.int64).ravel()
        uniq = np.unique(idx)
        if uniq.size != idx.size:
            raise MeshValidationError("duplicate index in mask")
        mask = cls(uniq)
        if n is not None:
            mask.check(n)
        return mask

    @classmethod
    def full(cls, n: int) -> "DomainMask":
        return cls(np.arange(n))

    @classmethod
    def from_bool(cls, flags) -> "DomainMask":
        return cls(np.flatnonzero(np.asarray(flags, dtype=bool)))

    def check(self, n: int) -> "DomainMask":
        if self.indices[-1] >= n:
            raise MeshValidationError(
                f"mask index {self.indices[-1]} out of range for {n} vertices")
        return self

    def is_full(self, n: int) -> bool:
        return len(self) == n

    def to_bool(self, n: int) -> np.ndarray:
        flags = np.zeros(n, dtype=bool)
        flags[self.indices] = True
        return flags

    def complement(self, n: int) -> "DomainMask | None":
        rest = np.flatnonzero(~self.to_bool(n))
        return DomainMask(rest) if rest.size else None

    def coordinate_rows(self) -> np.ndarray:
        """Rows of an interleaved ``3N`` vector belonging to the masked vertices."""
        return (3 * self.indices[:, None] + np.arange(3)).ravel()

    def __len__(self):
        return self.indices.size

    def __eq__(self, other):
        if not isinstance(other, DomainMask):
            return NotImplemented
        return np.array_equal(self.indices, other.indices)

    __hash__ = None


def check_field(field, n: int | None = None) -> np.ndarray:
    """Coerce a deformation field to a finite ``(N, 3)`` float array."""
    u = np.asarray(field, dtype=np.float64)
    if u.ndim == 1:
        if u.size % 3:
            raise MeshValidationError("flat field length is not a multiple of 3")
        u = u.reshape(-1, 3)
    if u.ndim != 2 or u.shape[1] != 3:
        raise MeshValidationError(f"field must be (N, 3), got {u.shape}")
    if n is not None and u.shape[0] != n:
        raise MeshValidationError(f"field has {u.shape[0]} vectors, expected {n}")
    return u


# --- PLY -------------------------------------------------------------------

def _format_float(x: float) -> str:
    return format(float(x), ".17g")


def mesh_to_ply(mesh: TriangleMesh) -> str:
    out = io.StringIO()
    out.write("ply\nformat ascii 1.0\n")
    out.write(f"element vertex {mesh.n_vertices}\n")
    out.write("property double x\nproperty double y\nproperty double z\n")
    out.write(f"element face {len(mesh.triangles)}\n")
    out.write("property list uchar int vertex_indices\n")
    out.write("end_header\n")
    for x, y, z in mesh.vertices:
        out.write(f"{_format_float(x)} {_format_float(y)} {_format_float(z)}\n")
    for a, b, c in mesh.triangles:
        out.write(f"3 {a} {b} {c}\n")
    return out.getvalue()


def parse_ply(text: str) -> TriangleMesh:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshFormatError("missing 'ply' magic line")
    elements: list[list] = []  # [name, count, [property names]]
    fmt = None
    i = 1
    while True:
        if i >= len(lines):
            raise MeshFormatError("missing end_header")
        tok = lines[i].split()
        i += 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element":
            if len(tok) != 3:
                raise MeshFormatError(f"bad element line: {lines[i - 1]!r}")
            try:
                elements.append([tok[1], int(tok[2]), []])
            except ValueError:
                raise MeshFormatError(f"bad element count: {lines[i - 1]!r}") from None
        elif tok[0] == "property":
            if not elements:
                raise MeshFormatError("property before element")
            elements[-1][2].append(tok[-1])
        else:
            raise MeshFormatError(f"unexpected header line: {lines[i - 1]!r}")
    if fmt != "ascii":
        raise MeshFormatError(f"only ASCII PLY is supported, got format {fmt!r}")

    body = [ln for ln in lines[i:] if ln.strip()]
    pos = 0
    vertices = None
    faces: list = []
    for name, count, props in elements:
        if pos + count > len(body):
            raise MeshFormatError(f"body truncated in element {name!r}")
        chunk = body[pos:pos + count]
        pos += count
        if name == "vertex":
            try:
                cols = [props.index(c) for c in ("x", "y", "z")]
            except ValueError:
                raise MeshFormatError("vertex element lacks x/y/z properties") from None
            try:
                rows = [ln.split() for ln in chunk]
                vertices = np.array([[float(r[c]) for c in cols] for r in rows],
                                    dtype=np.float64).reshape(-1, 3)
            except (ValueError, IndexError):
                raise MeshFormatError("malformed vertex line") from None
        elif name == "face":
            for ln in chunk:
                try:
                    nums = [int(v) for v in ln.split()]
                except ValueError:
                    raise MeshFormatError(f"malformed face line: {ln!r}") from None
                if not nums or nums[0] != len(nums) - 1:
                    raise MeshFormatError(f"face count mismatch: {ln!r}")
                if nums[0] != 3:
                    raise MeshFormatError("only triangular faces are supported")
                faces.append(nums[1:])
    if pos != len(body):
        raise MeshFormatError("trailing data after last element")
    if vertices is None:
        raise MeshFormatError("no vertex element")
    return TriangleMesh(vertices, np.array(faces, dtype=np.int64).reshape(-1, 3))


def load_mesh(path) -> TriangleMesh:
    with open(path, "r", encoding="ascii") as fh:
        return parse_ply(fh.read())


def save_mesh(mesh: TriangleMesh, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(mesh_to_ply(mesh))


# --- masks -----------------------------------------------------------------

def load_mask(path, n: int) -> DomainMask:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    values = []
    for ln in text.split("\n"):
        ln = ln.strip()
        if not ln:
            continue
        try:
            values.append(int(ln))
        except ValueError:
            raise MeshValidationError(f"not an integer: {ln!r}") from None
    if not values:
        raise MeshValidationError(f"mask file {os.fspath(path)!r} is empty")
    if any(v < 0 or v >= n for v in values):
        bad = next(v for v in values if v < 0 or v >= n)
        raise MeshValidationError(f"mask index {bad} out of range for {n} vertices")
    return DomainMask.from_indices(values, n)


def save_mask(mask: DomainMask, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("".join(f"{i}\n" for i in mask.indices))
