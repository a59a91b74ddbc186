"""Synthetic registered shape families standing in for real bone data."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mesh import DomainMask, TriangleMesh


def random_rotation(rng: np.random.Generator, std: float) -> np.ndarray:
    """Rotation about a random axis by an angle drawn from N(0, std)."""
    v = rng.standard_normal(3) * std
    return rotvec_matrix(v)


def rotvec_matrix(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    theta = float(np.linalg.norm(v))
    if theta == 0.0:
        return np.eye(3)
    k = v / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * K + (1 - math.cos(theta)) * K @ K


# --- reference surfaces ----------------------------------------------------------

def tube_mesh(length: float = 100.0, radius: float = 12.0, rings: int = 25,
              around: int = 12, asymmetric: bool = True) -> TriangleMesh:
    """Open tube along z, centered at the origin.

    With ``asymmetric`` the cross-section is elliptic, the ends flare and one
    side carries a bump, so that no continuous rigid motion maps the surface
    onto itself (a plain cylinder slides and spins freely under closest-point
    fitting).
    """
    z = np.linspace(-length / 2, length / 2, rings)
    ang = 2 * np.pi * np.arange(around) / around
    zz, aa = np.meshgrid(z, ang, indexing="ij")
    if asymmetric:
        s = zz / (length / 2)
        r = radius * (0.8 + 0.3 * s ** 2)
        rx = r * (1.0 + 0.1 * s)
        ry = 0.7 * r
        bump = 0.25 * radius * np.exp(-((s + 0.6) / 0.25) ** 2) * np.clip(np.cos(aa), 0, None)
        x = (rx + bump) * np.cos(aa)
        y = ry * np.sin(aa)
    else:
        x = radius * np.cos(aa)
        y = radius * np.sin(aa)
    verts = np.stack([x, y, zz], axis=-1).reshape(-1, 3)
    verts = verts - verts.mean(axis=0)
    tris = []
    for i in range(rings - 1):
        for j in range(around):
            a = i * around + j
            b = i * around + (j + 1) % around
            c = (i + 1) * around + j
            d = (i + 1) * around + (j + 1) % around
            tris.append((a, b, d))
            tris.append((a, d, c))
    return TriangleMesh(verts, np.array(tris))


def ellipsoid_mesh(axes=(15.0, 10.0, 8.0), n_lat: int = 12, n_lon: int = 16) -> TriangleMesh:
    """UV ellipsoid without pole singularities (poles are single vertices)."""
    verts = [(0.0, 0.0, axes[2])]
    for i in range(1, n_lat):
        th = np.pi * i / n_lat
        for j in range(n_lon):
            ph = 2 * np.pi * j / n_lon
            verts.append((axes[0] * np.sin(th) * np.cos(ph), axes[1] * np.sin(th) * np.sin(ph),
                          axes[2] * np.cos(th)))
    verts.append((0.0, 0.0, -axes[2]))
    verts = np.array(verts)
    south = len(verts) - 1
    tris = []
    for j in range(n_lon):
        tris.append((0, 1 + j, 1 + (j + 1) % n_lon))
    for i in range(n_lat - 2):
        for j in range(n_lon):
            a = 1 + i * n_lon + j
            b = 1 + i * n_lon + (j + 1) % n_lon
            c = a + n_lon
            d = b + n_lon
            tris.append((a, c, d))
            tris.append((a, d, b))
    last = 1 + (n_lat - 2) * n_lon
    for j in range(n_lon):
        tris.append((last + j, south, last + (j + 1) % n_lon))
    return TriangleMesh(verts, np.array(tris))


# --- smooth random families ------------------------------------------------------

@dataclass(frozen=True)
class SyntheticFamilyConfig:
    base: str = "tube"
    n_shapes: int = 30
    kernel_scale: float = 40.0      # mm, Gaussian kernel length scale
    amplitude: float = 2.0          # mm, per-coordinate std of the smooth field
    bend_amplitude: float = 6.0     # mm, std of the quadratic bend at the tube ends
    stretch_std: float = 0.05       # relative std of the axial stretch
    translation_std: float = 5.0    # mm, rigid pose noise
    rotation_std: float = 0.1       # rad, rigid pose noise
    seed: int = 0
    rings: int = 25
    around: int = 12

    def __post_init__(self):
        if self.base not in ("tube", "ellipsoid"):
            raise ValueError(f"unknown base shape {self.base!r}")
        for name in ("kernel_scale", "amplitude", "n_shapes"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def reference(self) -> TriangleMesh:
        if self.base == "tube":
            return tube_mesh(rings=self.rings, around=self.around)
        return ellipsoid_mesh()


@dataclass
class SyntheticFamily:
    reference: TriangleMesh
    fields: list        # posed (unaligned) deformation fields
    shape_fields: list  # the same shapes before the random rigid pose
    config: SyntheticFamilyConfig


def smooth_field_sampler(points: np.ndarray, scale: float, amplitude: float, tol: float = 1e-8):
    """Low-rank factor ``F`` with ``F @ F.T`` the Gaussian-kernel covariance on ``points``."""
    d2 = ((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1)
    K = amplitude ** 2 * np.exp(-d2 / (2.0 * scale ** 2))
    w, V = np.linalg.eigh(K)
    keep = w > tol * w[-1]
    return V[:, keep] * np.sqrt(w[keep])


def generate_family(cfg: SyntheticFamilyConfig) -> SyntheticFamily:
    rng = np.random.default_rng(cfg.seed)
    ref = cfg.reference()
    pts = ref.vertices
    F = smooth_field_sampler(pts, cfg.kernel_scale, cfg.amplitude)
    extent = np.abs(pts[:, 2]).max()
    s = pts[:, 2] / extent
    centroid = pts.mean(axis=0)
    shapes, posed = [], []
    for _ in range(cfg.n_shapes):
        u = F @ rng.standard_normal((F.shape[1], 3))
        bend = rng.standard_normal(2) * cfg.bend_amplitude
        u[:, 0] += bend[0] * s ** 2
        u[:, 1] += bend[1] * s ** 2
        u[:, 2] += rng.standard_normal() * cfg.stretch_std * pts[:, 2]
        shapes.append(u)
        R = random_rotation(rng, cfg.rotation_std)
        t = rng.standard_normal(3) * cfg.translation_std
        p = (pts + u - centroid) @ R.T + centroid + t
        posed.append(p - pts)
    return SyntheticFamily(ref, posed, shapes, cfg)


def principal_axis(points: np.ndarray) -> np.ndarray:
    c = points - points.mean(axis=0)
    _, _, vt = np.linalg.svd(c, full_matrices=False)
    axis = vt[0]
    k = int(np.argmax(np.abs(axis)))
    return axis if axis[k] > 0 else -axis


def cut_mask(reference: TriangleMesh, ratio: float) -> DomainMask:
    """Observed domain: the low end along the first principal axis holding ``ratio`` of the area."""
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    if ratio == 1:
        return DomainMask.full(reference.n_vertices)
    axis = principal_axis(reference.vertices)
    tri = reference.triangles
    coord = reference.vertices[tri].mean(axis=1) @ axis
    area = reference.triangle_areas()
    order = np.argsort(coord, kind="stable")
    cum = np.cumsum(area[order])
    k = int(np.searchsorted(cum, ratio * cum[-1] - 1e-12)) + 1
    chosen = tri[order[:k]]
    return DomainMask(np.unique(chosen))


# --- hinge -----------------------------------------------------------------------

@dataclass(frozen=True)
class HingeConfig:
    arm_length: float = 10.0
    angle_mean: float = math.pi
    angle_std: float = 0.3
    points_per_arm: int = 10
    n_shapes: int = 200
    seed: int = 0
    strip_width: float = 1.0

    def __post_init__(self):
        if not self.arm_length > 0:
            raise ValueError("arm_length must be positive")
        if self.points_per_arm < 2:
            raise ValueError("points_per_arm must be >= 2")
        if self.angle_std < 0:
            raise ValueError("angle_std must be non-negative")


def _hinge_polyline(cfg: HingeConfig, beta: float) -> np.ndarray:
    """Centerline points: hinge, left arm (X, at angle beta), right arm (fixed along +x)."""
    s = cfg.arm_length * np.arange(1, cfg.points_per_arm + 1) / cfg.points_per_arm
    left = np.stack([s * math.cos(beta), s * math.sin(beta), np.zeros_like(s)], axis=1)
    right = np.stack([s, np.zeros_like(s), np.zeros_like(s)], axis=1)
    return np.vstack([np.zeros((1, 3)), left, right])


def _lift(line: np.ndarray, width: float) -> np.ndarray:
    """Duplicate every centerline point at z = 0 and z = w.

    The strip sits on one side of the plane so a half turn about an in-plane
    axis is not a near-symmetry that rigid alignment could exploit.
    """
    lo = line
    hi = line + [0.0, 0.0, width]
    return np.stack([lo, hi], axis=1).reshape(-1, 3)


def hinge_reference(cfg: HingeConfig) -> TriangleMesh:
    line = _hinge_polyline(cfg, math.pi)
    p = cfg.points_per_arm
    tris = []

    def strip(chain):
        for a, b in zip(chain[:-1], chain[1:]):
            tris.append((2 * a, 2 * b, 2 * b + 1))
            tris.append((2 * a, 2 * b + 1, 2 * a + 1))

    strip([0] + list(range(1, p + 1)))
    strip([0] + list(range(p + 1, 2 * p + 1)))
    return TriangleMesh(_lift(line, cfg.strip_width), np.array(tris))


def hinge_arm_masks(cfg: HingeConfig):
    """(X, Z): vertices of the moving left arm and of the fixed right arm, hinge excluded."""
    p = cfg.points_per_arm
    left = np.arange(1, p + 1)
    right = np.arange(p + 1, 2 * p + 1)
    to_verts = lambda idx: np.sort(np.concatenate([2 * idx, 2 * idx + 1]))
    return DomainMask(to_verts(left)), DomainMask(to_verts(right))


def generate_hinge(cfg: HingeConfig):
    """Fields relative to the straight (beta = pi) hinge, the reference, and the drawn angles."""
    rng = np.random.default_rng(cfg.seed)
    ref = hinge_reference(cfg)
    betas = cfg.angle_mean + cfg.angle_std * rng.standard_normal(cfg.n_shapes)
    fields = [_lift(_hinge_polyline(cfg, b), cfg.strip_width) - ref.vertices for b in betas]
    return fields, ref, betas


def hinge_centerline(points: np.ndarray) -> np.ndarray:
    """Centerline points (the z = 0 copy of each strip pair)."""
    return points.reshape(-1, 2, 3)[:, 0]


def hinge_parameters(points: np.ndarray, points_per_arm: int):
    """(beta, left-arm length, right-arm length) measured on a hinge shape.

    ``beta`` is the signed in-plane angle from the right arm to the left arm,
    in [0, 2 pi).
    """
    line = hinge_centerline(points)
    h = line[0]
    left = line[points_per_arm] - h
    right = line[2 * points_per_arm] - h
    cross = right[0] * left[1] - right[1] * left[0]
    beta = math.atan2(cross, float(right[:2] @ left[:2])) % (2 * math.pi)
    return beta, float(np.linalg.norm(left)), float(np.linalg.norm(right))
