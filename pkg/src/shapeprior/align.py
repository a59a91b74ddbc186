"""Rigid alignment of deformation fields on a domain mask.

A field ``u`` describes the shape ``{x + u(x)}`` over the reference vertices.
Aligning on a mask X removes the average displacement on X and, optionally,
the rotation that best maps the masked shape points onto a target.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .mesh import DomainMask, TriangleMesh, check_field

logger = logging.getLogger(__name__)


class DegenerateConfigurationError(ValueError):
    """Point configuration does not determine a unique rotation."""


@dataclass(frozen=True)
class RigidTransform:
    """``p -> R (p - center) + center + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    center: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if (np.abs(R.T @ R - np.eye(3)).max() > 1e-10
                or abs(np.linalg.det(R) - 1.0) > 1e-10):
            raise ValueError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3), center)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.center) @ self.rotation.T + self.center + self.translation

    @property
    def angle(self) -> float:
        """Rotation angle in radians."""
        c = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.arccos(c))


def translation_average(field, mask: DomainMask) -> np.ndarray:
    """Average displacement of ``field`` over the masked vertices."""
    u = check_field(field)
    mask.check(u.shape[0])
    return u[mask.indices].mean(axis=0)


def kabsch(source, target, weights=None) -> RigidTransform:
    """Least-squares proper rigid transform taking ``source`` onto ``target``.

    The pivot is the source centroid, so the returned translation is the
    centroid difference.
    """
    P = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    Q = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if P.shape != Q.shape:
        raise ValueError(f"point sets differ in shape: {P.shape} vs {Q.shape}")
    if P.shape[0] < 3:
        raise DegenerateConfigurationError("need at least 3 point pairs")
    if weights is None:
        w = np.full(P.shape[0], 1.0 / P.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    cp = w @ P
    cq = w @ Q
    H = (P - cp).T @ ((Q - cq) * w[:, None])
    U, s, Vt = np.linalg.svd(H)
    if s[0] <= 0.0 or s[1] <= 1e-12 * s[0]:
        raise DegenerateConfigurationError(
            "cross-covariance is rank deficient; rotation is not unique")
    d = 1.0 if np.linalg.det(Vt.T @ U.T) > 0 else -1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    # Re-orthonormalise away rounding so RigidTransform's 1e-10 check holds.
    u_, _, vt_ = np.linalg.svd(R)
    R = u_ @ vt_
    return RigidTransform(R, cq - cp, cp)


def _align_points(points: np.ndarray, mask: DomainMask, target: np.ndarray,
                  rotations: bool) -> np.ndarray:
    """Move ``points`` so their masked centroid matches the target's, then rotate."""
    idx = mask.indices
    c = target[idx].mean(axis=0)
    out = points - points[idx].mean(axis=0) + c
    if rotations:
        if len(idx) < 3:
            raise DegenerateConfigurationError("rotation alignment needs >= 3 masked points")
        T = kabsch(out[idx], target[idx])
        out = (out - c) @ T.rotation.T + c
    return out


def align_field(field, mask: DomainMask, reference: TriangleMesh,
                rotations: bool = False) -> np.ndarray:
    """Align the shape ``reference + field`` to the reference on ``mask``.

    Returns the aligned field, whose average displacement on ``mask`` is zero.
    """
    u = check_field(field, reference.n_vertices)
    mask.check(reference.n_vertices)
    ref = reference.vertices
    return _align_points(ref + u, mask, ref, rotations) - ref


@dataclass
class GPAResult:
    fields: list
    iterations: int
    converged: bool
    mean_movement: float


def gpa(fields, mask: DomainMask, reference: TriangleMesh, rotations: bool = True,
        max_iter: int = 100, tol: float = 1e-6) -> GPAResult:
    """Generalized Procrustes analysis of registered fields, restricted to ``mask``.

    Every shape is repeatedly aligned to the running mean shape, whose masked
    centroid is pinned to that of the reference so all outputs have zero
    average displacement on ``mask``. Iteration stops once the mean shape
    moves less than ``tol`` (max vertex displacement).
    """
    n = reference.n_vertices
    us = [check_field(u, n) for u in fields]
    if len(us) < 2:
        raise ValueError("GPA needs at least two fields")
    mask.check(n)
    ref = reference.vertices
    c_ref = ref[mask.indices].mean(axis=0)

    shapes = [ref + u for u in us]
    mean = np.mean(shapes, axis=0)
    mean = mean - mean[mask.indices].mean(axis=0) + c_ref
    movement = np.inf
    it = 0
    aligned = shapes
    for it in range(1, max_iter + 1):
        aligned = [_align_points(s, mask, mean, rotations) for s in shapes]
        new_mean = np.mean(aligned, axis=0)
        movement = float(np.linalg.norm(new_mean - mean, axis=1).max())
        mean = new_mean
        if movement < tol:
            break
    converged = movement < tol
    if not converged:
        logger.warning("GPA did not converge in %d iterations (movement %.3g mm)",
                       max_iter, movement)
    return GPAResult([a - ref for a in aligned], it, converged, movement)
