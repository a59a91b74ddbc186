"""Realign an existing low-rank model to a target-specific alignment on X.

The projector removes from every deformation the least-squares fit, on the
masked vertices, of a rigid-motion basis ``M``: three normalized translation
vectors and, optionally, three normalized linearized rotations about axes
through the masked centroid. Only ``M`` restricted to the masked rows enters
the fit, so no ``3N x 3N`` matrix is ever formed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .align import DegenerateConfigurationError, kabsch
from .mesh import DomainMask, TriangleMesh
from .model import LowRankGP, diagonalize, sample

logger = logging.getLogger(__name__)

# Condition number above which the normal equations fall back to least squares.
COND_LIMIT = 1e12
FIXED_POINT_TOL = 1e-12  # relative size of a pose component treated as zero


def rotation_derivative(points, axis, center) -> np.ndarray:
    """Velocity field ``axis x (p - center)`` of an infinitesimal rotation."""
    p = np.asarray(points, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    return np.cross(np.asarray(axis, dtype=np.float64), p)


@dataclass(frozen=True, eq=False)
class NullSpaceBasis:
    """Columns spanning the pose modes removed by the projector."""

    matrix: np.ndarray  # 3N x k, k in {3, 6}
    center: np.ndarray
    mask: DomainMask

    @property
    def k(self) -> int:
        return self.matrix.shape[1]

    def restricted(self) -> np.ndarray:
        return self.matrix[self.mask.coordinate_rows()]


def build_nullspace(reference: TriangleMesh, mask: DomainMask, rotations: bool = True,
                    axes=None) -> NullSpaceBasis:
    """Translation (and rotation-derivative) basis over all reference vertices.

    ``axes`` is an orthonormal 3x3 matrix whose rows are the rotation axes;
    defaults to the world axes.
    """
    n = reference.n_vertices
    mask.check(n)
    pts = reference.vertices
    center = pts[mask.indices].mean(axis=0)
    cols = []
    for d in range(3):
        t = np.zeros((n, 3))
        t[:, d] = 1.0
        cols.append(t.ravel() / np.sqrt(n))
    if rotations:
        axes = np.eye(3) if axes is None else np.asarray(axes, dtype=np.float64)
        for ax in axes:
            a = rotation_derivative(pts, ax, center).ravel()
            nrm = np.linalg.norm(a)
            if nrm == 0:
                raise DegenerateConfigurationError("rotation derivative vanishes on the reference")
            cols.append(a / nrm)
    M = np.column_stack(cols)
    basis = NullSpaceBasis(M, center, mask)
    MX = basis.restricted()
    s = np.linalg.svd(MX, compute_uv=False)
    if MX.shape[0] < MX.shape[1] or s[-1] <= 1e-10 * s[0]:
        raise DegenerateConfigurationError(
            "mask does not determine the pose (masked points are collinear or too few)")
    return basis


class _Projector:
    """Applies ``v - M (M_X^T M_X)^-1 M_X^T v_X`` to columns of ``V``."""

    def __init__(self, ns: NullSpaceBasis):
        self.M = ns.matrix
        self.rows = ns.mask.coordinate_rows()
        self.MX = ns.restricted()
        G = self.MX.T @ self.MX
        self.cho = None
        if np.linalg.cond(G) <= COND_LIMIT:
            try:
                self.cho = scipy.linalg.cho_factor(G)
            except np.linalg.LinAlgError:
                self.cho = None
        if self.cho is None:
            logger.debug("normal equations ill-conditioned; using least squares")

    def coefficients(self, V: np.ndarray) -> np.ndarray:
        VX = V[self.rows]
        if self.cho is not None:
            return scipy.linalg.cho_solve(self.cho, self.MX.T @ VX)
        return np.linalg.lstsq(self.MX, VX, rcond=None)[0]

    def __call__(self, V: np.ndarray) -> np.ndarray:
        return V - self.M @ self.coefficients(V)


def project_vectors(vectors, reference: TriangleMesh, mask: DomainMask,
                    rotations: bool = True) -> np.ndarray:
    """Project flattened fields (columns of ``vectors``) onto the X-aligned space."""
    V = np.asarray(vectors, dtype=np.float64)
    flat = V.ndim == 1
    P = _Projector(build_nullspace(reference, mask, rotations))
    out = P(V[:, None] if flat else V)
    return out[:, 0] if flat else out


def project_model(model: LowRankGP, mask: DomainMask, rotations: bool = True,
                  project_mean: bool = False, axes=None) -> LowRankGP:
    """Target-specific model for observed domain ``mask`` without training data.

    The sqrt-eigenvalue-scaled basis is projected column by column and then
    re-diagonalized, which makes the projected covariance ``P K P^T`` exact.
    Eigenvalues below 1e-10 of the largest are dropped, so directions inside
    the pose null space disappear.
    """
    ns = build_nullspace(model.reference, mask, rotations, axes)
    P = _Projector(ns)
    scaled = model.scaled_basis
    removed = ns.matrix @ P.coefficients(scaled)
    mean_clean = not project_mean or np.abs(ns.matrix @ P.coefficients(model.mean[:, None])).max() \
        <= FIXED_POINT_TOL * max(np.abs(model.mean).max(), 1.0)
    if np.abs(removed).max() <= FIXED_POINT_TOL * np.abs(scaled).max() and mean_clean:
        # Already aligned on the mask: P is the identity on this model.
        return model
    lam, phi = diagonalize(scaled - removed)
    if lam.size == 0:
        raise DegenerateConfigurationError("projection annihilates the whole model")
    mean = P(model.mean[:, None])[:, 0] if project_mean else model.mean
    out = LowRankGP(mean, lam, phi, model.reference)
    logger.info("projected model: rank %d -> %d, variance %.4g -> %.4g",
                model.rank, out.rank, model.eigenvalues.sum(), out.eigenvalues.sum())
    return out


@dataclass(frozen=True)
class PoseResidualStats:
    mean_translation: float
    max_translation: float
    mean_rotation: float  # radians
    max_rotation: float
    mean_error: float  # translation + angle * masked radius, mm
    max_error: float


def residual_pose_error(model: LowRankGP, mask: DomainMask, n_samples: int = 1000,
                        seed: int = 0, rotations: bool = True) -> PoseResidualStats:
    """Rigid misalignment on ``mask`` of random model samples relative to the mean shape.

    A perfectly X-aligned model keeps the masked part of every sample at the
    pose of the mean shape; the residual transform is estimated with Kabsch.
    """
    rng = np.random.default_rng(seed)
    mean_shape = model.mean_shape()
    idx = mask.check(model.n_vertices).indices
    target = mean_shape[idx]
    radius = float(np.sqrt(((target - target.mean(axis=0)) ** 2).sum(axis=1).mean()))
    trans = np.empty(n_samples)
    ang = np.zeros(n_samples)
    for i in range(n_samples):
        alpha = rng.standard_normal(model.rank)
        pts = (model.reference.vertices + sample(model, alpha))[idx]
        trans[i] = np.linalg.norm(pts.mean(axis=0) - target.mean(axis=0))
        if rotations and len(idx) >= 3:
            try:
                ang[i] = kabsch(pts, target).angle
            except DegenerateConfigurationError:
                ang[i] = 0.0
    err = trans + ang * radius
    return PoseResidualStats(float(trans.mean()), float(trans.max()), float(ang.mean()),
                             float(ang.max()), float(err.mean()), float(err.max()))
