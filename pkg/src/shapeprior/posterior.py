"""Posterior shape models: Gaussian process regression at fixed correspondence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .model import LowRankGP

DEFAULT_NOISE_SIGMA = 1.0


@dataclass(frozen=True)
class Observation:
    index: int
    position: tuple
    noise_sigma: float = DEFAULT_NOISE_SIGMA

    def __post_init__(self):
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be positive")


@dataclass(frozen=True, eq=False)
class CoefficientPosterior:
    mean_alpha: np.ndarray
    covariance_alpha: np.ndarray

    def sample(self, rng: np.random.Generator, size=None) -> np.ndarray:
        L = _psd_factor(self.covariance_alpha)
        r = self.mean_alpha.size
        z = rng.standard_normal((r,) if size is None else (size, r))
        return self.mean_alpha + z @ L.T


def _psd_factor(C: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (C + C.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def regress_arrays(model: LowRankGP, indices, positions, noise_sigma=DEFAULT_NOISE_SIGMA
                   ) -> CoefficientPosterior:
    """Posterior over coefficients given observed deformed positions of vertices.

    ``positions`` are points in the model frame (reference + deformation).
    ``noise_sigma`` may be scalar or one value per observation.
    """
    idx = np.asarray(indices, dtype=np.int64).ravel()
    r = model.rank
    if idx.size == 0:
        return CoefficientPosterior(np.zeros(r), np.eye(r))
    if idx.min() < 0 or idx.max() >= model.n_vertices:
        raise IndexError("observation index out of range")
    y = (np.asarray(positions, dtype=np.float64).reshape(-1, 3)
         - model.reference.vertices[idx] - model.mean_field()[idx]).ravel()
    sig = np.broadcast_to(np.asarray(noise_sigma, dtype=np.float64), idx.shape)
    if np.any(sig <= 0):
        raise ValueError("noise_sigma must be positive")
    rows = (3 * idx[:, None] + np.arange(3)).ravel()
    A = model.basis[rows] * np.sqrt(model.eigenvalues)
    w = np.repeat(1.0 / sig ** 2, 3)
    precision = A.T @ (A * w[:, None]) + np.eye(r)
    cho = scipy.linalg.cho_factor(precision)
    cov = scipy.linalg.cho_solve(cho, np.eye(r))
    cov = 0.5 * (cov + cov.T)
    mean = scipy.linalg.cho_solve(cho, A.T @ (w * y))
    return CoefficientPosterior(mean, cov)


def regress(model: LowRankGP, observations) -> CoefficientPosterior:
    obs = list(observations)
    if not obs:
        return CoefficientPosterior(np.zeros(model.rank), np.eye(model.rank))
    return regress_arrays(model, [o.index for o in obs], [o.position for o in obs],
                          [o.noise_sigma for o in obs])


def predictive(model: LowRankGP, post: CoefficientPosterior):
    """Predictive mean field ``(N, 3)`` and per-vertex variance (trace of 3x3 block)."""
    B = model.scaled_basis
    mean = (model.mean + B @ post.mean_alpha).reshape(-1, 3)
    var = ((B @ post.covariance_alpha) * B).sum(axis=1).reshape(-1, 3).sum(axis=1)
    return mean, np.clip(var, 0.0, None)
