"""Low-rank Gaussian process shape models.

A model stores the mean deformation (flattened, interleaved ``x0 y0 z0 x1 ...``),
a descending eigenvalue spectrum and an orthonormal ``3N x r`` basis. A
deformation is ``mean + basis @ (sqrt(eigenvalues) * alpha)`` with standard
normal coefficients ``alpha``.
"""
from __future__ import annotations

import io
import logging
import math
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .mesh import TriangleMesh, check_field, mesh_to_ply, parse_ply

logger = logging.getLogger(__name__)

EIGENVALUE_RTOL = 1e-10


class ModelError(ValueError):
    """Model cannot be built or violates its invariants."""


class ModelFormatError(ModelError):
    """Serialized model has bad magic, version or size."""


class ModelTruncatedError(ModelFormatError):
    pass


def _readonly(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def canonical_signs(basis: np.ndarray) -> np.ndarray:
    """Flip columns so the largest-magnitude entry of each is positive."""
    if basis.size == 0:
        return basis
    pivots = np.argmax(np.abs(basis), axis=0)
    signs = np.sign(basis[pivots, np.arange(basis.shape[1])])
    signs[signs == 0] = 1.0
    return basis * signs


@dataclass(frozen=True, eq=False)
class LowRankGP:
    mean: np.ndarray
    eigenvalues: np.ndarray
    basis: np.ndarray
    reference: TriangleMesh

    def __post_init__(self):
        n3 = 3 * self.reference.n_vertices
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        lam = np.asarray(self.eigenvalues, dtype=np.float64).ravel()
        phi = np.asarray(self.basis, dtype=np.float64).reshape(n3, -1) if lam.size else np.zeros((n3, 0))
        if mean.size != n3:
            raise ModelError(f"mean has length {mean.size}, expected {n3}")
        if phi.shape != (n3, lam.size):
            raise ModelError(f"basis shape {phi.shape} does not match rank {lam.size}")
        if lam.size > n3:
            raise ModelError("rank exceeds 3N")
        if np.any(lam <= 0) or np.any(np.diff(lam) > 0):
            raise ModelError("eigenvalues must be positive and descending")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(phi))):
            raise ModelError("model contains non-finite values")
        gram_err = np.abs(phi.T @ phi - np.eye(lam.size)).max() if lam.size else 0.0
        if gram_err > 1e-8:
            raise ModelError(f"basis is not orthonormal (max error {gram_err:.3g})")
        object.__setattr__(self, "mean", _readonly(mean))
        object.__setattr__(self, "eigenvalues", _readonly(lam))
        object.__setattr__(self, "basis", _readonly(phi))

    @property
    def rank(self) -> int:
        return self.eigenvalues.size

    @property
    def n_vertices(self) -> int:
        return self.reference.n_vertices

    @property
    def scaled_basis(self) -> np.ndarray:
        """Basis columns scaled by the square root of their eigenvalue."""
        return self.basis * np.sqrt(self.eigenvalues)

    def covariance(self) -> np.ndarray:
        """Dense ``3N x 3N`` covariance; only for small models."""
        B = self.scaled_basis
        return B @ B.T

    def mean_field(self) -> np.ndarray:
        return self.mean.reshape(-1, 3)

    def mean_shape(self) -> np.ndarray:
        return self.reference.vertices + self.mean_field()

    def truncate(self, rank: int) -> "LowRankGP":
        rank = min(rank, self.rank)
        return LowRankGP(self.mean, self.eigenvalues[:rank], self.basis[:, :rank], self.reference)

    def pointwise_variance(self) -> np.ndarray:
        """Per-vertex trace of the 3x3 marginal covariance."""
        return (self.scaled_basis ** 2).reshape(-1, 3, self.rank).sum(axis=(1, 2))


def _truncate_spectrum(lam: np.ndarray, vecs: np.ndarray, rank=None):
    order = np.argsort(-lam, kind="stable")
    lam, vecs = lam[order], vecs[:, order]
    if lam.size == 0 or lam[0] <= 0:
        return lam[:0], vecs[:, :0]
    keep = lam > EIGENVALUE_RTOL * lam[0]
    lam, vecs = lam[keep], vecs[:, keep]
    if rank is not None:
        lam, vecs = lam[:rank], vecs[:, :rank]
    return lam, canonical_signs(vecs)


def diagonalize(scaled: np.ndarray, rank=None):
    """Eigenpairs of ``scaled @ scaled.T`` from a thin ``3N x m`` factor.

    Uses QR followed by an SVD of the small triangular factor, which keeps the
    cost at O(N m^2) like a Gram-matrix SVD but without squaring the condition
    number.
    """
    if scaled.shape[1] == 0:
        return np.zeros(0), np.zeros((scaled.shape[0], 0))
    Q, R = np.linalg.qr(scaled, mode="reduced")
    U, s, _ = np.linalg.svd(R)
    return _truncate_spectrum(s ** 2, Q @ U, rank)


def build_empirical(fields, reference: TriangleMesh, rank: int | None = None) -> LowRankGP:
    """Sample mean and covariance (divisor n-1) of registered, aligned fields."""
    n_vert = reference.n_vertices
    data = np.stack([check_field(u, n_vert).ravel() for u in fields])
    n = data.shape[0]
    if n < 2:
        raise ModelError("need at least two fields to estimate a covariance")
    mean = data.mean(axis=0)
    centered = (data - mean) / math.sqrt(n - 1)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    lam, phi = _truncate_spectrum(s ** 2, vt.T)
    if lam.size == 0:
        raise ModelError("training fields have no variance (rank 0)")
    if rank is not None:
        if rank > lam.size:
            warnings.warn(f"requested rank {rank} exceeds available rank {lam.size}; clamping",
                          stacklevel=2)
        lam, phi = lam[:rank], phi[:, :rank]
    return LowRankGP(mean, lam, phi, reference)


def _check_alpha(model: LowRankGP, alpha) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64).ravel()
    if a.size != model.rank:
        raise ValueError(f"alpha has length {a.size}, model rank is {model.rank}")
    return a


def sample(model: LowRankGP, alpha) -> np.ndarray:
    """Deformation field ``(N, 3)`` for the coefficients ``alpha``."""
    a = _check_alpha(model, alpha)
    return (model.mean + model.basis @ (np.sqrt(model.eigenvalues) * a)).reshape(-1, 3)


def coefficients(model: LowRankGP, field):
    """Coefficients of ``field`` in the model and the norm of the off-span residual."""
    d = check_field(field, model.n_vertices).ravel() - model.mean
    proj = model.basis.T @ d
    residual = d - model.basis @ proj
    return proj / np.sqrt(model.eigenvalues), float(np.linalg.norm(residual))


def log_density(model: LowRankGP, alpha) -> float:
    a = _check_alpha(model, alpha)
    return float(-0.5 * a @ a - 0.5 * a.size * math.log(2.0 * math.pi))


# --- localized models ------------------------------------------------------

@dataclass(frozen=True)
class KernelMixtureConfig:
    """Weights and length scales of a kernel mixture; ``inf`` marks the empirical term."""

    weights: tuple
    sigmas: tuple

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        s = tuple(float(x) for x in self.sigmas)
        if len(w) != len(s):
            raise ValueError("weights and sigmas must have equal length")
        if any(x < 0 for x in w):
            raise ValueError("weights must be non-negative")
        if any(not (x > 0) for x in s):
            raise ValueError("sigmas must be positive (inf for the empirical term)")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "sigmas", s)


SKULL_MIXTURE = KernelMixtureConfig((0.1, 0.3, 0.4, 0.2), (math.inf, 200.0, 100.0, 50.0))


def pivoted_cholesky(diag: np.ndarray, column, max_rank: int, rtol: float = 1e-6) -> np.ndarray:
    """Partial pivoted Cholesky factor ``L`` with ``A ~= L @ L.T``.

    ``column(j)`` returns column ``j`` of the implicit PSD matrix ``A``; only
    the diagonal and the selected pivot columns are ever evaluated. Stops at
    ``max_rank`` columns or when the trace of the residual falls below
    ``rtol`` times the trace of ``A``.
    """
    d = np.array(diag, dtype=np.float64)
    n = d.size
    total = d.sum()
    L = np.zeros((n, min(max_rank, n)))
    m = 0
    while m < L.shape[1]:
        if d.sum() <= rtol * total:
            break
        j = int(np.argmax(d))
        pivot = d[j]
        if pivot <= 0:
            break
        col = np.asarray(column(j), dtype=np.float64) - L[:, :m] @ L[j, :m]
        col /= math.sqrt(pivot)
        L[:, m] = col
        d -= col ** 2
        d[j] = 0.0
        np.maximum(d, 0.0, out=d)
        m += 1
    return L[:, :m]


def mixture_covariance_column(base: LowRankGP, mix: KernelMixtureConfig):
    """Column evaluator and diagonal of the mixed covariance over reference vertices."""
    pts = base.reference.vertices
    B = base.scaled_basis
    w_emp = sum(w for w, s in zip(mix.weights, mix.sigmas) if math.isinf(s))
    gauss = [(w, s) for w, s in zip(mix.weights, mix.sigmas) if not math.isinf(s) and w > 0]
    diag = w_emp * (B ** 2).sum(axis=1) + sum(w for w, _ in gauss)

    def column(j):
        col = w_emp * (B @ B[j]) if w_emp else np.zeros(B.shape[0])
        if gauss:
            v, c = divmod(j, 3)
            d2 = ((pts - pts[v]) ** 2).sum(axis=1)
            k = sum(w * np.exp(-d2 / s ** 2) for w, s in gauss)
            col[c::3] += k
        return col

    return diag, column


def build_localized(base: LowRankGP, mix: KernelMixtureConfig, rank: int,
                    rtol: float = 1e-6) -> LowRankGP:
    """Low-rank model of a mixture of the empirical and Gaussian kernels.

    The mixture is ``w0 * k_emp + sum_j w_j * exp(-|x - x'|^2 / s_j^2) * I3``,
    factored by pivoted Cholesky and re-diagonalized to an orthonormal basis.
    """
    n3 = 3 * base.n_vertices
    if rank > n3:
        raise ModelError(f"rank {rank} exceeds 3N = {n3}")
    diag, column = mixture_covariance_column(base, mix)
    L = pivoted_cholesky(diag, column, rank, rtol)
    lam, phi = diagonalize(L)
    if lam.size == 0:
        raise ModelError("mixture covariance is zero")
    return LowRankGP(base.mean, lam, phi, base.reference)


# --- serialization ---------------------------------------------------------

MAGIC = b"GPMM"
VERSION = 1


def model_to_bytes(model: LowRankGP) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<IQQ", VERSION, model.n_vertices, model.rank))
    out.write(model.mean.astype("<f8").tobytes())
    out.write(model.eigenvalues.astype("<f8").tobytes())
    out.write(np.asfortranarray(model.basis).astype("<f8").tobytes(order="F"))
    ply = mesh_to_ply(model.reference).encode("ascii")
    out.write(struct.pack("<Q", len(ply)))
    out.write(ply)
    return out.getvalue()


def model_from_bytes(data: bytes) -> LowRankGP:
    view = memoryview(data)
    pos = 0

    def take(k):
        nonlocal pos
        if pos + k > len(view):
            raise ModelTruncatedError(f"model data truncated at byte {len(view)} (needed {pos + k})")
        chunk = view[pos:pos + k]
        pos += k
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ModelFormatError("bad magic; not a GPMM model file")
    version, n, r = struct.unpack("<IQQ", take(20))
    if version != VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    mean = np.frombuffer(take(8 * 3 * n), dtype="<f8").astype(np.float64)
    lam = np.frombuffer(take(8 * r), dtype="<f8").astype(np.float64)
    basis = np.frombuffer(take(8 * 3 * n * r), dtype="<f8").astype(np.float64)
    basis = basis.reshape((3 * n, r), order="F")
    (blen,) = struct.unpack("<Q", take(8))
    reference = parse_ply(bytes(take(blen)).decode("ascii"))
    if pos != len(view):
        raise ModelFormatError("trailing bytes after model data")
    if reference.n_vertices != n:
        raise ModelFormatError("embedded reference vertex count does not match header")
    return LowRankGP(mean, lam, basis, reference)


def save_model(model: LowRankGP, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> LowRankGP:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
