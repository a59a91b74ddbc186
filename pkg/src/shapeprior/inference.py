"""Shape and pose posterior with closest-point correspondence.

Parameters ``theta = (alpha, euler, translation)`` map the model to the shape
``R(x + u(alpha)(x) - c) + c + t``; the rotation is Z*Y*X Euler angles about a
fixed pivot ``c`` (by default the centroid of the masked mean shape). The
likelihood is an isotropic Gaussian on the distance between each masked model
point and its closest point on the target surface.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.spatial import cKDTree

from .align import DegenerateConfigurationError, kabsch
from .closest import ClosestPointIndex
from .mesh import DomainMask, MeshValidationError, TriangleMesh
from .model import LowRankGP, coefficients, log_density, sample
from .posterior import predictive, regress_arrays
from .project import project_model

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi


class InferenceDiagnosticsError(RuntimeError):
    """Sampler or optimizer failed a runtime diagnostic."""


# --- parameters --------------------------------------------------------------

def euler_matrix(euler) -> np.ndarray:
    """Rotation ``Rz(zeta) @ Ry(gamma) @ Rx(psi)`` for ``euler = (psi, gamma, zeta)``."""
    psi, gam, zet = (float(e) for e in euler)
    cx, sx = math.cos(psi), math.sin(psi)
    cy, sy = math.cos(gam), math.sin(gam)
    cz, sz = math.cos(zet), math.sin(zet)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def matrix_euler(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    gam = -math.asin(max(-1.0, min(1.0, R[2, 0])))
    psi = math.atan2(R[2, 1], R[2, 2])
    zet = math.atan2(R[1, 0], R[0, 0])
    return np.mod([psi, gam, zet], TWO_PI)


@dataclass(frozen=True, eq=False)
class PoseShapeParams:
    alpha: np.ndarray
    euler: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=np.float64).ravel().copy()
        e = np.mod(np.asarray(self.euler, dtype=np.float64).reshape(3), TWO_PI)
        e[e >= TWO_PI] = 0.0
        t = np.asarray(self.translation, dtype=np.float64).reshape(3).copy()
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(e)) and np.all(np.isfinite(t))):
            raise ValueError("parameters must be finite")
        for arr in (a, e, t):
            arr.setflags(write=False)
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "euler", e)
        object.__setattr__(self, "translation", t)

    @classmethod
    def zeros(cls, rank: int) -> "PoseShapeParams":
        return cls(np.zeros(rank))

    @property
    def rotation(self) -> np.ndarray:
        return euler_matrix(self.euler)

    def with_pose(self, rotation, translation) -> "PoseShapeParams":
        return PoseShapeParams(self.alpha, matrix_euler(rotation), translation)


@dataclass(frozen=True)
class LikelihoodConfig:
    sigma: float = 1.0
    translation_bound: float = 1000.0

    def __post_init__(self):
        if not (self.sigma > 0 and self.translation_bound > 0):
            raise ValueError("sigma and translation_bound must be positive")


def pose_center(model: LowRankGP, mask: DomainMask | None = None) -> np.ndarray:
    """Rotation pivot: centroid of the (masked) model mean shape."""
    pts = model.mean_shape()
    return pts.mean(axis=0) if mask is None else pts[mask.indices].mean(axis=0)


def shape_at(model: LowRankGP, params: PoseShapeParams, center=None) -> TriangleMesh:
    """Posed model instance as a mesh."""
    return model.reference.with_vertices(shape_points(model, params, center))


def shape_points(model: LowRankGP, params: PoseShapeParams, center=None, rows=None) -> np.ndarray:
    c = pose_center(model) if center is None else np.asarray(center, dtype=np.float64)
    pts = model.reference.vertices + sample(model, params.alpha)
    if rows is not None:
        pts = pts[rows]
    return (pts - c) @ params.rotation.T + c + params.translation


def _pose_to_params(alpha, rigid, center) -> PoseShapeParams:
    """Express a Kabsch transform (pivot = its own center) about ``center``."""
    R = rigid.rotation
    t = rigid.translation + rigid.center - center - R @ (rigid.center - center)
    return PoseShapeParams(alpha, matrix_euler(R), t)


def _as_index(target) -> ClosestPointIndex:
    return target if isinstance(target, ClosestPointIndex) else ClosestPointIndex(target)


def _pose_log_prior(cfg: LikelihoodConfig) -> float:
    return -3.0 * math.log(TWO_PI) - 3.0 * math.log(2.0 * cfg.translation_bound)


def log_likelihood_from_d2(d2: np.ndarray, sigma: float) -> float:
    k = d2.size
    return float(-0.5 * d2.sum() / sigma ** 2
                 - 3 * k * (math.log(sigma) + 0.5 * math.log(TWO_PI)))


def log_posterior(model: LowRankGP, params: PoseShapeParams, target, mask: DomainMask,
                  cfg: LikelihoodConfig = LikelihoodConfig(), center=None) -> float:
    """Unnormalized log posterior of ``params`` for a target surface."""
    if np.any(np.abs(params.translation) > cfg.translation_bound):
        return -math.inf
    index = _as_index(target)
    c = pose_center(model, mask) if center is None else center
    pts = shape_points(model, params, c, rows=mask.indices)
    _, d2 = index.query(pts)
    return (log_likelihood_from_d2(d2, cfg.sigma) + log_density(model, params.alpha)
            + _pose_log_prior(cfg))


# --- nICP ----------------------------------------------------------------------

@dataclass
class NICPResult:
    params: PoseShapeParams
    log_posterior: list


def _to_model_frame(points, params: PoseShapeParams, center) -> np.ndarray:
    return (points - center - params.translation) @ params.rotation + center


def nicp(model: LowRankGP, target, mask: DomainMask, init: PoseShapeParams,
         iters: int = 150, cfg: LikelihoodConfig = LikelihoodConfig(), center=None) -> NICPResult:
    """Alternate closest-point correspondence, shape regression and rigid pose fits."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    index = _as_index(target)
    c = pose_center(model, mask) if center is None else np.asarray(center, dtype=np.float64)
    idx = mask.indices
    ref = model.reference.vertices
    params = init
    trace = [log_posterior(model, params, index, mask, cfg, c)]
    for _ in range(iters):
        pts = shape_points(model, params, c, rows=idx)
        y, _ = index.query(pts)
        if np.ptp(y, axis=0).max() < 1e-9:
            raise InferenceDiagnosticsError("all correspondences collapsed to one point")
        y_model = _to_model_frame(y, params, c)
        alpha = regress_arrays(model, idx, y_model, cfg.sigma).mean_alpha
        src = (ref + sample(model, alpha))[idx]
        try:
            rigid = kabsch(src, y)
            params = _pose_to_params(alpha, rigid, c)
        except DegenerateConfigurationError:
            params = PoseShapeParams(alpha, params.euler, params.translation)
        trace.append(log_posterior(model, params, index, mask, cfg, c))
    return NICPResult(params, trace)


# --- Metropolis-Hastings ---------------------------------------------------------

@dataclass(frozen=True)
class ProposalConfig:
    shape_coarse_std: float = 0.2
    shape_fine_std: float = 0.05
    rotation_std: float = 0.01
    translation_std: float = 0.5
    block_size: int = 5
    weights: tuple = (0.2, 0.2, 0.2, 0.2, 0.2)  # coarse, fine, rotation, translation, regression
    regression_step: float = 0.5
    max_rejections: int = 1000


PROPOSAL_NAMES = ("shape_coarse", "shape_fine", "rotation", "translation", "regression")


@dataclass
class ChainSummary:
    map_params: PoseShapeParams
    map_shape: np.ndarray
    map_log_posterior: float
    n_samples: int
    mean: np.ndarray
    variance: np.ndarray
    acceptance: dict
    model: LowRankGP
    center: np.ndarray
    mask: DomainMask | None = None
    log_posterior_trace: list = field(default_factory=list)
    runtime: float = 0.0
    alpha_trace: list = field(default_factory=list)  # post-burn-in coefficients, if kept


class _State:
    __slots__ = ("params", "logp", "y")

    def __init__(self, params, logp, y):
        self.params = params
        self.logp = logp
        self.y = y


class _Welford:
    def __init__(self, shape):
        self.n = 0
        self.mean = np.zeros(shape)
        self.m2 = np.zeros(shape)

    def add(self, x):
        self.n += 1
        d = x - self.mean
        self.mean += d / self.n
        self.m2 += d * (x - self.mean)

    def variance(self):
        return self.m2 / max(self.n - 1, 1)


class _Chain:
    """Single-chain MH over ``theta`` for a fixed model, mask and pivot."""

    def __init__(self, model, index, mask, cfg, center, pcfg: ProposalConfig, rng):
        self.model = model
        self.index = index
        self.idx = mask.indices
        self.cfg = cfg
        self.c = center
        self.p = pcfg
        self.rng = rng
        self.log_pose_prior = _pose_log_prior(cfg)
        rows = mask.coordinate_rows()
        A = model.basis[rows] * np.sqrt(model.eigenvalues)
        precision = A.T @ A / cfg.sigma ** 2 + np.eye(model.rank)
        cho = scipy.linalg.cho_factor(precision)
        self.reg_cov = scipy.linalg.cho_solve(cho, np.eye(model.rank))
        self.reg_gain = self.reg_cov @ A.T / cfg.sigma ** 2
        self.reg_offset = (model.reference.vertices[self.idx] + model.mean_field()[self.idx]).ravel()
        self.reg_chol = np.linalg.cholesky(0.5 * (self.reg_cov + self.reg_cov.T))
        self.reg_prec = np.linalg.inv(self.reg_cov)
        w = np.asarray(pcfg.weights, dtype=np.float64)
        if model.rank == 0:
            w[[0, 1, 4]] = 0.0
        self.weights = w / w.sum()

    def evaluate(self, params) -> _State:
        if np.any(np.abs(params.translation) > self.cfg.translation_bound):
            return _State(params, -math.inf, None)
        pts = shape_points(self.model, params, self.c, rows=self.idx)
        y, d2 = self.index.query(pts)
        logp = (log_likelihood_from_d2(d2, self.cfg.sigma) + log_density(self.model, params.alpha)
                + self.log_pose_prior)
        return _State(params, logp, y)

    def _regression_mean(self, state) -> np.ndarray:
        y_model = _to_model_frame(state.y, state.params, self.c)
        return self.reg_gain @ (y_model.ravel() - self.reg_offset)

    def _log_q(self, to_alpha, from_alpha, from_mean) -> float:
        center = from_alpha + self.p.regression_step * (from_mean - from_alpha)
        d = to_alpha - center
        return -0.5 * float(d @ self.reg_prec @ d)

    def step(self, state: _State):
        """One proposal; returns (new_state, proposal_kind, accepted)."""
        rng = self.rng
        kind = int(rng.choice(len(self.weights), p=self.weights))
        prm = state.params
        log_ratio_q = 0.0
        if kind in (0, 1):
            std = self.p.shape_coarse_std if kind == 0 else self.p.shape_fine_std
            r = prm.alpha.size
            bs = min(self.p.block_size, r)
            start = int(rng.integers(0, r - bs + 1))
            alpha = prm.alpha.copy()
            alpha[start:start + bs] += std * rng.standard_normal(bs)
            new = PoseShapeParams(alpha, prm.euler, prm.translation)
        elif kind == 2:
            new = PoseShapeParams(prm.alpha, prm.euler + self.p.rotation_std * rng.standard_normal(3),
                                  prm.translation)
        elif kind == 3:
            new = PoseShapeParams(prm.alpha, prm.euler,
                                  prm.translation + self.p.translation_std * rng.standard_normal(3))
        else:
            m_fwd = self._regression_mean(state)
            center = prm.alpha + self.p.regression_step * (m_fwd - prm.alpha)
            alpha = center + self.reg_chol @ rng.standard_normal(prm.alpha.size)
            new = PoseShapeParams(alpha, prm.euler, prm.translation)
        cand = self.evaluate(new)
        if kind == 4 and cand.y is not None:
            m_rev = self._regression_mean(cand)
            log_ratio_q = (self._log_q(prm.alpha, cand.params.alpha, m_rev)
                           - self._log_q(cand.params.alpha, prm.alpha, m_fwd))
        log_u = math.log(rng.random() or 1e-300)
        if cand.logp > -math.inf and log_u < cand.logp - state.logp + log_ratio_q:
            return cand, kind, True
        return state, kind, False


def metropolis_hastings(model: LowRankGP, target, mask: DomainMask, init: PoseShapeParams,
                        n_samples: int = 15000, burn_in: int = 1000, seed: int = 0,
                        cfg: LikelihoodConfig = LikelihoodConfig(), center=None,
                        proposals: ProposalConfig = ProposalConfig(),
                        keep_trace: bool = False) -> ChainSummary:
    """Sample the shape and pose posterior with a mixture of MH proposals.

    The summary aggregates posed shapes after ``burn_in``: per-vertex mean and
    variance (trace of the 3x3 covariance). The MAP is the visited sample with
    the highest log posterior.
    """
    if n_samples <= burn_in:
        raise ValueError("n_samples must exceed burn_in")
    rng = np.random.default_rng(seed)
    index = _as_index(target)
    c = pose_center(model, mask) if center is None else np.asarray(center, dtype=np.float64)
    t0 = time.perf_counter()
    runner = _MHRunner(model, index, mask, cfg, c, proposals, rng, keep_trace)
    runner.run(init, n_samples, burn_in)
    return runner.summary(time.perf_counter() - t0, mask)


class _MHRunner:
    """Drives one or more chain segments and accumulates the summary."""

    def __init__(self, model, index, mask, cfg, center, proposals, rng, keep_trace):
        self.index = index
        self.cfg = cfg
        self.center = center
        self.proposals = proposals
        self.rng = rng
        self.keep_trace = keep_trace
        self.stats = _Welford((model.n_vertices, 3))
        self.var_stats = None
        self.n_prop = np.zeros(len(PROPOSAL_NAMES), dtype=np.int64)
        self.n_acc = np.zeros(len(PROPOSAL_NAMES), dtype=np.int64)
        self.trace = []
        self.alpha_trace = []
        self.best = None  # (logp, params, shape, model)
        self.step_count = 0
        self.set_model(model, mask)
        self.state = None

    def set_model(self, model, mask):
        self.model = model
        self.mask = mask
        self.chain = _Chain(model, self.index, mask, self.cfg, self.center, self.proposals, self.rng)

    def start(self, params):
        self.state = self.chain.evaluate(params)
        if self.state.logp == -math.inf:
            raise InferenceDiagnosticsError("initial parameters have zero posterior density")

    def run(self, init, n_steps, burn_in, total_burn_in=None):
        if self.state is None or init is not None:
            self.start(init)
        burn = burn_in if total_burn_in is None else total_burn_in
        rejections = 0
        for _ in range(n_steps):
            state, kind, acc = self.chain.step(self.state)
            self.n_prop[kind] += 1
            if acc:
                self.n_acc[kind] += 1
                rejections = 0
            else:
                rejections += 1
                if rejections >= self.proposals.max_rejections:
                    raise InferenceDiagnosticsError(
                        f"no proposal accepted in {rejections} consecutive steps")
            self.state = state
            self.step_count += 1
            if self.keep_trace:
                self.trace.append(state.logp)
            if self.best is None or state.logp > self.best[0]:
                self.best = (state.logp, state.params, None, self.model)
            if self.step_count > burn:
                self.stats.add(shape_points(self.model, state.params, self.center))
                if self.keep_trace:
                    self.alpha_trace.append(state.params.alpha)

    def summary(self, runtime, mask) -> ChainSummary:
        logp, params, _, model = self.best
        shape = shape_points(model, params, self.center)
        rates = {name: (float(a) / p if p else float("nan"))
                 for name, a, p in zip(PROPOSAL_NAMES, self.n_acc, self.n_prop)}
        var = self.stats.variance().sum(axis=1)
        return ChainSummary(params, shape, float(logp), self.stats.n, self.stats.mean.copy(), var,
                            rates, model, self.center, mask, list(self.trace), runtime,
                            list(self.alpha_trace))


# --- mask estimation and orchestration ------------------------------------------

def estimate_mask(model: LowRankGP, target, params: PoseShapeParams, radius: float,
                  center=None) -> DomainMask:
    """Model vertices whose posed position lies within ``radius`` of the target surface."""
    if not radius > 0:
        raise ValueError("radius must be positive")
    index = _as_index(target)
    pts = shape_points(model, params, center)
    _, d2 = index.query(pts)
    inside = d2 < radius ** 2
    if not np.any(inside):
        raise MeshValidationError("estimated mask is empty")
    return DomainMask.from_bool(inside)


def rigid_icp(source_points, target_points, iters: int = 50):
    """Rough rigid alignment of ``target_points`` onto ``source_points`` by nearest vertices."""
    tree = cKDTree(source_points)
    moved = np.asarray(target_points, dtype=np.float64)
    moved = moved - moved.mean(axis=0) + np.asarray(source_points).mean(axis=0)
    for _ in range(iters):
        _, nn = tree.query(moved)
        T = kabsch(moved, source_points[nn])
        new = T.apply(moved)
        if np.abs(new - moved).max() < 1e-9:
            moved = new
            break
        moved = new
    return kabsch(target_points, moved)


@dataclass(frozen=True)
class ReconstructOptions:
    mask: DomainMask | None = None          # fixed observed domain; estimated if None
    project: bool = True                    # realign the model on the (current) mask
    rotations: bool = True
    update_every: int | None = None         # nICP iterations / MH proposals between mask updates
    iters: int = 150
    n_samples: int = 15000
    burn_in: int = 1000
    seed: int = 0
    cfg: LikelihoodConfig = LikelihoodConfig()
    radius: float = 2.0
    init: PoseShapeParams | None = None     # pose of the model in the target frame
    center: np.ndarray | None = None
    proposals: ProposalConfig = ProposalConfig()
    correspondence: np.ndarray | None = None  # target vertex -> model vertex, for analytic


def _transfer_params(old: LowRankGP, new: LowRankGP, params: PoseShapeParams, center):
    """Re-express a posed shape in another model; the pose absorbs the lost rigid part."""
    posed = shape_points(old, params, center)
    alpha, _ = coefficients(new, sample(old, params.alpha))
    src = new.reference.vertices + sample(new, alpha)
    rigid = kabsch(src, posed)
    return _pose_to_params(alpha, rigid, center)


def _initial_params(model, target, opts, center):
    if opts.init is not None:
        init = opts.init
        if init.alpha.size != model.rank:
            init = PoseShapeParams(np.zeros(model.rank), init.euler, init.translation)
        return init
    rigid = rigid_icp(model.mean_shape(), target.vertices)
    return _inverse_pose_params(np.zeros(model.rank), rigid, center)


def _inverse_pose_params(alpha, rigid, center) -> PoseShapeParams:
    """Model pose that undoes ``rigid`` (a target -> model-frame transform)."""
    R = rigid.rotation
    t = R.T @ (center - rigid.center - rigid.translation) + rigid.center - center
    return PoseShapeParams(alpha, matrix_euler(R.T), t)


def _analytic(model, target, opts) -> ChainSummary:
    corr = (np.arange(target.n_vertices) if opts.correspondence is None
            else np.asarray(opts.correspondence, dtype=np.int64))
    if corr.size != target.n_vertices:
        raise MeshValidationError("correspondence length must equal target vertex count")
    mask = DomainMask.from_indices(corr, model.n_vertices)
    rigid = kabsch(target.vertices, model.mean_shape()[corr])  # target -> model frame
    post = regress_arrays(model, corr, rigid.apply(target.vertices), opts.cfg.sigma)
    mean_field, var = predictive(model, post)
    center = pose_center(model, mask) if opts.center is None else np.asarray(opts.center, dtype=np.float64)
    params = _inverse_pose_params(post.mean_alpha, rigid, center)
    shape = shape_points(model, params, center)
    return ChainSummary(params, shape, float("nan"), 0, shape, var, {}, model, center, mask)


def reconstruct(model: LowRankGP, target: TriangleMesh, method: str = "nicp",
                opts: ReconstructOptions = ReconstructOptions()) -> ChainSummary:
    """Best-practice pipeline: initialize, estimate X, project, infer, update X."""
    if method not in ("nicp", "mh", "analytic"):
        raise ValueError(f"unknown method {method!r}")
    if method == "analytic":
        return _analytic(model, target, opts)
    t0 = time.perf_counter()
    index = ClosestPointIndex(target)
    base = model
    if opts.mask is not None:
        opts.mask.check(model.n_vertices)
    center = opts.center
    if center is None:
        center = pose_center(base, opts.mask) if opts.mask is not None else pose_center(base)
    params = _initial_params(base, target, opts, center)
    mask = opts.mask if opts.mask is not None else estimate_mask(base, index, params, opts.radius, center)
    if opts.center is None and opts.mask is None:
        # re-pivot about the estimated observed region, keeping the posed shape
        new_center = pose_center(base, mask)
        R = params.rotation
        t = params.translation + R @ (new_center - center) + center - new_center
        params = PoseShapeParams(params.alpha, params.euler, t)
        center = new_center
    fixed_mask = opts.mask is not None

    def current_model(m):
        return project_model(base, m, opts.rotations) if opts.project else base

    cur = current_model(mask)
    if cur is not base:
        params = _transfer_params(base, cur, params, center)

    if method == "nicp":
        every = opts.update_every or 25
        done = 0
        while done < opts.iters:
            n = min(every, opts.iters - done)
            params = nicp(cur, index, mask, params, n, opts.cfg, center).params
            done += n
            if done < opts.iters and not fixed_mask:
                new_mask = estimate_mask(cur, index, params, opts.radius, center)
                if new_mask != mask:
                    mask = new_mask
                    nxt = current_model(mask)
                    if nxt is not cur:
                        params = _transfer_params(cur, nxt, params, center)
                    cur = nxt
        shape = shape_points(cur, params, center)
        # predicted variance from the posterior shape model at the final correspondence
        pts = shape[mask.indices]
        y, _ = index.query(pts)
        post = regress_arrays(cur, mask.indices, _to_model_frame(y, params, center), opts.cfg.sigma)
        _, var = predictive(cur, post)
        logp = log_posterior(cur, params, index, mask, opts.cfg, center)
        return ChainSummary(params, shape, logp, 0, shape, var, {}, cur, center, mask,
                            [], time.perf_counter() - t0)

    every = opts.update_every or 5000
    rng = np.random.default_rng(opts.seed)
    runner = _MHRunner(cur, index, mask, opts.cfg, center, opts.proposals, rng, False)
    runner.start(params)
    done = 0
    while done < opts.n_samples:
        n = min(every, opts.n_samples - done)
        runner.run(None, n, opts.burn_in)
        done += n
        if done < opts.n_samples and not fixed_mask:
            new_mask = estimate_mask(cur, index, runner.state.params, opts.radius, center)
            if new_mask != mask:
                mask = new_mask
                nxt = current_model(mask)
                if nxt is not cur:
                    runner.best = None  # MAP is compared within the final model only
                    p = _transfer_params(cur, nxt, runner.state.params, center)
                    cur = nxt
                    runner.set_model(cur, mask)
                    runner.start(p)
                else:
                    runner.set_model(cur, mask)
                    runner.start(runner.state.params)
    return runner.summary(time.perf_counter() - t0, mask)
