import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import kstest

from shapeprior.align import gpa, kabsch
from shapeprior.closest import ClosestPointIndex
from shapeprior.inference import (InferenceDiagnosticsError, LikelihoodConfig, PoseShapeParams,
                                  ProposalConfig, ReconstructOptions, estimate_mask, euler_matrix,
                                  log_posterior, matrix_euler, metropolis_hastings, nicp,
                                  pose_center, reconstruct, shape_at, shape_points)
from shapeprior.mesh import DomainMask, MeshValidationError, TriangleMesh
from shapeprior.model import LowRankGP, build_empirical, sample
from shapeprior.posterior import predictive, regress_arrays
from shapeprior.synthetic import (SyntheticFamilyConfig, cut_mask, generate_family,
                                  random_rotation)


@pytest.fixture(scope="module")
def blob():
    """Closed ellipsoid family truncated to rank 10: curvature everywhere pins correspondences."""
    fam = generate_family(SyntheticFamilyConfig(base="ellipsoid", n_shapes=20, seed=7))
    ref = fam.reference
    full = DomainMask.full(ref.n_vertices)
    return build_empirical(gpa(fam.fields, full, ref).fields, ref).truncate(10)


@pytest.fixture(scope="module")
def model(family):
    ref = family.reference
    return build_empirical(gpa(family.fields, DomainMask.full(ref.n_vertices), ref).fields, ref)


@given(st.lists(st.floats(0, 2 * math.pi, exclude_max=True), min_size=3, max_size=3))
def test_euler_round_trip(e):
    R = euler_matrix(e)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.allclose(euler_matrix(matrix_euler(R)), R, atol=1e-9)


def test_params_wrap_and_validate():
    p = PoseShapeParams(np.zeros(2), [7.0, -1.0, 0.0], [0, 0, 0])
    assert np.all((p.euler >= 0) & (p.euler < 2 * math.pi))
    with pytest.raises(ValueError):
        PoseShapeParams(np.array([np.nan]))


def test_shape_at_identity_and_translation(model):
    p = PoseShapeParams.zeros(model.rank)
    assert np.allclose(shape_at(model, p).vertices, model.mean_shape())
    t = np.array([1.0, -2.0, 3.0])
    assert np.allclose(shape_points(model, PoseShapeParams(np.zeros(model.rank), np.zeros(3), t)),
                       model.mean_shape() + t)


def test_shape_matches_homogeneous_oracle(model, rng):
    alpha = rng.normal(size=model.rank)
    e = rng.uniform(0, 2 * math.pi, 3)
    t = rng.normal(size=3) * 4
    c = np.array([1.0, 2.0, -3.0])
    pts = model.reference.vertices + sample(model, alpha)
    H = np.eye(4)
    H[:3, :3] = euler_matrix(e)
    T1, T2, T3 = np.eye(4), np.eye(4), np.eye(4)
    T1[:3, 3] = -c
    T2[:3, 3] = c
    T3[:3, 3] = t
    full = T3 @ T2 @ H @ T1
    homog = np.c_[pts, np.ones(len(pts))] @ full.T
    assert np.allclose(shape_points(model, PoseShapeParams(alpha, e, t), c), homog[:, :3], atol=1e-10)


def test_log_posterior_zero_residual(model):
    p = PoseShapeParams(np.full(model.rank, 0.3), [0.1, 0.2, 0.3], [1, 2, 3])
    target = shape_at(model, p)
    mask = DomainMask(np.arange(0, model.n_vertices, 4))
    c = pose_center(model, mask)
    lp = log_posterior(model, p, target, mask, LikelihoodConfig(sigma=1.0), c)
    k = len(mask)
    expect = (k * 3 * (-0.5 * math.log(2 * math.pi))
              - 0.5 * p.alpha @ p.alpha - 0.5 * model.rank * math.log(2 * math.pi)
              - 3 * math.log(2 * math.pi) - 3 * math.log(2000.0))
    # the target shape was posed about the full-shape pivot, so re-pose about c
    p_c = PoseShapeParams(p.alpha, p.euler, p.translation + (np.eye(3) - p.rotation) @ (pose_center(model) - c))
    assert log_posterior(model, p_c, target, mask, LikelihoodConfig(), c) == pytest.approx(expect, abs=1e-9)
    assert lp <= expect + 1e-9


def test_log_posterior_translation_bound(model):
    p = PoseShapeParams(np.zeros(model.rank), np.zeros(3), [0, 0, 1001.0])
    target = shape_at(model, PoseShapeParams.zeros(model.rank))
    assert log_posterior(model, p, target, DomainMask.full(model.n_vertices)) == -math.inf


def test_log_posterior_naive_sum():
    ref = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]]),
                       np.array([[0, 1, 2], [0, 1, 3]]))
    basis = np.zeros((12, 1))
    basis[2, 0] = 1.0
    m = LowRankGP(np.zeros(12), np.array([4.0]), basis, ref)
    target = TriangleMesh(ref.vertices + [0, 0, 0.5], ref.triangles)
    p = PoseShapeParams([0.7], [0, 0, 0], [0.1, 0, 0])
    mask = DomainMask.full(4)
    cfg = LikelihoodConfig(sigma=0.8, translation_bound=50.0)
    c = np.zeros(3)
    pts = shape_points(m, p, c)
    idx = ClosestPointIndex(target)
    total = 0.0
    for x in pts:
        _, d2 = idx.query(x[None])
        total += -0.5 * d2[0] / 0.64 - 3 * math.log(0.8) - 1.5 * math.log(2 * math.pi)
    total += -0.5 * 0.49 - 0.5 * math.log(2 * math.pi)
    total += -3 * math.log(2 * math.pi) - 3 * math.log(100.0)
    assert log_posterior(m, p, target, mask, cfg, c) == pytest.approx(total, abs=1e-10)


def test_nicp_fixed_point(model):
    theta = PoseShapeParams(np.full(model.rank, 0.2), [0.05, 0.0, 0.1], [1.0, 0.5, -2.0])
    mask = DomainMask.full(model.n_vertices)
    c = pose_center(model, mask)
    target = model.reference.with_vertices(shape_points(model, theta, c))
    res = nicp(model, target, mask, theta, 5, LikelihoodConfig(sigma=1e-5), c)
    assert np.allclose(res.params.alpha, theta.alpha, atol=1e-8)
    assert np.allclose(res.params.translation, theta.translation, atol=1e-8)
    assert np.allclose(res.params.rotation, theta.rotation, atol=1e-8)


def test_nicp_recovers_in_model_target(blob):
    model = blob
    rng = np.random.default_rng(3)
    theta = PoseShapeParams(rng.normal(size=model.rank))
    mask = DomainMask.full(model.n_vertices)
    c = pose_center(model, mask)
    truth = shape_points(model, theta, c)
    target = model.reference.with_vertices(truth)
    init = PoseShapeParams(np.zeros(model.rank), matrix_euler(random_rotation(rng, 0.05)), [1.0, -1, 0.5])
    res = nicp(model, target, mask, init, 300, LikelihoodConfig(sigma=0.1), c)
    err = np.sqrt(((shape_points(model, res.params, c) - truth) ** 2).sum(1))
    assert err.max() < 0.5
    assert res.log_posterior[-1] > res.log_posterior[0]


def test_mh_deterministic(model):
    mask = DomainMask.full(model.n_vertices)
    target = shape_at(model, PoseShapeParams(np.full(model.rank, 0.5)))
    init = PoseShapeParams.zeros(model.rank)
    a = metropolis_hastings(model, target, mask, init, 300, 50, seed=4, keep_trace=True)
    b = metropolis_hastings(model, target, mask, init, 300, 50, seed=4, keep_trace=True)
    assert a.log_posterior_trace == b.log_posterior_trace
    assert np.array_equal(a.map_shape, b.map_shape) and np.array_equal(a.variance, b.variance)


def test_mh_full_domain_recovers_truth(blob):
    model = blob
    rng = np.random.default_rng(3)
    theta = PoseShapeParams(rng.normal(size=model.rank))
    mask = DomainMask.full(model.n_vertices)
    c = pose_center(model, mask)
    truth = shape_points(model, theta, c)
    target = model.reference.with_vertices(truth)
    cfg = LikelihoodConfig(sigma=0.1)
    start = nicp(model, target, mask, PoseShapeParams.zeros(model.rank), 300, cfg, c).params
    s = metropolis_hastings(model, target, mask, start, 3000, 1000, seed=0, cfg=cfg, center=c)
    assert np.sqrt(((s.mean - truth) ** 2).sum(1)).max() < 0.5


def test_mh_diagnostics_error(model):
    mask = DomainMask.full(model.n_vertices)
    target = shape_at(model, PoseShapeParams.zeros(model.rank))
    huge = ProposalConfig(shape_coarse_std=1e3, shape_fine_std=1e3, rotation_std=3.0,
                          translation_std=1e4, weights=(1, 1, 1, 1, 0), max_rejections=50)
    with pytest.raises(InferenceDiagnosticsError):
        metropolis_hastings(model, target, mask, PoseShapeParams.zeros(model.rank), 2000, 10,
                            cfg=LikelihoodConfig(sigma=0.01), proposals=huge)


def test_mh_marginals_match_quadrature():
    """2-D coefficient posterior with fixed pose: MH samples vs grid quadrature."""
    ref = TriangleMesh(np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0], [2, 2, 0.0]]),
                       np.array([[0, 1, 2], [1, 3, 2]]))
    basis = np.zeros((12, 2))
    basis[2::3, 0] = 0.5                    # lift the whole square
    basis[2::3, 1] = [0.5, 0.5, -0.5, -0.5]  # tilt it about the x axis
    m = LowRankGP(np.zeros(12), np.array([1.0, 0.5]), basis, ref)
    target = TriangleMesh(ref.vertices + [0, 0, 0.6], ref.triangles)
    mask = DomainMask.full(4)
    cfg = LikelihoodConfig(sigma=0.7)
    c = np.zeros(3)
    props = ProposalConfig(shape_coarse_std=0.8, shape_fine_std=0.3, weights=(0.4, 0.3, 0, 0, 0.3))
    s = metropolis_hastings(m, target, mask, PoseShapeParams.zeros(2), 60_000, 2000, seed=1,
                            cfg=cfg, center=c, proposals=props, keep_trace=True)
    draws = np.array(s.alpha_trace)[::20]
    g = np.linspace(-6, 6, 241)
    A1, A2 = np.meshgrid(g, g, indexing="ij")
    lp = np.array([[log_posterior(m, PoseShapeParams([a, b]), target, mask, cfg, c) for b in g] for a in g])
    w = np.exp(lp - lp.max())
    for axis, dim in ((1, 0), (0, 1)):
        marg = w.sum(axis=axis)
        cdf = np.cumsum(marg) / marg.sum()
        stat = kstest(draws[:, dim], lambda x: np.interp(x, g, cdf)).statistic
        assert stat < 0.05, (dim, stat)


def test_estimate_mask(model):
    p = PoseShapeParams.zeros(model.rank)
    full_target = shape_at(model, p)
    c = pose_center(model)
    assert estimate_mask(model, full_target, p, 100.0, c).is_full(model.n_vertices)
    X = cut_mask(model.reference, 0.5)
    half = full_target.submesh(X)
    est = estimate_mask(model, half, p, 0.5, c)
    a, b = set(est.indices), set(X.indices)
    assert len(a & b) / len(a | b) >= 0.9
    far = PoseShapeParams(np.zeros(model.rank), np.zeros(3), [50.0, 0, 0])
    with pytest.raises(MeshValidationError):
        estimate_mask(model, half, far, 0.001, c)


def test_reconstruct_analytic_equals_regression(model):
    rng = np.random.default_rng(0)
    truth = model.reference.vertices + sample(model, rng.normal(size=model.rank))
    X = cut_mask(model.reference, 0.4)
    target = model.reference.with_vertices(truth).submesh(X)
    opts = ReconstructOptions(correspondence=X.indices, cfg=LikelihoodConfig(sigma=1.0))
    s = reconstruct(model, target, "analytic", opts)
    rigid = kabsch(truth[X.indices], model.mean_shape()[X.indices])
    post = regress_arrays(model, X.indices, rigid.apply(truth[X.indices]), 1.0)
    mean, var = predictive(model, post)
    assert np.allclose(s.variance, var, atol=1e-10)
    back = (model.reference.vertices + mean - rigid.center - rigid.translation) @ rigid.rotation + rigid.center
    assert np.allclose(s.map_shape, back, atol=1e-8)


def test_reconstruct_deterministic(model):
    rng = np.random.default_rng(1)
    truth = model.reference.vertices + sample(model, rng.normal(size=model.rank))
    X = cut_mask(model.reference, 0.5)
    target = model.reference.with_vertices(truth).submesh(X)
    init = PoseShapeParams.zeros(model.rank)
    opts = ReconstructOptions(n_samples=600, burn_in=100, update_every=300, seed=2, init=init)
    a = reconstruct(model, target, "mh", opts)
    b = reconstruct(model, target, "mh", opts)
    assert np.array_equal(a.map_shape, b.map_shape) and np.array_equal(a.variance, b.variance)
    with pytest.raises(ValueError):
        reconstruct(model, target, "magic", opts)
