import math
import numpy as np
import pytest
from scipy.integrate import trapezoid
from hypothesis import given, strategies as st

from shapeprior.mesh import TriangleMesh
from shapeprior.model import (KernelMixtureConfig, LowRankGP, ModelError, ModelFormatError,
                              ModelTruncatedError, build_empirical, build_localized,
                              canonical_signs, coefficients, log_density, model_from_bytes,
                              model_to_bytes, pivoted_cholesky, sample, save_model, load_model)


def toy_reference(n=5, seed=0):
    rng = np.random.default_rng(seed)
    return TriangleMesh(rng.normal(size=(n, 3)) * 10, np.array([[0, 1, 2]]))


def toy_model(n=5, n_fields=6, seed=0):
    rng = np.random.default_rng(seed)
    ref = toy_reference(n, seed)
    fields = [rng.normal(size=(n, 3)) for _ in range(n_fields)]
    return build_empirical(fields, ref), fields, ref


def test_two_fields_rank_one():
    ref = toy_reference()
    rng = np.random.default_rng(3)
    u1, u2 = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    m = build_empirical([u1, u2], ref)
    assert m.rank == 1
    assert m.eigenvalues[0] == pytest.approx(0.5 * np.sum((u1 - u2) ** 2), rel=1e-12)


def test_identical_fields_rank_zero():
    ref = toy_reference()
    with pytest.raises(ModelError):
        build_empirical([np.ones((5, 3))] * 4, ref)


def test_single_field_rejected():
    with pytest.raises(ModelError):
        build_empirical([np.ones((5, 3))], toy_reference())


def test_dense_covariance_oracle():
    m, fields, _ = toy_model()
    X = np.stack([f.ravel() for f in fields])
    mean = X.mean(axis=0)
    C = sum(np.outer(x - mean, x - mean) for x in X) / (len(X) - 1)
    assert np.abs(m.covariance() - C).max() < 1e-10
    assert np.allclose(m.mean, mean, atol=1e-14)


def test_rank_clamp_warns():
    ref = toy_reference()
    rng = np.random.default_rng(0)
    fields = [rng.normal(size=(5, 3)) for _ in range(4)]
    with pytest.warns(UserWarning):
        m = build_empirical(fields, ref, rank=10)
    assert m.rank == 3


def test_invariants():
    m, fields, _ = toy_model()
    assert np.allclose(m.basis.T @ m.basis, np.eye(m.rank), atol=1e-8)
    assert np.all(np.diff(m.eigenvalues) <= 0) and m.eigenvalues[-1] > 0
    assert m.rank <= len(fields) - 1
    ref = toy_reference()
    with pytest.raises(ModelError):
        LowRankGP(np.zeros(15), np.array([1.0, 2.0]), np.eye(15)[:, :2], ref)
    with pytest.raises(ModelError):
        LowRankGP(np.zeros(15), np.array([1.0]), np.ones((15, 1)), ref)


def test_sample_basics():
    m, _, _ = toy_model()
    assert np.allclose(sample(m, np.zeros(m.rank)).ravel(), m.mean)
    e1 = np.zeros(m.rank)
    e1[0] = 1
    assert np.allclose(sample(m, e1).ravel(), m.mean + math.sqrt(m.eigenvalues[0]) * m.basis[:, 0])
    with pytest.raises(ValueError):
        sample(m, np.zeros(m.rank + 1))


def test_sample_covariance_monte_carlo():
    m, _, _ = toy_model()
    rng = np.random.default_rng(5)
    A = rng.standard_normal((50_000, m.rank))
    S = m.mean + A @ m.scaled_basis.T
    emp = np.cov(S, rowvar=False)
    C = m.covariance()
    dom = np.abs(C) > 0.5 * np.abs(C).max()
    assert np.all(np.abs(emp[dom] - C[dom]) < 0.05 * np.abs(C[dom]))


@given(st.integers(0, 2 ** 31 - 1))
def test_coefficients_left_inverse(seed):
    m, _, _ = toy_model()
    a = np.random.default_rng(seed).normal(size=m.rank)
    back, res = coefficients(m, sample(m, a))
    assert np.allclose(back, a, atol=1e-10) and res < 1e-10


def test_coefficients_residual_dense_oracle():
    m, _, _ = toy_model(n_fields=4)
    rng = np.random.default_rng(9)
    f = rng.normal(size=(5, 3))
    alpha, res = coefficients(m, f)
    P = np.eye(15) - m.basis @ m.basis.T
    assert res == pytest.approx(np.linalg.norm(P @ (f.ravel() - m.mean)), rel=1e-12)
    zero, r0 = coefficients(m, m.mean_field())
    assert np.allclose(zero, 0) and r0 < 1e-12


def test_log_density_values():
    ref = toy_reference()
    m1 = LowRankGP(np.zeros(15), np.array([1.0]), np.eye(15)[:, :1], ref)
    assert log_density(m1, [0.0]) == pytest.approx(-0.9189385332046727, abs=1e-15)
    m2 = LowRankGP(np.zeros(15), np.array([2.0, 1.0]), np.eye(15)[:, :2], ref)
    assert log_density(m2, [1.0, 1.0]) == pytest.approx(-1 - math.log(2 * math.pi), abs=1e-14)


def test_log_density_quadrature():
    ref = toy_reference()
    m1 = LowRankGP(np.zeros(15), np.array([1.0]), np.eye(15)[:, :1], ref)
    x = np.linspace(-10, 10, 20001)
    dens = np.exp([log_density(m1, [v]) for v in x])
    assert trapezoid(dens, x) == pytest.approx(1.0, abs=1e-8)


def test_canonical_signs():
    B = np.array([[0.1, -0.9], [-0.8, 0.2], [0.3, 0.1]])
    C = canonical_signs(B)
    assert C[1, 0] > 0 and C[0, 1] > 0
    assert np.allclose(np.abs(C), np.abs(B))


def test_round_trip_bit_identical(tmp_path):
    m, _, _ = toy_model()
    save_model(m, tmp_path / "m.gpmm")
    back = load_model(tmp_path / "m.gpmm")
    for a, b in ((m.mean, back.mean), (m.eigenvalues, back.eigenvalues), (m.basis, back.basis),
                 (m.reference.vertices, back.reference.vertices)):
        assert np.array_equal(a, b)
    assert model_to_bytes(back) == model_to_bytes(m)


def test_truncated_and_bad_magic():
    m, _, _ = toy_model()
    data = model_to_bytes(m)
    with pytest.raises(ModelTruncatedError):
        model_from_bytes(data[:-10])
    with pytest.raises(ModelTruncatedError):
        model_from_bytes(data[:30])
    with pytest.raises(ModelFormatError):
        model_from_bytes(b"XXXX" + data[4:])


def test_load_rejects_non_orthonormal():
    m, _, _ = toy_model()
    data = bytearray(model_to_bytes(m))
    # corrupt the first basis entry
    off = 4 + 20 + 8 * 15 + 8 * m.rank
    data[off:off + 8] = np.float64(5.0).tobytes()
    with pytest.raises(ModelError):
        model_from_bytes(bytes(data))


def test_pivoted_cholesky_dense():
    rng = np.random.default_rng(2)
    G = rng.normal(size=(10, 10))
    A = G @ G.T
    L = pivoted_cholesky(np.diag(A), lambda j: A[:, j], 10, rtol=0.0)
    assert np.abs(L @ L.T - A).max() < 1e-8


def test_localized_pure_empirical():
    m, _, _ = toy_model()
    loc = build_localized(m, KernelMixtureConfig((1, 0, 0, 0), (math.inf, 10, 5, 1)), m.rank)
    assert np.allclose(loc.eigenvalues, m.eigenvalues, atol=1e-8)
    assert np.abs(loc.covariance() - m.covariance()).max() < 1e-8


def test_localized_distant_points_decouple():
    ref = TriangleMesh(np.array([[0, 0, 0], [1000, 0, 0], [0, 1000, 0.0]]), np.array([[0, 1, 2]]))
    base = build_empirical([np.zeros((3, 3)), np.ones((3, 3))], ref)
    loc = build_localized(base, KernelMixtureConfig((0.0, 1.0), (math.inf, 1.0)), 9)
    C = loc.covariance()
    off = C - np.diag(np.diag(C))
    assert np.abs(off).max() < 1e-12
    assert np.allclose(np.diag(C), 1.0)


def test_localized_trace_full_rank():
    m, _, ref = toy_model(n=10)
    mix = KernelMixtureConfig((0.2, 0.5, 0.3), (math.inf, 10.0, 3.0))
    loc = build_localized(m, mix, 30, rtol=0.0)
    pts = ref.vertices
    d2 = ((pts[:, None] - pts[None]) ** 2).sum(-1)
    K = 0.5 * np.exp(-d2 / 100.0) + 0.3 * np.exp(-d2 / 9.0)
    dense = 0.2 * m.covariance() + np.kron(K, np.eye(3))
    w = np.linalg.eigvalsh(dense)
    assert abs(loc.eigenvalues.sum() - w[w > 1e-10 * w.max()].sum()) < 1e-6
    assert np.abs(loc.covariance() - dense).max() < 1e-6


def test_localized_rank_too_large():
    m, _, _ = toy_model()
    with pytest.raises(ModelError):
        build_localized(m, KernelMixtureConfig((1.0,), (1.0,)), 16)
