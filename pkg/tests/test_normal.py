import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tensormixed.normal import (
    NotPositiveDefiniteError,
    SpdMatrix,
    TensorNormal3,
    log_density,
    sample,
    spd_project,
    spd_project_flagged,
)
from tensormixed.tensor import vec

from conftest import dense_kron, random_spd


def random_dist(rng, dims, mean_scale=1.0):
    return TensorNormal3(
        mean_scale * rng.standard_normal(dims),
        *(random_spd(rng, d) for d in dims),
    )


def dense_cov(d):
    return dense_kron(d.omega.values, d.psi.values, d.sigma.values)


def test_spd_matrix_invariants(rng):
    m = random_spd(rng, 4)
    s = SpdMatrix.from_array(m)
    assert np.allclose(s.chol @ s.chol.T, m, rtol=1e-10, atol=0)
    assert np.isclose(s.logdet, np.linalg.slogdet(m)[1])
    assert np.allclose(s.inverse(), np.linalg.inv(m))
    assert np.allclose(s.inv_chol() @ s.chol, np.eye(4))
    with pytest.raises(ValueError):
        s.values[0, 0] = 1.0


@pytest.mark.parametrize(
    "m",
    [np.array([[1.0, 2.0], [0.0, 1.0]]), np.array([[1.0, 0.0], [0.0, -1.0]]), np.ones((2, 3))],
)
def test_spd_matrix_rejects(m):
    with pytest.raises(ValueError):
        SpdMatrix.from_array(m)


def test_spd_project_identity():
    assert np.array_equal(spd_project(np.eye(3)).values, np.eye(3))


def test_spd_project_floors_negative_eigenvalue():
    m = np.diag([1.0, -1e-14])
    s, hit = spd_project_flagged(m)
    assert hit
    floor = 1e-10 * np.trace(m) / 2
    w = np.linalg.eigvalsh(s.values)
    assert np.isclose(w.min(), floor, rtol=1e-6)
    assert np.isclose(w.max(), 1.0)


def test_spd_project_keeps_pd_matrix(rng):
    m = random_spd(rng, 5)
    s, hit = spd_project_flagged(m)
    assert not hit
    assert np.allclose(s.values, m, atol=1e-12)


def test_spd_project_zero_matrix_uses_reference():
    s = spd_project(np.zeros((3, 3)), reference=2.0)
    assert np.allclose(s.values, 2e-10 * np.eye(3))


def test_spd_project_rejects_nonsquare():
    with pytest.raises(ValueError):
        spd_project(np.ones((2, 3)))


def test_log_density_scalar_standard_normal():
    d = TensorNormal3(np.zeros((1, 1, 1)), [[1.0]], [[1.0]], [[1.0]])
    assert np.isclose(log_density(d, np.zeros((1, 1, 1))), -0.5 * np.log(2 * np.pi))


def test_log_density_matches_dense_gaussian(rng):
    d = random_dist(rng, (3, 2, 2))
    y = d.mean + rng.standard_normal((3, 2, 2))
    expected = stats.multivariate_normal(vec(d.mean), dense_cov(d)).logpdf(vec(y))
    for mode in (None, 1, 2, 3):
        assert abs(log_density(d, y, mode) - expected) <= 1e-8


def test_log_density_batch_and_dimension_check(rng):
    d = random_dist(rng, (3, 2, 2))
    y = rng.standard_normal((5, 3, 2, 2))
    out = log_density(d, y)
    assert out.shape == (5,)
    assert np.isclose(out[2], log_density(d, y[2]))
    with pytest.raises(ValueError):
        log_density(d, np.zeros((2, 2, 2)))


def test_tensor_normal_dim_check(rng):
    with pytest.raises(ValueError):
        TensorNormal3(np.zeros((3, 2, 2)), np.eye(2), np.eye(2), np.eye(2))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(0.05, 20.0))
def test_log_density_gauge_invariance(seed, c):
    rng = np.random.default_rng(seed)
    d = random_dist(rng, (3, 2, 4))
    d2 = TensorNormal3(d.mean, c * d.sigma.values, d.psi.values / c, d.omega.values)
    y = rng.standard_normal((3, 2, 4))
    assert abs(log_density(d, y) - log_density(d2, y)) <= 1e-9 * max(1.0, abs(log_density(d, y)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_log_density_modewise_forms_agree(seed):
    rng = np.random.default_rng(seed)
    d = random_dist(rng, (4, 3, 2))
    y = d.mean + rng.standard_normal((4, 3, 2))
    vals = [log_density(d, y, m) for m in (None, 1, 2, 3)]
    assert max(vals) - min(vals) <= 1e-9


def test_sample_is_seeded(rng):
    d = random_dist(rng, (2, 3, 2))
    a = sample(d, 4, np.random.default_rng(5))
    b = sample(d, 4, np.random.default_rng(5))
    assert a.shape == (4, 2, 3, 2)
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        sample(d, 0, rng)


def test_sample_degenerate_limit(rng):
    eps = 1e-16
    d = TensorNormal3(rng.standard_normal((2, 2, 2)), eps * np.eye(2), eps * np.eye(2), eps * np.eye(2))
    draws = sample(d, 10, rng)
    assert np.abs(draws - d.mean).max() <= 1e-6


def empirical_cov(draws):
    v = np.stack([vec(t) for t in draws])
    return np.cov(v, rowvar=False)


def test_sample_identity_moments(rng):
    d = TensorNormal3(np.zeros((2, 2, 2)), np.eye(2), np.eye(2), np.eye(2))
    cov = empirical_cov(sample(d, 50_000, rng))
    assert np.abs(cov - np.eye(8)).max() <= 0.05


def test_sample_kronecker_moments(rng):
    d = random_dist(rng, (2, 2, 2))
    target = dense_cov(d)
    cov = empirical_cov(sample(d, 50_000, rng))
    assert np.abs(cov - target).max() <= 0.05 * np.abs(target).max()


def test_sample_mean_rate(rng):
    d = random_dist(rng, (2, 2, 2))
    scale = np.sqrt(np.diag(dense_cov(d))).max()
    for n in (1_000, 10_000):
        err = np.abs(sample(d, n, rng).mean(axis=0) - d.mean).max()
        assert err <= 5 * scale / np.sqrt(n)


def test_sample_matches_dense_sampler(rng):
    d = random_dist(rng, (2, 2, 2), mean_scale=0.0)
    target = dense_cov(d)
    ours = empirical_cov(sample(d, 20_000, rng))
    dense = np.cov(rng.multivariate_normal(np.zeros(8), target, size=20_000), rowvar=False)
    assert np.abs(ours - dense).max() <= 0.1 * np.abs(target).max()
