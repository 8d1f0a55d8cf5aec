import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tensormixed.tensor import (
    frob_norm,
    kron,
    matricize,
    mode_product,
    multi_mode_product,
    tensorize,
    tucker_apply,
    unvec,
    vec,
)

from conftest import dense_kron, random_orthonormal

dims_st = st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4))


def brute_vec(t):
    J, K, L = t.shape
    out = np.empty(J * K * L)
    for j in range(J):
        for k in range(K):
            for l in range(L):
                out[j + k * J + l * J * K] = t[j, k, l]
    return out


def brute_mode_product(t, mode, u):
    J, K, L = t.shape
    shape = list(t.shape)
    shape[mode - 1] = u.shape[0]
    out = np.zeros(shape)
    for idx in np.ndindex(*shape):
        for s in range(t.shape[mode - 1]):
            src = list(idx)
            src[mode - 1] = s
            out[idx] += t[tuple(src)] * u[idx[mode - 1], s]
    return out


def test_vec_scalar():
    assert vec(np.full((1, 1, 1), 3.5)).tolist() == [3.5]


def test_vec_small_ordering():
    t = np.zeros((2, 2, 1))
    t[0, 0, 0], t[1, 0, 0], t[0, 1, 0], t[1, 1, 0] = 1, 2, 3, 4
    assert vec(t).tolist() == [1, 2, 3, 4]


def test_vec_matches_position_formula(rng):
    t = rng.standard_normal((4, 3, 2))
    assert np.array_equal(vec(t), brute_vec(t))
    assert np.array_equal(unvec(vec(t), t.shape), t)


def test_unvec_rejects_wrong_length():
    with pytest.raises(ValueError):
        unvec(np.zeros(5), (2, 2, 2))


def test_kronecker_identity_for_multimode_product(rng):
    x = rng.standard_normal((4, 3, 2))
    a, b, c = rng.standard_normal((5, 4)), rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
    lhs = vec(multi_mode_product(x, [a, b, c]))
    rhs = dense_kron(c, b, a) @ vec(x)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(rhs)


def test_matricize_all_ones():
    assert np.array_equal(matricize(np.ones((2, 2, 2)), 1), np.ones((2, 4)))


def test_matricize_column_conventions(rng):
    t = rng.standard_normal((3, 2, 2))
    J, K, L = t.shape
    m1, m2, m3 = matricize(t, 1), matricize(t, 2), matricize(t, 3)
    for j in range(J):
        for k in range(K):
            for l in range(L):
                assert m1[j, k + l * K] == t[j, k, l]
                assert m2[k, j + l * J] == t[j, k, l]
                assert m3[l, j + k * J] == t[j, k, l]
    # mode-1 unfolding is vec reshaped into J x KL column blocks
    assert np.array_equal(m1, brute_vec(t).reshape(J, K * L, order="F"))


@pytest.mark.parametrize("mode", [1, 2, 3])
def test_tensorize_roundtrip(rng, mode):
    t = rng.standard_normal((4, 3, 2))
    assert np.array_equal(tensorize(matricize(t, mode), mode, t.shape), t)


def test_tensorize_column_vector_and_zero():
    v = np.arange(6.0).reshape(6, 1)
    assert np.array_equal(tensorize(v, 1, (6, 1, 1))[:, 0, 0], v[:, 0])
    assert not tensorize(np.zeros((3, 8)), 1, (3, 4, 2)).any()


def test_tensorize_shape_mismatch():
    with pytest.raises(ValueError):
        tensorize(np.zeros((3, 7)), 1, (3, 4, 2))


@pytest.mark.parametrize("mode", [0, 4, "1"])
def test_invalid_mode(rng, mode):
    with pytest.raises(ValueError):
        matricize(rng.standard_normal((2, 2, 2)), mode)


@pytest.mark.parametrize("mode", [1, 2, 3])
def test_mode_product_matches_elementwise_definition(rng, mode):
    t = rng.standard_normal((3, 2, 4))
    u = rng.standard_normal((5, t.shape[mode - 1]))
    got = mode_product(t, mode, u)
    assert np.allclose(got, brute_mode_product(t, mode, u), atol=1e-12)
    assert np.allclose(matricize(got, mode), u @ matricize(t, mode), atol=1e-12)


def test_mode_product_identity_and_composition(rng):
    t = rng.standard_normal((3, 2, 2))
    assert np.allclose(mode_product(t, 1, np.eye(3)), t)
    a, a2 = rng.standard_normal((2, 3)), rng.standard_normal((4, 2))
    assert np.allclose(mode_product(mode_product(t, 1, a), 1, a2), mode_product(t, 1, a2 @ a))


def test_mode_product_dimension_mismatch(rng):
    with pytest.raises(ValueError):
        mode_product(rng.standard_normal((3, 2, 2)), 2, np.eye(3))


def test_mode_product_on_batch(rng):
    y = rng.standard_normal((4, 3, 2, 2))
    u = rng.standard_normal((5, 2))
    got = mode_product(y, 3, u)
    assert got.shape == (4, 3, 2, 5)
    for i in range(4):
        assert np.allclose(got[i], mode_product(y[i], 3, u))


def test_tucker_apply(rng):
    core = rng.standard_normal((2, 3, 2))
    assert np.allclose(tucker_apply(core, np.eye(2), np.eye(3), np.eye(2)), core)
    a1, a2, a3 = rng.standard_normal((4, 2)), rng.standard_normal((5, 3)), rng.standard_normal((3, 2))
    got = tucker_apply(core, a1, a2, a3)
    assert np.allclose(vec(got), dense_kron(a3, a2, a1) @ vec(core))
    assert not tucker_apply(np.zeros((2, 3, 2)), a1, a2, a3).any()
    with pytest.raises(ValueError):
        tucker_apply(core, a2, a1, a3)


def test_kron(rng):
    assert np.array_equal(kron(np.eye(2), np.eye(3)), np.eye(6))
    b = rng.standard_normal((2, 3))
    assert np.allclose(kron(np.array([[2.0]]), b), 2 * b)
    a, c = rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
    d = rng.standard_normal((3, 4))
    assert np.allclose(kron(a, b) @ kron(c, d), kron(a @ c, b @ d))


def test_frob_norm(rng):
    assert frob_norm(np.zeros((2, 2, 2))) == 0
    e = np.zeros((2, 3, 2))
    e[1, 2, 0] = 1
    assert frob_norm(e) == 1
    t = rng.standard_normal((3, 4, 2))
    assert np.isclose(frob_norm(t), np.sqrt((t**2).sum()))


@settings(max_examples=60, deadline=None)
@given(dims=dims_st, mode=st.sampled_from([1, 2, 3]), seed=st.integers(0, 2**32 - 1))
def test_bijections(dims, mode, seed):
    t = np.random.default_rng(seed).standard_normal(dims)
    assert np.array_equal(unvec(vec(t), dims), t)
    assert np.array_equal(tensorize(matricize(t, mode), mode, dims), t)


@settings(max_examples=60, deadline=None)
@given(dims=st.tuples(st.integers(1, 6), st.integers(1, 5), st.integers(1, 4)), seed=st.integers(0, 2**32 - 1))
def test_kronecker_identity_property(dims, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(dims)
    mats = [rng.standard_normal((rng.integers(1, 5), d)) for d in dims]
    lhs = vec(multi_mode_product(x, mats))
    rhs = dense_kron(mats[2], mats[1], mats[0]) @ vec(x)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * max(np.linalg.norm(rhs), 1e-300)


@settings(max_examples=40, deadline=None)
@given(dims=dims_st, mode=st.sampled_from([1, 2, 3]), seed=st.integers(0, 2**32 - 1))
def test_orthonormal_projection_is_idempotent(dims, mode, seed):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal(dims)
    d = dims[mode - 1]
    u = random_orthonormal(rng, d, rng.integers(1, d + 1))
    proj = u @ u.T
    once = mode_product(t, mode, proj)
    assert np.allclose(mode_product(once, mode, proj), once, atol=1e-12)
