import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import orthonormal, peak_bytes
from sct.errors import MaterializationError, NumericError, RankError, ShapeError
from sct.spectral import (
    MAGIC,
    EnergyRank,
    FixedRank,
    SpectralFactors,
    energy_rank,
    factors_from_bytes,
    factors_to_bytes,
    from_dense,
    init_scratch,
    parse_rank_policy,
    read_factors,
    spectral_backward,
    spectral_forward,
    to_dense,
)


def scalar_factors():
    return SpectralFactors(u=np.array([[1.0]]), s=np.array([3.0]), v=np.array([[1.0]]))


def random_factors(rng, m, n, k, bias=False):
    return SpectralFactors(
        u=orthonormal(rng, m, k),
        s=rng.standard_normal(k),
        v=orthonormal(rng, n, k),
        bias=rng.standard_normal(n) if bias else None,
    )


def fd_grad(loss, arr, h=1e-6):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        plus = loss()
        arr[idx] = orig - h
        minus = loss()
        arr[idx] = orig
        g[idx] = (plus - minus) / (2 * h)
    return g


def max_rel(a, b):
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-3 * scale)))


class TestForward:
    def test_scalar_chain(self):
        y, cache = spectral_forward(scalar_factors(), np.array([[2.0]]))
        np.testing.assert_array_equal(y, [[6.0]])
        np.testing.assert_array_equal(cache.h, [[2.0]])

    def test_zero_s(self, rng):
        f = random_factors(rng, 4, 3, 2)
        f.s[:] = 0.0
        y, _ = spectral_forward(f, rng.standard_normal((5, 4)))
        np.testing.assert_array_equal(y, np.zeros((5, 3)))

    def test_dense_reconstruction_oracle(self, rng):
        f = random_factors(rng, 4, 3, 2)
        x = rng.standard_normal((6, 4))
        w = f.u @ np.diag(f.s) @ f.v.T
        y, _ = spectral_forward(f, x)
        assert np.max(np.abs(y - x @ w)) < 1e-12

    def test_bias_added_per_row(self, rng):
        f = random_factors(rng, 4, 3, 2, bias=True)
        x = rng.standard_normal((2, 4))
        y, _ = spectral_forward(f, x)
        np.testing.assert_allclose(y, x @ (f.u * f.s) @ f.v.T + f.bias, atol=1e-14)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            spectral_forward(random_factors(rng, 4, 3, 2), np.zeros((2, 5)))

    def test_column_sign_flip_invariance(self, rng):
        f = random_factors(rng, 7, 5, 3)
        x = rng.standard_normal((4, 7))
        y0, _ = spectral_forward(f, x)
        g = f.copy()
        g.u[:, 1] *= -1
        g.v[:, 1] *= -1
        y1, _ = spectral_forward(g, x)
        assert np.max(np.abs(y0 - y1)) < 1e-12


class TestBackward:
    def test_scalar_chain_rule(self):
        f = scalar_factors()
        _, cache = spectral_forward(f, np.array([[2.0]]))
        g = 0.7
        grads = spectral_backward(f, cache, np.array([[g]]))
        np.testing.assert_allclose(grads.du, [[6 * g]])
        np.testing.assert_allclose(grads.ds, [2 * g])
        np.testing.assert_allclose(grads.dv, [[6 * g]])
        np.testing.assert_allclose(grads.dx, [[3 * g]])

    def test_zero_upstream(self, rng):
        f = random_factors(rng, 5, 4, 2, bias=True)
        _, cache = spectral_forward(f, rng.standard_normal((3, 5)))
        grads = spectral_backward(f, cache, np.zeros((3, 4)))
        for arr in (grads.du, grads.ds, grads.dv, grads.dx, grads.dbias):
            assert not np.any(arr)

    def test_finite_difference_oracle(self, rng):
        f = random_factors(rng, 5, 4, 2)
        x = rng.standard_normal((3, 5))
        c = rng.standard_normal((3, 4))
        _, cache = spectral_forward(f, x)
        grads = spectral_backward(f, cache, c)
        loss = lambda: float(np.sum(spectral_forward(f, x)[0] * c))
        for analytic, arr in ((grads.du, f.u), (grads.ds, f.s), (grads.dv, f.v), (grads.dx, x)):
            assert max_rel(analytic, fd_grad(loss, arr)) < 1e-6

    def test_non_finite_upstream(self, rng):
        f = random_factors(rng, 3, 3, 1)
        _, cache = spectral_forward(f, np.ones((1, 3)))
        with pytest.raises(NumericError):
            spectral_backward(f, cache, np.array([[np.nan, 0.0, 0.0]]))

    def test_upstream_shape(self, rng):
        f = random_factors(rng, 3, 3, 1)
        _, cache = spectral_forward(f, np.ones((2, 3)))
        with pytest.raises(ShapeError):
            spectral_backward(f, cache, np.ones((3, 3)))

    def test_hundred_random_configs(self):
        gen = np.random.default_rng(99)
        for _ in range(100):
            m, n = int(gen.integers(1, 17)), int(gen.integers(1, 17))
            k, b = int(gen.integers(1, min(m, n) + 1)), int(gen.integers(1, 5))
            f = random_factors(gen, m, n, k)
            x, c = gen.standard_normal((b, m)), gen.standard_normal((b, n))
            _, cache = spectral_forward(f, x)
            grads = spectral_backward(f, cache, c)
            loss = lambda: float(np.sum(spectral_forward(f, x)[0] * c))
            for analytic, arr in ((grads.du, f.u), (grads.ds, f.s), (grads.dv, f.v)):
                assert max_rel(analytic, fd_grad(loss, arr)) < 1e-6

    def test_no_m_by_n_buffer(self, rng):
        m, n, k, b = 512, 2048, 16, 4
        f = random_factors(rng, m, n, k)
        x = rng.standard_normal((b, m))
        gy = rng.standard_normal((b, n))

        def step():
            _, cache = spectral_forward(f, x)
            return spectral_backward(f, cache, gy)

        peak, _ = peak_bytes(step)
        assert peak < m * n * 4


class TestEnergyPolicy:
    def test_cumulative_sum_oracle(self):
        # energies 16/25 = 0.64, 25/25 = 1.0
        assert energy_rank([4.0, 3.0], 0.95) == 2
        assert energy_rank([4.0, 3.0], 0.64) == 1

    def test_tiny_tau_gives_one(self):
        assert energy_rank([5.0, 4.0, 3.0], 1e-12) == 1

    def test_zero_tail_never_increases_k(self):
        assert energy_rank([2.0, 1.0, 0.0, 0.0], 1.0) == 2

    def test_all_zero(self):
        f = from_dense(np.zeros((4, 3)), {"energy": 0.95})
        assert f.k == 1
        np.testing.assert_array_equal(f.s, [0.0])

    def test_tau_out_of_range(self):
        with pytest.raises(RankError):
            energy_rank([1.0], 0.0)

    def test_from_dense_energy_picks_minimal_k(self, rng):
        u, v = orthonormal(rng, 6, 3), orthonormal(rng, 5, 3)
        w = u @ np.diag([4.0, 3.0, 0.1]) @ v.T
        assert from_dense(w, EnergyRank(0.95)).k == 2


class TestConversion:
    def test_fixed_rank_out_of_range(self, rng):
        with pytest.raises(RankError):
            from_dense(rng.standard_normal((4, 3)), FixedRank(4))
        with pytest.raises(RankError):
            from_dense(rng.standard_normal((4, 3)), 0)

    def test_full_rank_matches_dense_forward(self, rng):
        w = rng.standard_normal((8, 6))
        f = from_dense(w, 6)
        x = rng.standard_normal((5, 8))
        y, _ = spectral_forward(f, x)
        ref = x @ w
        assert np.max(np.abs(y - ref)) < 1e-10 * np.max(np.abs(ref))

    def test_round_trip(self, rng):
        w = rng.standard_normal((7, 9))
        back = to_dense(from_dense(w, 7))
        assert np.max(np.abs(back - w)) < 1e-10 * np.max(np.abs(w))

    def test_truncation_keeps_leading_triplets(self, rng):
        w = rng.standard_normal((10, 8))
        f = from_dense(w, 3)
        np.testing.assert_allclose(f.s, np.linalg.svd(w, compute_uv=False)[:3], rtol=1e-12)

    def test_to_dense_scalar_and_zero(self, rng):
        np.testing.assert_array_equal(to_dense(scalar_factors()), [[3.0]])
        f = random_factors(rng, 4, 3, 2)
        f.s[:] = 0
        np.testing.assert_array_equal(to_dense(f), np.zeros((4, 3)))

    def test_to_dense_guard(self, rng):
        f = random_factors(rng, 64, 64, 2)
        with pytest.raises(MaterializationError, match="guard 100"):
            to_dense(f, guard=100)

    def test_parse_rank_policy(self):
        assert parse_rank_policy(8) == FixedRank(8)
        assert parse_rank_policy({"k": 4}) == FixedRank(4)
        assert parse_rank_policy({"energy": 0.95}) == EnergyRank(0.95)
        with pytest.raises(RankError):
            parse_rank_policy({"energy": 0.9, "k": 2})
        with pytest.raises(RankError):
            parse_rank_policy(True)


class TestScratchInit:
    def test_frobenius_identity(self):
        m, n, k, std = 12, 20, 5, 0.02
        f = init_scratch(m, n, k, std, seed=3)
        dense = to_dense(f)
        np.testing.assert_allclose(np.sum(dense**2), np.sum(f.s**2), rtol=1e-12)
        np.testing.assert_allclose(np.sum(f.s**2), std**2 * m * n, rtol=1e-12)

    def test_scalar(self):
        f = init_scratch(1, 1, 1, 0.02, seed=0)
        np.testing.assert_allclose(f.s, [0.02])

    def test_deterministic(self):
        a, b = init_scratch(9, 7, 3, seed=5), init_scratch(9, 7, 3, seed=5)
        for name in ("u", "s", "v"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))

    def test_rank_error(self):
        with pytest.raises(RankError):
            init_scratch(4, 3, 4)


@settings(max_examples=50, deadline=None)
@given(m=st.integers(1, 20), n=st.integers(1, 20), data=st.data())
def test_param_count_identity(m, n, data):
    k = data.draw(st.integers(1, min(m, n)))
    bias = data.draw(st.booleans())
    f = init_scratch(m, n, k, seed=0, bias=bias)
    assert f.param_count() == k * (m + n + 1) + (n if bias else 0)
    assert f.param_count() == sum(a.size for a in (f.u, f.s, f.v) + ((f.bias,) if bias else ()))


class TestSerialization:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("bias", [False, True])
    def test_round_trip(self, rng, dtype, bias):
        f = random_factors(rng, 6, 4, 3, bias=bias).astype(dtype)
        g = factors_from_bytes(factors_to_bytes(f))
        assert g.dtype == dtype
        for name in ("u", "s", "v", "bias"):
            a, b = getattr(f, name), getattr(g, name)
            if a is None:
                assert b is None
            else:
                np.testing.assert_array_equal(a, b)

    def test_layout(self, rng):
        f = random_factors(rng, 2, 3, 1)
        raw = factors_to_bytes(f)
        assert raw[:8] == MAGIC
        header = np.frombuffer(raw[8:32], dtype="<u8")
        np.testing.assert_array_equal(header, [2, 3, 1])
        assert raw[32] == 8 and raw[33] == 0
        body = np.frombuffer(raw[34:], dtype="<f8")
        np.testing.assert_array_equal(body, np.concatenate([f.u.ravel(), f.s, f.v.ravel()]))

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            read_factors(io.BytesIO(b"NOTMAGIC" + b"\0" * 40))
