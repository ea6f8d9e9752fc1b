"""Vector quantization tests: exhaustive-scan oracles, hand-worked EMA,
straight-through gradient contract, and normalization round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latentvol.autodiff import Tensor
from latentvol.vq import (
    Codebook,
    LatentGrid,
    codebook_extrema,
    ema_update,
    latent_denormalize,
    latent_normalize,
    nearest_code,
    overflow_fraction,
    quantize,
    quantize_array,
    straight_through,
)


def brute_force_nearest(vec, vectors):
    """Independent oracle: explicit linear scan with direct squared distances."""
    best, best_d = 0, np.inf
    for j in range(vectors.shape[0]):
        d = float(np.sum((vec - vectors[j]) ** 2))
        if d < best_d:
            best, best_d = j, d
    return best


def make_codebook(k, d, seed=0, decay=0.99):
    rng = np.random.default_rng(seed)
    vectors = rng.normal(size=(k, d))
    return Codebook(vectors=vectors, ema_cluster_size=np.ones(k),
                    ema_embed_sum=vectors.copy(), decay=decay)


class TestNearestCode:
    def test_exact_row_hit(self):
        cb = make_codebook(16, 8)
        assert nearest_code(cb.vectors[7], cb) == 7

    def test_1d_two_codes(self):
        cb = Codebook(vectors=np.array([[0.0], [1.0]]),
                      ema_cluster_size=np.ones(2), ema_embed_sum=np.array([[0.0], [1.0]]))
        assert nearest_code(np.array([0.4]), cb) == 0
        assert nearest_code(np.array([0.6]), cb) == 1

    def test_tie_breaks_to_smallest_index(self):
        cb = Codebook(vectors=np.array([[1.0], [-1.0]]),
                      ema_cluster_size=np.ones(2), ema_embed_sum=np.array([[1.0], [-1.0]]))
        assert nearest_code(np.array([0.0]), cb) == 0

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        cb = make_codebook(64, 8, seed=1)
        vecs = rng.normal(size=(1000, 8))
        _, q, _ = quantize_array(vecs, cb)
        for i in range(0, 1000, 37):
            assert nearest_code(vecs[i], cb) == brute_force_nearest(vecs[i], cb.vectors)

    def test_wrong_length_rejected(self):
        cb = make_codebook(4, 3)
        with pytest.raises(ValueError):
            nearest_code(np.zeros(5), cb)


class TestQuantize:
    def test_codebook_rows_have_zero_commit(self):
        cb = make_codebook(8, 4)
        rng = np.random.default_rng(3)
        idx = rng.integers(0, 8, size=(2, 3, 2))
        grid = LatentGrid(data=cb.vectors[idx])
        out_idx, q, commit = quantize(grid, cb)
        assert commit == 0.0
        np.testing.assert_array_equal(out_idx, idx)
        assert q.quantized

    def test_single_site_arithmetic(self):
        cb = Codebook(vectors=np.array([[0.0], [1.0]]),
                      ema_cluster_size=np.ones(2), ema_embed_sum=np.array([[0.0], [1.0]]))
        grid = LatentGrid(data=np.full((1, 1, 1, 1), 0.4))
        _, _, commit = quantize(grid, cb)
        assert commit == pytest.approx(0.4 ** 2, abs=1e-15)

    def test_sitewise_matches_nearest_code(self):
        rng = np.random.default_rng(5)
        cb = make_codebook(32, 8, seed=6)
        grid = LatentGrid(data=rng.normal(size=(4, 4, 2, 8)))
        idx, q, _ = quantize(grid, cb)
        for site in [(0, 0, 0), (1, 2, 1), (3, 3, 0), (2, 1, 1)]:
            assert idx[site] == nearest_code(grid.data[site], cb)
            np.testing.assert_array_equal(q.data[site], cb.vectors[idx[site]])

    def test_quantized_vectors_are_exact_rows(self):
        rng = np.random.default_rng(7)
        cb = make_codebook(16, 4, seed=8)
        _, q, _ = quantize(LatentGrid(data=rng.normal(size=(3, 3, 3, 4))), cb)
        flat = q.data.reshape(-1, 4)
        for row in flat:
            assert any(np.array_equal(row, v) for v in cb.vectors)

    def test_dim_mismatch(self):
        cb = make_codebook(8, 4)
        with pytest.raises(ValueError, match="codebook dim"):
            quantize(LatentGrid(data=np.zeros((2, 2, 2, 5))), cb)

    def test_double_quantize_rejected(self):
        cb = make_codebook(8, 4)
        _, q, _ = quantize(LatentGrid(data=np.random.default_rng(0).normal(size=(2, 2, 2, 4))), cb)
        with pytest.raises(ValueError, match="already quantized"):
            quantize(q, cb)


class TestStraightThrough:
    def test_forward_equals_quantized(self):
        rng = np.random.default_rng(9)
        cb = make_codebook(8, 4)
        z = rng.normal(size=(2, 2, 1, 4))
        idx, qv, _ = quantize_array(z, cb)
        out = straight_through(Tensor(z, requires_grad=True), qv)
        np.testing.assert_array_equal(out.data, qv)

    def test_sum_gradient_is_ones(self):
        z = Tensor(np.random.default_rng(10).normal(size=(3, 4)), requires_grad=True)
        q = np.round(z.data)
        straight_through(z, q).sum().backward()
        np.testing.assert_array_equal(z.grad, np.ones((3, 4)))

    def test_downstream_loss_matches_identity_map_fd(self):
        # Oracle: finite differences of the surrogate loss where quantization
        # is replaced by the identity map.
        rng = np.random.default_rng(11)
        cb = make_codebook(6, 3, seed=12)
        z0 = rng.normal(size=(4, 3))
        w = rng.normal(size=(3, 3))

        def surrogate(arr):
            h = np.tanh(arr @ w)
            return float((h ** 2).sum())

        z = Tensor(z0.copy(), requires_grad=True)
        _, qv, _ = quantize_array(z0, cb)
        st_out = straight_through(z, qv)
        h = (st_out @ Tensor(w)).tanh()
        (h * h).sum().backward()

        # numeric gradient of the identity-map surrogate
        num = np.zeros_like(z0)
        eps = 1e-6
        for i in np.ndindex(*z0.shape):
            zp = z0.copy(); zp[i] += eps
            zm = z0.copy(); zm[i] -= eps
            num[i] = (surrogate(zp) - surrogate(zm)) / (2 * eps)
        # the quantized values differ from z0, so the forward values differ;
        # the CONTRACT is about the jacobian: recompute surrogate around qv
        num_q = np.zeros_like(z0)
        for i in np.ndindex(*z0.shape):
            zp = qv.copy(); zp[i] += eps
            zm = qv.copy(); zm[i] -= eps
            num_q[i] = (surrogate(zp) - surrogate(zm)) / (2 * eps)
        scale = np.maximum(np.abs(num_q), 1e-8)
        assert np.max(np.abs(z.grad - num_q) / scale) < 1e-4


class TestEmaUpdate:
    def test_decay_zero_gives_cluster_means(self):
        rng = np.random.default_rng(13)
        cb = make_codebook(2, 1, seed=14, decay=0.0)
        latents = np.concatenate([rng.normal(-2, 0.1, size=(5000, 1)),
                                  rng.normal(2, 0.1, size=(5000, 1))])
        idx, _, _ = quantize_array(latents, cb)
        new = ema_update(cb, latents, idx)
        for code in (0, 1):
            members = latents[idx == code]
            if len(members):
                assert abs(new.vectors[code, 0] - members.mean()) < 1e-6

    def test_decay_one_identity_on_accumulators(self):
        rng = np.random.default_rng(15)
        cb = make_codebook(4, 2, seed=16, decay=1.0)
        latents = rng.normal(size=(64, 2))
        idx, _, _ = quantize_array(latents, cb)
        new = ema_update(cb, latents, idx)
        np.testing.assert_array_equal(new.ema_cluster_size, cb.ema_cluster_size)
        np.testing.assert_array_equal(new.ema_embed_sum, cb.ema_embed_sum)

    def test_unassigned_code_decays(self):
        cb = Codebook(vectors=np.array([[0.0], [10.0]]),
                      ema_cluster_size=np.array([1.0, 1.0]),
                      ema_embed_sum=np.array([[0.0], [10.0]]), decay=0.9)
        latents = np.array([[0.1], [-0.1]])
        new = ema_update(cb, latents, np.array([0, 0]))
        assert new.ema_cluster_size[1] == pytest.approx(0.9)
        np.testing.assert_allclose(new.ema_embed_sum[1], [9.0])

    def test_hand_worked_single_step(self):
        # K=2, d=1, decay=0.9, eps=1e-5; worked by hand:
        #   latents [0.1, -0.1, 0.9] -> assignments [0, 0, 1]
        #   counts n = [2, 1]; sums s = [0.0, 0.9]
        #   N' = 0.9*[1,1] + 0.1*[2,1] = [1.1, 1.0]
        #   m' = 0.9*[0,1] + 0.1*[0.0,0.9] = [0.0, 0.99]
        #   total = 2.1
        #   N~_i = (N'_i + 1e-5)/(2.1 + 2e-5) * 2.1
        #   vectors = m'/N~ = [0.0, 0.99/N~_1]
        cb = Codebook(vectors=np.array([[0.0], [1.0]]),
                      ema_cluster_size=np.array([1.0, 1.0]),
                      ema_embed_sum=np.array([[0.0], [1.0]]),
                      decay=0.9, eps=1e-5)
        latents = np.array([[0.1], [-0.1], [0.9]])
        idx = np.array([nearest_code(v, cb) for v in latents])
        np.testing.assert_array_equal(idx, [0, 0, 1])
        new = ema_update(cb, latents, idx)

        n0 = 0.9 * 1.0 + 0.1 * 2  # 1.1
        n1 = 0.9 * 1.0 + 0.1 * 1  # 1.0
        m0 = 0.9 * 0.0 + 0.1 * 0.0
        m1 = 0.9 * 1.0 + 0.1 * 0.9  # 0.99
        total = n0 + n1
        sm0 = (n0 + 1e-5) / (total + 2e-5) * total
        sm1 = (n1 + 1e-5) / (total + 2e-5) * total
        np.testing.assert_allclose(new.ema_cluster_size, [n0, n1], atol=1e-9)
        np.testing.assert_allclose(new.ema_embed_sum, [[m0], [m1]], atol=1e-9)
        np.testing.assert_allclose(new.vectors, [[m0 / sm0], [m1 / sm1]], atol=1e-9)


class TestExtremaAndNormalization:
    def test_extrema_example(self):
        cb = Codebook(vectors=np.array([[-2.0, 0.0], [1.0, 3.0]]),
                      ema_cluster_size=np.ones(2),
                      ema_embed_sum=np.array([[-2.0, 0.0], [1.0, 3.0]]))
        assert codebook_extrema(cb) == (-2.0, 3.0)

    def test_degenerate_codebook(self):
        cb = Codebook(vectors=np.full((3, 2), 0.5), ema_cluster_size=np.ones(3),
                      ema_embed_sum=np.full((3, 2), 0.5))
        with pytest.raises(ValueError, match="degenerate"):
            codebook_extrema(cb)

    def test_extrema_matches_exhaustive_scan(self):
        cb = make_codebook(64, 8, seed=17)
        cmin, cmax = codebook_extrema(cb)
        lo = min(float(v) for v in cb.vectors.reshape(-1))
        hi = max(float(v) for v in cb.vectors.reshape(-1))
        assert (cmin, cmax) == (lo, hi)

    def test_endpoints(self):
        assert latent_normalize(np.array(0.25), 0.25, 2.0) == -1.0
        assert latent_normalize(np.array(2.0), 0.25, 2.0) == 1.0
        assert latent_denormalize(np.array(-1.0), 0.25, 2.0) == 0.25
        assert latent_denormalize(np.array(1.0), 0.25, 2.0) == 2.0
        assert latent_denormalize(np.array(0.0), 0.0, 3.0) == 1.5

    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_roundtrip_property(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(8,)) * 3
        cmin, cmax = -1.7, 2.2
        back = latent_denormalize(latent_normalize(z, cmin, cmax), cmin, cmax)
        np.testing.assert_allclose(back, z, atol=1e-10)

    def test_quantized_codes_always_in_unit_range(self):
        cb = make_codebook(32, 8, seed=18)
        cmin, cmax = codebook_extrema(cb)
        norm = latent_normalize(cb.vectors, cmin, cmax)
        assert norm.min() >= -1.0 and norm.max() <= 1.0

    def test_invalid_extrema_rejected(self):
        with pytest.raises(ValueError):
            latent_normalize(np.zeros(3), 1.0, 1.0)
        with pytest.raises(ValueError):
            latent_denormalize(np.zeros(3), 2.0, 1.0)

    def test_overflow_fraction(self):
        z = np.array([-1.5, -0.5, 0.0, 0.5, 1.5, 2.0])
        assert overflow_fraction(z) == pytest.approx(0.5)
