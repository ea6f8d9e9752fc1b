"""SSIM / MS-SSIM / diversity / Dice tests against closed-form oracles."""

import numpy as np
import pytest

from latentvol.metrics import (
    DiversityReport,
    MsSsimParams,
    dice,
    diversity_score,
    ms_ssim,
    ssim,
)
from latentvol.volume import PhantomSpec, generate_phantom


def smooth_image(seed, shape=(32, 32)):
    """Band-limited test image in [-1, 1]: coarse noise, bilinearly upsampled."""
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(-1, 1, size=(4, 4))
    ys = np.linspace(0, 3, shape[0])
    xs = np.linspace(0, 3, shape[1])
    yi = np.minimum(ys.astype(int), 2)
    xi = np.minimum(xs.astype(int), 2)
    fy = (ys - yi)[:, None]
    fx = (xs - xi)[None, :]
    tl = coarse[np.ix_(yi, xi)]
    tr = coarse[np.ix_(yi, xi + 1)]
    bl = coarse[np.ix_(yi + 1, xi)]
    br = coarse[np.ix_(yi + 1, xi + 1)]
    return tl * (1 - fy) * (1 - fx) + tr * (1 - fy) * fx + bl * fy * (1 - fx) + br * fy * fx


class TestSsim:
    def test_identical_is_exactly_one(self):
        a = smooth_image(0)
        assert ssim(a, a) == 1.0

    def test_symmetric(self):
        a, b = smooth_image(1), smooth_image(2)
        assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12

    def test_constant_patch_matches_closed_form(self):
        # Oracle: constant patches have zero local variance, so every window
        # yields luminance * 1 with the plain single-window formula.
        a = np.full((8, 8), 0.5)
        b = np.full((8, 8), 0.25)
        params = MsSsimParams(data_range=1.0)
        c1 = (0.01 * 1.0) ** 2
        expected = (2 * 0.5 * 0.25 + c1) / (0.5 ** 2 + 0.25 ** 2 + c1)
        assert ssim(a, b, params) == pytest.approx(expected, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            ssim(np.zeros((8, 8)), np.zeros((8, 9)))

    def test_window_larger_than_image(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((4, 4)), np.zeros((4, 4)))

    def test_volume_slicewise_vs_3d_windows(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(-1, 1, size=(16, 16, 8))
        b = rng.uniform(-1, 1, size=(16, 16, 8))
        slicewise = ssim(a, b)
        full3d = ssim(a, b, MsSsimParams(windows_3d=True))
        assert slicewise != full3d  # different estimators
        assert ssim(a, a, MsSsimParams(windows_3d=True)) == 1.0


class TestMsSsim:
    def test_identical_is_one(self):
        a = smooth_image(4, (64, 64))
        assert ms_ssim(a, a) == pytest.approx(1.0, abs=1e-9)

    def test_symmetric(self):
        a = smooth_image(5, (64, 64))
        b = smooth_image(6, (64, 64))
        with pytest.warns(UserWarning):
            d = abs(ms_ssim(a, b) - ms_ssim(b, a))
        assert d <= 1e-12

    def test_independent_noise_scores_low(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(-1, 1, size=(64, 64))
        b = rng.uniform(-1, 1, size=(64, 64))
        with pytest.warns(UserWarning):
            score = ms_ssim(a, b)
        assert score < 0.2

    def test_single_scale_equals_ssim(self):
        a = smooth_image(8)
        b = a + 0.1 * smooth_image(9)  # correlated pair, SSIM > 0
        params = MsSsimParams(n_scales=1, weights=(1.0,))
        assert ssim(a, b) > 0
        assert ms_ssim(a, b, params) == pytest.approx(ssim(a, b), abs=1e-9)

    def test_strict_mode_errors_when_scales_infeasible(self):
        a = np.zeros((32, 32))
        with pytest.raises(ValueError, match="scales"):
            ms_ssim(a, a, MsSsimParams(strict=True))

    def test_auto_reduction_warns(self):
        a = smooth_image(10, (32, 32))
        with pytest.warns(UserWarning, match="reducing"):
            ms_ssim(a, a)

    def test_weight_validation(self):
        with pytest.raises(ValueError, match="sum to 1"):
            MsSsimParams(weights=(0.3, 0.3, 0.3, 0.3, 0.3))
        with pytest.raises(ValueError, match="positive"):
            MsSsimParams(n_scales=2, weights=(1.5, -0.5))


class TestDiversity:
    def test_identical_volumes_score_exactly_one(self):
        vol, _ = generate_phantom(PhantomSpec(seed=20))
        report = diversity_score([vol] * 5, n_pairs=20, seed=1)
        assert report.mean == 1.0
        assert all(s == 1.0 for s in report.scores)

    def test_distinct_set_scores_below_duplicated_set(self):
        distinct = [generate_phantom(PhantomSpec(seed=s))[0] for s in range(16)]
        dup = [distinct[0]] * 16
        r_distinct = diversity_score(distinct, n_pairs=40, seed=2)
        r_dup = diversity_score(dup, n_pairs=40, seed=2)
        assert r_distinct.mean < 1.0
        assert r_distinct.mean < r_dup.mean == 1.0

    def test_deterministic_given_seed(self):
        vols = [generate_phantom(PhantomSpec(seed=s))[0] for s in range(4)]
        r1 = diversity_score(vols, n_pairs=10, seed=3)
        r2 = diversity_score(vols, n_pairs=10, seed=3)
        assert r1.scores == r2.scores

    def test_never_pairs_sample_with_itself(self):
        # two maximally different volumes: any self-pair would score 1.0
        a = np.full((16, 16, 4), -1.0)
        a[::2] = 1.0
        b = -a
        report = diversity_score([a, b], n_pairs=25, seed=4)
        assert all(s < 0.999 for s in report.scores)

    def test_requires_two_volumes(self):
        with pytest.raises(ValueError, match="at least 2"):
            diversity_score([np.zeros((16, 16, 4))], n_pairs=5, seed=0)

    def test_report_mean_consistency_enforced(self):
        with pytest.raises(ValueError, match="mean"):
            DiversityReport(mean=0.5, n_pairs=2, scores=(1.0, 1.0), seed=0)


class TestDice:
    def test_identical_nonempty(self):
        m = np.zeros((4, 4, 4))
        m[1:3, 1:3, 1:3] = 1.0
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4)); a[0, 0] = 1
        b = np.zeros((4, 4)); b[3, 3] = 1
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros(8); a[:4] = 1
        b = np.zeros(8); b[2:6] = 1
        assert dice(a, b) == 0.5

    def test_both_empty_defined_as_one(self):
        z = np.zeros((3, 3))
        assert dice(z, z) == 1.0

    def test_rejects_nonbinary(self):
        with pytest.raises(ValueError, match="binary"):
            dice(np.full((2, 2), 0.5), np.zeros((2, 2)))

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(11)
        a = (rng.random((6, 6, 6)) > 0.5).astype(float)
        b = (rng.random((6, 6, 6)) > 0.5).astype(float)
        assert dice(a, b) == dice(b, a)
        assert 0.0 <= dice(a, b) <= 1.0
