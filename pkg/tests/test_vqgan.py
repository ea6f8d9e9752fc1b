"""Stage-1 model tests: shape contracts, loss fixtures, training-step
degeneracy and determinism."""

import numpy as np
import pytest

from latentvol.autodiff import Tensor, straight_through
from latentvol.nn import Adam
from latentvol.vq import quantize_array
from latentvol.vqgan import (
    RandomConvFeatures,
    SliceDiscriminator,
    VolumeDiscriminator,
    VqGanLossReport,
    VqGanLossWeights,
    VqGanModel,
    VqGanTrainState,
    decode,
    encode,
    feature_matching_loss,
    hinge_losses,
    psnr,
    random_slice,
    recon_loss,
    train_step_vqgan,
)
from latentvol.volume import PhantomSpec, Volume, generate_phantom


class TestShapeContracts:
    def test_full_resolution_anisotropic(self):
        # 256x256x32 at compression (4,4,4) -> 64x64x8 latent
        model = VqGanModel(compression=(4, 4, 4), latent_channels=8, base=4,
                           mults=(1, 1), codebook_size=16, seed=0)
        v = Volume(data=np.zeros((256, 256, 32), dtype=np.float32))
        grid = encode(model, v)
        assert grid.data.shape == (64, 64, 8, 8)
        assert not grid.quantized

    def test_isotropic_compression_two(self):
        model = VqGanModel(compression=(2, 2, 2), latent_channels=8, base=4,
                           mults=(1,), codebook_size=16, seed=1)
        v = Volume(data=np.zeros((64, 64, 64), dtype=np.float32))
        assert encode(model, v).data.shape == (32, 32, 32, 8)

    def test_small_grid_arithmetic(self):
        model = VqGanModel(compression=(4, 4, 4), latent_channels=8, base=4,
                           mults=(1, 1), codebook_size=16, seed=2)
        v = Volume(data=np.zeros((16, 16, 8), dtype=np.float32))
        assert encode(model, v).data.shape == (4, 4, 2, 8)

    def test_indivisible_shape_rejected(self):
        model = VqGanModel(compression=(4, 4, 4), latent_channels=8, base=4,
                           mults=(1, 1), codebook_size=16, seed=3)
        v = Volume(data=np.zeros((18, 16, 8), dtype=np.float32))
        with pytest.raises(ValueError, match="divisible"):
            encode(model, v)

    def test_decode_shape_and_bounds(self):
        model = VqGanModel(compression=(4, 4, 4), latent_channels=8, base=4,
                           mults=(1, 1), codebook_size=16, seed=4)
        v = Volume(data=np.random.default_rng(0).uniform(-1, 1, (16, 16, 8)).astype(np.float32))
        grid = encode(model, v)
        from latentvol.vq import quantize
        _, q, _ = quantize(grid, model.codebook)
        out = decode(model, q)
        assert out.shape == (16, 16, 8)
        assert out.data.min() >= -1.0 and out.data.max() <= 1.0

    def test_decode_rejects_unquantized(self):
        model = VqGanModel(compression=(2, 2, 2), latent_channels=8, base=4,
                           mults=(1,), codebook_size=16, seed=5)
        v = Volume(data=np.zeros((8, 8, 8), dtype=np.float32))
        grid = encode(model, v)
        with pytest.raises(ValueError, match="quantized"):
            decode(model, grid)

    def test_invalid_compression_rejected(self):
        with pytest.raises(ValueError, match="powers of two"):
            VqGanModel(compression=(3, 2, 2), latent_channels=8, base=4, codebook_size=16)


class TestReconLoss:
    def test_zero_for_identical(self):
        x = np.random.default_rng(1).normal(size=(2, 1, 8, 8, 4))
        assert recon_loss(x, x).item() == 0.0

    def test_l1_symmetry(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(1, 1, 8, 8, 4)), rng.normal(size=(1, 1, 8, 8, 4))
        assert recon_loss(x, y).item() == recon_loss(y, x).item()

    def test_monotone_in_noise_level(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1, 1, size=(1, 1, 8, 8, 4))
        noise = rng.standard_normal(x.shape)
        losses = [recon_loss(x, x + s * noise).item() for s in (0.05, 0.1, 0.2)]
        assert losses[0] < losses[1] < losses[2]

    def test_extractor_path_monotone_and_zero(self):
        extractor = RandomConvFeatures(base=4, seed=9)
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, size=(1, 1, 8, 8, 4))
        noise = rng.standard_normal(x.shape)
        assert recon_loss(x, x, extractor).item() == 0.0
        losses = [recon_loss(x, x + s * noise, extractor).item() for s in (0.05, 0.1, 0.2)]
        assert losses[0] < losses[1] < losses[2]


class TestRandomSlice:
    def test_depth_one_always_zero(self):
        v = Volume(data=np.zeros((4, 4, 1), dtype=np.float32))
        _, k = random_slice(v, np.random.default_rng(0))
        assert k == 0

    def test_deterministic(self):
        v = Volume(data=np.arange(64, dtype=np.float32).reshape(4, 4, 4))
        s1, k1 = random_slice(v, np.random.default_rng(5))
        s2, k2 = random_slice(v, np.random.default_rng(5))
        assert k1 == k2
        np.testing.assert_array_equal(s1, s2)

    def test_uniformity_over_depth(self):
        v = Volume(data=np.zeros((2, 2, 32), dtype=np.float32))
        rng = np.random.default_rng(6)
        counts = np.zeros(32)
        for _ in range(10_000):
            _, k = random_slice(v, rng)
            counts[k] += 1
        freqs = counts / 10_000
        assert freqs.min() >= 0.02 and freqs.max() <= 0.045


class TestFeatureMatching:
    def test_identical_zero(self):
        feats = [np.ones((1, 2, 4, 4)), np.zeros((1, 4, 2, 2))]
        assert feature_matching_loss(feats, [f.copy() for f in feats]).item() == 0.0

    def test_constant_offset(self):
        assert feature_matching_loss([np.zeros((1, 1, 2, 2))],
                                     [np.ones((1, 1, 2, 2))]).item() == 1.0

    def test_mean_of_layer_means(self):
        real = [np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 2))]
        fake = [np.full((1, 1, 2, 2), 0.5), np.full((1, 1, 2, 2), 1.5)]
        assert feature_matching_loss(real, fake).item() == pytest.approx(1.0)

    def test_layer_mismatch(self):
        with pytest.raises(ValueError, match="layer count"):
            feature_matching_loss([np.zeros((1, 1, 2, 2))], [])


class TestHingeLosses:
    def test_margin_satisfied(self):
        disc, _ = hinge_losses(np.ones((4, 4)), -np.ones((4, 4)))
        assert disc == 0.0

    def test_zero_fake_gen(self):
        _, gen = hinge_losses(np.ones((4, 4)), np.zeros((4, 4)))
        assert gen == 0.0

    def test_zero_logits_disc(self):
        disc, _ = hinge_losses(np.zeros((4, 4)), np.zeros((4, 4)))
        assert disc == 2.0


class TestDiscriminators:
    def test_patch_outputs_are_maps(self):
        sd = SliceDiscriminator(base=8, seed=0)
        logits, feats = sd(Tensor(np.zeros((2, 1, 16, 16))))
        assert logits.ndim == 4 and logits.shape[2] > 1
        assert len(feats) == 2

        vd = VolumeDiscriminator(base=8, seed=1)
        logits3, feats3 = vd(Tensor(np.zeros((2, 1, 16, 16, 8))))
        assert logits3.ndim == 5 and logits3.shape[2] > 1
        assert len(feats3) == 2


def make_batch(n=4, shape=(16, 16, 8), seed=0):
    vols = [generate_phantom(PhantomSpec(seed=seed + i, shape=shape))[0].data
            for i in range(n)]
    return np.stack(vols)[:, None].astype(np.float64)


def make_state(seed=0, lr=1e-3):
    model = VqGanModel(compression=(2, 2, 2), latent_channels=8, base=8,
                       mults=(1,), codebook_size=64, seed=seed)
    return VqGanTrainState.create(model, lr=lr, seed=seed, disc_base=8)


class TestTrainStep:
    def test_gan_disabled_matches_pure_autoencoder_bitwise(self):
        batch = make_batch(2)
        state = make_state(seed=7)
        report = train_step_vqgan(state, batch, adv_weight=0.0)

        # independent pure-AE step on an identically initialized model
        model = VqGanModel(compression=(2, 2, 2), latent_channels=8, base=8,
                           mults=(1,), codebook_size=64, seed=7)
        opt = Adam(model.parameters(), lr=1e-3, betas=(0.5, 0.9))
        x = Tensor(batch)
        z = model.encode_t(x)
        sites = np.transpose(z.data, (0, 2, 3, 4, 1))
        idx, q_sites, _ = quantize_array(sites, model.codebook)
        zq = np.transpose(q_sites, (0, 4, 1, 2, 3))
        commit = ((z - Tensor(zq)) ** 2).mean()
        x_hat = model.decode_t(straight_through(z, zq))
        rec = (x - x_hat).abs().mean()
        total = 1.0 * rec + 0.25 * commit
        opt.zero_grad()
        total.backward()
        opt.step()

        assert report.recon == rec.item()
        assert report.commit == commit.item()
        assert report.gen_slice == 0.0 and report.disc_volume == 0.0
        for (name_a, pa), (name_b, pb) in zip(state.model.named_parameters(),
                                              model.named_parameters()):
            assert name_a == name_b
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_two_runs_identical(self):
        batch = make_batch(2)
        reports = []
        for _ in range(2):
            state = make_state(seed=8)
            r = [train_step_vqgan(state, batch, adv_weight=1.0) for _ in range(3)]
            reports.append(r)
        for a, b in zip(*reports):
            assert a == b

    def test_optimizer_param_sets_disjoint(self):
        state = make_state(seed=9)
        g_ids = {id(p) for p in state.g_opt.params}
        d_ids = {id(p) for p in state.d_opt.params}
        assert not (g_ids & d_ids)
        # generator optimizer covers exactly the model; discs are untouched by it
        assert g_ids == {id(p) for p in state.model.parameters()}

    def test_warmup_leaves_discriminators_untouched(self):
        state = make_state(seed=10)
        before_s = state.slice_disc.param_checksum()
        before_v = state.volume_disc.param_checksum()
        cb_before = state.model.codebook.vectors.copy()
        train_step_vqgan(state, make_batch(2), adv_weight=0.0)
        assert state.slice_disc.param_checksum() == before_s
        assert state.volume_disc.param_checksum() == before_v
        assert not np.array_equal(state.model.codebook.vectors, cb_before)

    def test_adversarial_step_updates_both(self):
        state = make_state(seed=11)
        g_before = state.model.param_checksum()
        d_before = state.slice_disc.param_checksum()
        report = train_step_vqgan(state, make_batch(2), adv_weight=1.0)
        assert state.model.param_checksum() != g_before
        assert state.slice_disc.param_checksum() != d_before
        assert report.disc_slice > 0

    @pytest.mark.slow
    def test_short_overfit_improves_recon(self):
        batch = make_batch(4, seed=3)
        state = make_state(seed=12, lr=2e-3)
        losses = [train_step_vqgan(state, batch, adv_weight=0.0).recon for _ in range(60)]
        assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


class TestReportAndPsnr:
    def test_nonfinite_report_rejected(self):
        with pytest.raises(FloatingPointError):
            VqGanLossReport(recon=float("nan"), commit=0, gen_slice=0, gen_volume=0,
                            disc_slice=0, disc_volume=0, fm_slice=0, fm_volume=0)

    def test_psnr_basics(self):
        x = np.zeros((4, 4))
        assert psnr(x, x) == float("inf")
        y = np.full((4, 4), 0.2)
        assert psnr(x, y, data_range=2.0) == pytest.approx(10 * np.log10(4 / 0.04))

    def test_total_generator_weighting(self):
        r = VqGanLossReport(recon=1.0, commit=2.0, gen_slice=3.0, gen_volume=4.0,
                            disc_slice=0.0, disc_volume=0.0, fm_slice=5.0, fm_volume=6.0)
        w = VqGanLossWeights(recon=1.0, commit=0.25, adv_slice=1.0, adv_volume=1.0,
                             fm_slice=1.0, fm_volume=1.0)
        assert r.total_generator(w, adv_weight=0.5) == pytest.approx(
            1.0 + 0.5 + 0.5 * (3 + 4) + 5 + 6)
