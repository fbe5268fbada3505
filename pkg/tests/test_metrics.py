import numpy as np
import pytest
import scipy.linalg
import torch

import echodiff.metrics as metrics_mod
from echodiff.errors import ContractViolation, NumericsError
from echodiff.metrics import (ToyFrameExtractor, ToyVideoExtractor,
                              accumulate_moments, evaluate_suite, fid_compute,
                              finalize_moments, format_table, frechet_distance,
                              fvd_compute, report_table, ssim_frame, ssim_video_pairs)
from conftest import random_condition


def ssim_oracle(a, b, size=11, sigma=1.5, c1=1e-4, c2=9e-4):
    """Naive sliding-window SSIM, one window at a time."""
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    h, wd = a.shape
    vals = []
    for i in range(h - size + 1):
        for j in range(wd - size + 1):
            pa = a[i:i + size, j:j + size]
            pb = b[i:i + size, j:j + size]
            mu_a = (w * pa).sum()
            mu_b = (w * pb).sum()
            va = (w * pa * pa).sum() - mu_a ** 2
            vb = (w * pb * pb).sum() - mu_b ** 2
            cab = (w * pa * pb).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cab + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestSsimFrame:
    def test_identical_images(self):
        rng = np.random.default_rng(0)
        a = rng.random((24, 24))
        assert ssim_frame(a, a.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_constant_closed_form(self):
        a = np.full((16, 16), 0.4)
        b = np.full((16, 16), 0.6)
        # variance terms vanish; C2/C2 cancels; luminance term remains
        expected = (2 * 0.4 * 0.6 + 1e-4) / (0.4 ** 2 + 0.6 ** 2 + 1e-4)
        got = ssim_frame(a, b)
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.9231, abs=1e-4)

    def test_matches_sliding_window_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(8):
            a = rng.random((16, 16))
            b = rng.random((16, 16))
            assert ssim_frame(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-6)

    def test_bounds(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            v = ssim_frame(rng.random((14, 14)), rng.random((14, 14)))
            assert -1.0 <= v <= 1.0

    def test_dim_mismatch(self):
        with pytest.raises(ContractViolation):
            ssim_frame(np.zeros((12, 12)), np.zeros((13, 13)))

    def test_window_larger_than_image(self):
        with pytest.raises(ContractViolation):
            ssim_frame(np.zeros((8, 8)), np.zeros((8, 8)))


def fake_video(seed, k=3, hw=16):
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(k, 1, hw, hw, generator=gen) * 2 - 1


class TestSsimVideoPairs:
    def test_identical_sets_score_one(self):
        real = {f"m{i}": fake_video(i) for i in range(3)}
        generated = [(mid, v.clone()) for mid, v in real.items()]
        assert ssim_video_pairs(generated, real) == pytest.approx(1.0, abs=1e-12)

    def test_orphan_video_reported(self):
        real = {"m0": fake_video(0)}
        with pytest.raises(ContractViolation) as err:
            ssim_video_pairs([("m0", fake_video(1)), ("mX", fake_video(2))], real)
        assert "mX" in str(err.value)

    def test_permutation_invariance(self):
        real = {f"m{i}": fake_video(i) for i in range(4)}
        generated = [(f"m{i}", fake_video(10 + i)) for i in range(4)]
        forward = ssim_video_pairs(generated, real)
        backward = ssim_video_pairs(list(reversed(generated)), real)
        assert forward == pytest.approx(backward, abs=1e-12)

    def test_frame_comparison_count(self, monkeypatch):
        calls = []
        orig = metrics_mod.ssim_frame
        monkeypatch.setattr(metrics_mod, "ssim_frame",
                            lambda a, b: calls.append(1) or orig(a, b))
        k = 4
        real = {f"m{i}": fake_video(i, k=k) for i in range(3)}
        generated = [(f"m{i}", fake_video(20 + i + 10 * r, k=k))
                     for i in range(3) for r in range(2)]
        ssim_video_pairs(generated, real)
        assert len(calls) == 3 * 2 * k


class TestFrechetDistance:
    def test_identical_moments(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((40, 5))
        mu, sigma = a.mean(axis=0), np.cov(a, rowvar=False)
        assert frechet_distance(mu, sigma, mu.copy(), sigma.copy()) == pytest.approx(0.0, abs=1e-9)

    def test_one_dimensional_unit_shift(self):
        one = np.ones((1, 1))
        assert frechet_distance([0.0], one, [1.0], one) == pytest.approx(1.0, abs=1e-9)

    def random_spd(self, rng, d=8):
        a = rng.standard_normal((d, d))
        return a @ a.T + 0.5 * np.eye(d)

    def test_matches_scipy_sqrtm_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(6):
            s1, s2 = self.random_spd(rng), self.random_spd(rng)
            mu1, mu2 = rng.standard_normal(8), rng.standard_normal(8)
            got = frechet_distance(mu1, s1, mu2, s2)
            cross = scipy.linalg.sqrtm(s1 @ s2)
            want = float((mu1 - mu2) @ (mu1 - mu2)
                         + np.trace(s1 + s2 - 2 * np.real(cross)))
            assert got == pytest.approx(want, abs=1e-6)

    def test_symmetry_and_nonnegativity(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            s1, s2 = self.random_spd(rng), self.random_spd(rng)
            mu1, mu2 = rng.standard_normal(8), rng.standard_normal(8)
            d_ab = frechet_distance(mu1, s1, mu2, s2)
            d_ba = frechet_distance(mu2, s2, mu1, s1)
            assert d_ab >= 0
            assert d_ab == pytest.approx(d_ba, abs=1e-9)

    def test_non_psd_rejected(self):
        bad = np.diag([1.0, -0.5])
        with pytest.raises(NumericsError):
            frechet_distance([0, 0], bad, [0, 0], np.eye(2))

    def test_asymmetric_covariance_rejected(self):
        m = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(ContractViolation):
            frechet_distance([0, 0], m, [0, 0], np.eye(2))

    def test_near_singular_regularized(self):
        # rank-deficient covariance triggers the epsilon regularization path
        s = np.zeros((3, 3))
        s[0, 0] = 1.0
        value, regularized = metrics_mod._frechet([0, 0, 0], s, [0, 0, 0], s.copy())
        assert regularized
        assert value == pytest.approx(0.0, abs=1e-9)


class TestMoments:
    def test_partition_independent(self):
        rng = np.random.default_rng(5)
        feats = rng.standard_normal((100, 6))
        whole = finalize_moments(accumulate_moments(feats))
        state = None
        for chunk in np.array_split(feats, 7):
            state = accumulate_moments(chunk, state)
        chunked = finalize_moments(state)
        assert np.abs(whole[0] - chunked[0]).max() < 1e-9
        assert np.abs(whole[1] - chunked[1]).max() < 1e-9

    def test_single_item_rejected(self):
        with pytest.raises(ContractViolation):
            finalize_moments(accumulate_moments(np.zeros((1, 4))))


class TestExtractors:
    def test_frame_extractor_deterministic(self):
        ex = ToyFrameExtractor()
        frames = fake_video(0, k=5)
        a = ex.embed_frames(frames)
        b = ToyFrameExtractor().embed_frames(frames.clone())
        assert np.array_equal(a, b)
        assert a.shape == (5, 64)

    def test_identity_strings(self):
        assert "toy-frame" in ToyFrameExtractor().identity
        assert "toy-video" in ToyVideoExtractor().identity

    def test_video_extractor_temporal_sensitivity(self):
        ex = ToyVideoExtractor()
        videos = [fake_video(i, k=6) for i in range(8)]
        shuffled = [v[torch.randperm(6, generator=torch.Generator().manual_seed(i + 50))]
                    for i, v in enumerate(videos)]
        d = fvd_compute(videos, shuffled, ex)
        assert d > 0


class TestFid:
    def test_set_against_itself_is_zero(self):
        frames = fake_video(1, k=12)
        ex = ToyFrameExtractor()
        assert fid_compute(frames, frames.clone(), ex) == pytest.approx(0.0, abs=1e-6)

    def test_separated_constant_populations(self):
        a = torch.full((8, 1, 16, 16), -0.6)
        a += torch.randn(a.shape, generator=torch.Generator().manual_seed(0)) * 0.01
        b = torch.full((8, 1, 16, 16), 0.6)
        b += torch.randn(b.shape, generator=torch.Generator().manual_seed(1)) * 0.01
        assert fid_compute(a, b, ToyFrameExtractor()) > 0.1

    def test_matches_monolithic_oracle(self):
        # 100 frames per side keep the 64-dim covariances full rank, so the
        # comparison exercises the unregularized path
        rng = np.random.default_rng(7)
        real = torch.from_numpy(rng.uniform(-1, 1, (100, 1, 16, 16)).astype(np.float32))
        gen = torch.from_numpy(rng.uniform(-1, 1, (100, 1, 16, 16)).astype(np.float32))
        ex = ToyFrameExtractor()
        got, info = metrics_mod._fid_with_info(real, gen, ex)
        assert not info["regularized"]
        # straight-line reference: embed, np moments, scipy sqrtm formula
        fr, fg = ex.embed_frames(real), ex.embed_frames(gen)
        mu_r, mu_g = fr.mean(axis=0), fg.mean(axis=0)
        s_r = np.cov(fr, rowvar=False)
        s_g = np.cov(fg, rowvar=False)
        cross = np.real(scipy.linalg.sqrtm(s_r @ s_g))
        want = float((mu_r - mu_g) @ (mu_r - mu_g) + np.trace(s_r + s_g - 2 * cross))
        assert got == pytest.approx(want, abs=1e-6)

    def test_monotone_under_increasing_noise(self):
        gen0 = torch.Generator().manual_seed(9)
        real = torch.rand(24, 1, 16, 16, generator=gen0) * 2 - 1
        ex = ToyFrameExtractor()
        previous = -1.0
        for level in (0.05, 0.3, 1.0):
            noise = torch.randn(real.shape, generator=torch.Generator().manual_seed(13))
            fid = fid_compute(real, (real + level * noise).clamp(-1, 1), ex)
            assert fid >= previous
            previous = fid


class TestFvd:
    def test_identical_sets(self):
        videos = [fake_video(i, k=4) for i in range(6)]
        ex = ToyVideoExtractor()
        assert fvd_compute(videos, [v.clone() for v in videos], ex) == pytest.approx(0.0, abs=1e-6)


class TestEvaluateSuite:
    def run_suite(self, n_maps=5, n_per_map=2, seed=0):
        conds = [(f"m{i}", random_condition(16, seed=i)) for i in range(n_maps)]
        real = {f"m{i}": fake_video(100 + i, k=4) for i in range(n_maps)}

        def stub_sampler(cond, sample_seed):
            gen = torch.Generator().manual_seed(sample_seed)
            return torch.rand(4, 1, 16, 16, generator=gen) * 2 - 1

        return evaluate_suite(None, None, conds, real, n_per_map=n_per_map,
                              sample_fn=stub_sampler,
                              sampler_cfg=metrics_mod.SamplerConfig(frames=4, seed=seed),
                              config_fingerprint="test")

    def test_counts(self):
        report, generated = self.run_suite()
        assert report.n_generated == 10
        assert report.n_real == 5
        assert len(generated) == 10

    def test_deterministic(self):
        a, _ = self.run_suite(seed=3)
        b, _ = self.run_suite(seed=3)
        assert a == b

    def test_report_fields(self):
        report, _ = self.run_suite()
        assert report.is_finite()
        assert "toy-frame" in report.frame_extractor
        assert "toy-video" in report.video_extractor
        assert report.config_fingerprint == "test"
        assert "backbone" in report.note

    def test_table_columns(self):
        report, _ = self.run_suite()
        table = report_table(report)
        header = table.splitlines()[0]
        for col in ("Cond.", "Model", "K", "FID", "FVD", "SSIM"):
            assert col in header

    def test_missing_real_video(self):
        conds = [("m0", random_condition(16))]
        with pytest.raises(ContractViolation):
            evaluate_suite(None, None, conds, {}, n_per_map=1,
                           sample_fn=lambda c, s: fake_video(0, k=4))

    def test_format_table_alignment(self):
        rows = [{"cond": "SPADE", "model": "DDPM", "k": 16,
                 "fid": 18.65, "fvd": 89.78, "ssim": 0.56}]
        out = format_table(rows)
        assert "18.65" in out and "89.78" in out and "0.56" in out
