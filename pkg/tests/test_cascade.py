import numpy as np
import pytest
import torch

from conftest import make_net, random_condition
from echodiff.cascade import (CascadeConfig, StageBundle, cascade_sample,
                              downsample_video, sr_condition_assembly, upsample_video)
from echodiff.diffusion import build_schedule
from echodiff.errors import ContractViolation
from echodiff.sampling import SamplerConfig, sample_video
from echodiff.semantics import resize_condition


class TestDownsample:
    def test_target_dims(self):
        v = torch.rand(2, 1, 128, 128) * 2 - 1
        out = downsample_video(v, 56)
        assert out.shape == (2, 1, 56, 56)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_constant_frame_stays_constant(self):
        v = torch.full((3, 1, 64, 64), 0.37)
        out = downsample_video(v, 16)
        assert torch.allclose(out, torch.full((3, 1, 16, 16), 0.37), atol=1e-6)

    def test_checkerboard_matches_block_average_oracle(self):
        # integer factor so area interpolation must equal exact block means
        hw, target = 64, 16
        factor = hw // target
        ys, xs = np.mgrid[0:hw, 0:hw]
        board = ((ys + xs) % 2).astype(np.float32) * 2 - 1
        v = torch.from_numpy(board).reshape(1, 1, hw, hw)
        got = downsample_video(v, target)[0, 0].numpy()
        want = board.reshape(target, factor, target, factor).mean(axis=(1, 3))
        assert np.abs(got - want).max() < 1e-6

    def test_upscale_request_rejected(self):
        with pytest.raises(ContractViolation):
            downsample_video(torch.zeros(1, 1, 32, 32), 64)


class TestSRConditionAssembly:
    def test_zero_aug_is_clean_upsample(self):
        low = torch.rand(2, 1, 56, 56) * 2 - 1
        aug = torch.randn(2, 1, 128, 128)
        bundle = sr_condition_assembly(low, random_condition(128), aug, 0.0)
        assert torch.equal(bundle.lowres_upsampled, upsample_video(low, 128))

    def test_output_dims(self):
        low = torch.rand(2, 1, 56, 56)
        aug = torch.randn(2, 1, 128, 128)
        bundle = sr_condition_assembly(low, random_condition(128), aug, 0.1)
        assert bundle.lowres_upsampled.shape == (2, 1, 128, 128)

    def test_resampling_fidelity_on_smooth_gradient(self):
        xs = np.linspace(-1, 1, 128, dtype=np.float32)
        img = np.outer(np.ones(128, dtype=np.float32), xs)
        v = torch.from_numpy(img).reshape(1, 1, 128, 128)
        rec = upsample_video(downsample_video(v, 56), 128)
        assert (rec - v).abs().max().item() < 0.1


def tiny_stage(seed, lowres=False):
    net = make_net(seed=seed, base_width=8, channel_multipliers=(1, 2),
                   lowres_cond_channels=1 if lowres else 0)
    return net


class TestCascadeSample:
    def setup_method(self):
        self.cfg = CascadeConfig(base_hw=16, target_hw=32, sr_noise_aug_level=0.1)
        self.base = StageBundle(net=tiny_stage(1), sched=build_schedule(3),
                                sampler=SamplerConfig(frames=4, seed=5))
        self.sr = StageBundle(net=tiny_stage(2, lowres=True), sched=build_schedule(2),
                              sampler=SamplerConfig(frames=4, seed=6))
        self.cond = random_condition(32, seed=9)

    def test_final_shape(self):
        out = cascade_sample(self.cond, self.base, self.sr, self.cfg)
        assert out.shape == (4, 1, 32, 32)

    def test_deterministic(self):
        a = cascade_sample(self.cond, self.base, self.sr, self.cfg)
        b = cascade_sample(self.cond, self.base, self.sr, self.cfg)
        assert (a - b).abs().max().item() < 1e-6

    def test_base_stage_isolated_from_sr_stage(self):
        x_base = resize_condition(self.cond, 16, 16)
        standalone = sample_video(x_base, self.base.net, self.base.sched, self.base.sampler)
        cascade_sample(self.cond, self.base, self.sr, self.cfg)
        again = sample_video(x_base, self.base.net, self.base.sched, self.base.sampler)
        assert torch.equal(standalone, again)

    def test_call_count_two_t_per_stage(self):
        counts = {}
        for name, bundle in (("base", self.base), ("sr", self.sr)):
            counts[name] = {"evals": 0}

            def hook(module, args, entry=counts[name]):
                entry["evals"] += args[0].shape[0]

            bundle.net.register_forward_pre_hook(hook)
        cascade_sample(self.cond, self.base, self.sr, self.cfg)
        assert counts["base"]["evals"] == 2 * self.base.sched.T
        assert counts["sr"]["evals"] == 2 * self.sr.sched.T

    def test_stage_failure_labeled(self):
        with torch.no_grad():
            self.sr.net.out_conv.weight.fill_(float("nan"))
        with pytest.raises(Exception) as err:
            cascade_sample(self.cond, self.base, self.sr, self.cfg)
        assert "super-resolution stage" in str(err.value)

    def test_invalid_config(self):
        bad = CascadeConfig(base_hw=64, target_hw=32)
        with pytest.raises(ContractViolation):
            cascade_sample(self.cond, self.base, self.sr, bad)
