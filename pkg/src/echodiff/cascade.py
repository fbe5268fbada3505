"""Two-stage cascade: low-resolution base diffusion plus a diffusion
super-resolution stage conditioned on the upsampled base output.

The SR stage receives the noise-augmented upsampled low-res video as extra
input channels and the semantic map through whichever injection mode its
network is configured with.
"""

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule
from .errors import ContractViolation, SamplingError
from .nets import DenoiserUNet
from .sampling import SamplerConfig, sample_video
from .semantics import SemanticCondition, resize_condition


@dataclass
class CascadeConfig:
    base_hw: int = 56
    target_hw: int = 128
    sr_noise_aug_level: float = 0.1

    def validate(self) -> list[str]:
        problems = []
        if not (0 < self.base_hw < self.target_hw):
            problems.append(f"need 0 < base_hw < target_hw, got {self.base_hw}, {self.target_hw}")
        if not (0.0 <= self.sr_noise_aug_level < 1.0):
            problems.append(f"sr_noise_aug_level must be in [0, 1), got {self.sr_noise_aug_level}")
        return problems


@dataclass
class StageBundle:
    """One trained stage: network, schedule and sampler settings."""

    net: DenoiserUNet
    sched: NoiseSchedule
    sampler: SamplerConfig = field(default_factory=SamplerConfig)


@dataclass
class SRConditionBundle:
    """Inputs the SR stage consumes: augmented upsampled video + semantic map."""

    lowres_upsampled: torch.Tensor
    semantic: SemanticCondition
    aug_level: float


def downsample_video(v: torch.Tensor, hw: int) -> torch.Tensor:
    """Per-frame area downsampling to hw x hw; refuses to upscale."""
    if v.dim() != 4:
        raise ContractViolation(f"expected (K, C, H, W), got {tuple(v.shape)}")
    if hw > v.shape[-1] or hw > v.shape[-2]:
        raise ContractViolation(
            f"downsample target {hw} exceeds source {v.shape[-2]}x{v.shape[-1]}")
    return F.interpolate(v, size=(hw, hw), mode="area")


def upsample_video(v: torch.Tensor, hw: int) -> torch.Tensor:
    """Per-frame bilinear upsampling to hw x hw."""
    if v.dim() != 4:
        raise ContractViolation(f"expected (K, C, H, W), got {tuple(v.shape)}")
    return F.interpolate(v, size=(hw, hw), mode="bilinear", align_corners=False)


def sr_condition_assembly(
    lowres: torch.Tensor,
    x: SemanticCondition,
    aug_eps: torch.Tensor,
    aug_level: float,
    target_hw: int = 128,
) -> SRConditionBundle:
    """Upsample the base output to the target size and perturb it.

    aug_eps must be shaped like the upsampled video; the perturbation is
    aug_level-scaled additive Gaussian noise, the conditioning-augmentation
    trick that stops the SR stage from trusting base artifacts verbatim.
    """
    up = upsample_video(lowres, target_hw)
    if aug_eps.shape != up.shape:
        raise ContractViolation(
            f"aug noise shape {tuple(aug_eps.shape)} does not match upsampled {tuple(up.shape)}")
    return SRConditionBundle(lowres_upsampled=up + aug_level * aug_eps,
                             semantic=x, aug_level=aug_level)


def cascade_sample(
    x: SemanticCondition,
    base: StageBundle,
    sr: StageBundle,
    cfg: CascadeConfig,
) -> torch.Tensor:
    """Sample at base resolution, then super-resolve to the target resolution."""
    problems = cfg.validate()
    if problems:
        raise ContractViolation("; ".join(problems))
    x_base = resize_condition(x, cfg.base_hw, cfg.base_hw)
    try:
        low = sample_video(x_base, base.net, base.sched, base.sampler)
    except SamplingError as exc:
        raise SamplingError(f"base stage: {exc}", step=exc.step) from exc

    x_target = x
    if x.height != cfg.target_hw or x.width != cfg.target_hw:
        x_target = resize_condition(x, cfg.target_hw, cfg.target_hw)
    gen = torch.Generator().manual_seed(sr.sampler.seed + 1)
    aug_eps = torch.randn(low.shape[0], low.shape[1], cfg.target_hw, cfg.target_hw, generator=gen)
    bundle = sr_condition_assembly(low, x_target, aug_eps, cfg.sr_noise_aug_level, cfg.target_hw)
    try:
        out = sample_video(bundle.semantic, sr.net, sr.sched, sr.sampler,
                           lowres=bundle.lowres_upsampled)
    except SamplingError as exc:
        raise SamplingError(f"super-resolution stage: {exc}", step=exc.step) from exc
    return out
