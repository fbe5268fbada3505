"""Semantic-map-conditioned video diffusion for echocardiography synthesis."""

__version__ = "0.1.0"

from .diffusion import (NoiseSchedule, build_schedule, p_step, predict_y0_from_eps,
                        q_forward_step, q_sample, training_loss)
from .nets import DenoiserUNet, NetConfig, denoise_forward, frame_embed, time_embed
from .sampling import SamplerConfig, batch_sample, cfg_combine, sample_video
from .semantics import SemanticCondition, null_condition, one_hot_labels, replicate_condition

__all__ = [
    "NoiseSchedule", "build_schedule", "q_sample", "q_forward_step",
    "predict_y0_from_eps", "p_step", "training_loss",
    "NetConfig", "DenoiserUNet", "denoise_forward", "time_embed", "frame_embed",
    "SamplerConfig", "cfg_combine", "sample_video", "batch_sample",
    "SemanticCondition", "one_hot_labels", "null_condition", "replicate_condition",
    "__version__",
]
