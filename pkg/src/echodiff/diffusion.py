"""Model-agnostic diffusion mathematics.

Conventions used throughout:

* Step indices ``t`` are 1-based and live in ``[1, T]``. Internally the
  schedule arrays are 0-indexed, so ``beta[t - 1]`` is the variance added at
  step ``t``.
* ``alpha_bar[t - 1]`` is the running product ``prod_{s<=t} (1 - beta_s)``
  with the convention ``alpha_bar_0 == 1``.
* Video states are real tensors shaped ``(K, C, H, W)``, or batched
  ``(B, K, C, H, W)`` with a per-example step tensor of shape ``(B,)``.

Schedule constants are built in float64; every operation casts them to the
dtype of its input, so 32-bit training and 64-bit oracle runs both work.
"""

import math
from dataclasses import dataclass

import torch

from .errors import ConfigurationError, ContractViolation

SCHEDULE_KINDS = ("linear",)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noising constants for a T-step diffusion process.

    ``posterior_var[t - 1]`` is the variance of the noising posterior
    given the clean video, i.e. ``beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)``.
    """

    kind: str
    beta: torch.Tensor
    alpha_bar: torch.Tensor
    posterior_var: torch.Tensor

    @property
    def T(self) -> int:
        return int(self.beta.shape[0])

    def alpha_bar_prev(self) -> torch.Tensor:
        """alpha_bar shifted right by one step, with alpha_bar_0 := 1."""
        return torch.cat([torch.ones(1, dtype=self.alpha_bar.dtype), self.alpha_bar[:-1]])

    def constants(self) -> dict:
        """Plain-tensor form for embedding in checkpoints."""
        return {
            "kind": self.kind,
            "beta": self.beta.clone(),
            "alpha_bar": self.alpha_bar.clone(),
            "posterior_var": self.posterior_var.clone(),
        }


def schedule_from_constants(c: dict) -> NoiseSchedule:
    return NoiseSchedule(
        kind=str(c["kind"]),
        beta=c["beta"].to(torch.float64),
        alpha_bar=c["alpha_bar"].to(torch.float64),
        posterior_var=c["posterior_var"].to(torch.float64),
    )


def build_schedule(
    T: int,
    kind: str = "linear",
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> NoiseSchedule:
    """Build a noise schedule with linearly spaced betas.

    Raises ConfigurationError when T < 1, the kind is unknown, or the beta
    endpoints are not inside (0, 1) with beta_start <= beta_end.
    """
    if not isinstance(T, int) or T < 1:
        raise ConfigurationError(f"step count T must be a positive integer, got {T!r}")
    if kind not in SCHEDULE_KINDS:
        raise ConfigurationError(f"unknown schedule kind {kind!r}, expected one of {SCHEDULE_KINDS}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"beta range must satisfy 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    alpha_bar = torch.cumprod(1.0 - beta, dim=0)
    alpha_bar_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bar[:-1]])
    posterior_var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    return NoiseSchedule(kind=kind, beta=beta, alpha_bar=alpha_bar, posterior_var=posterior_var)


def _check_t(t, T: int) -> None:
    if torch.is_tensor(t):
        if t.numel() == 0 or t.min().item() < 1 or t.max().item() > T:
            raise ContractViolation(f"step indices must lie in [1, {T}], got range "
                                    f"[{t.min().item() if t.numel() else '-'}, "
                                    f"{t.max().item() if t.numel() else '-'}]")
    else:
        if not (1 <= int(t) <= T):
            raise ContractViolation(f"step index must lie in [1, {T}], got {t}")


def _gather(values: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
    """Index a schedule array at 1-based t, broadcastable against `like`.

    Scalar t gives a scalar coefficient; a (B,) tensor gives (B, 1, ..., 1).
    """
    if torch.is_tensor(t):
        out = values.to(like.dtype)[t.long() - 1]
        return out.reshape(t.shape[0], *([1] * (like.dim() - 1)))
    return values[int(t) - 1].to(like.dtype)


def _check_shapes(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(y0: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Noised state at step t given the clean video: sqrt(ab_t) y0 + sqrt(1 - ab_t) eps."""
    _check_shapes(y0, eps, "q_sample")
    _check_t(t, sched.T)
    ab = _gather(sched.alpha_bar, t, y0)
    return torch.sqrt(ab) * y0 + torch.sqrt(1.0 - ab) * eps


def q_forward_step(y_prev: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """Single forward transition: sqrt(1 - beta_t) y_{t-1} + sqrt(beta_t) eps."""
    _check_shapes(y_prev, eps, "q_forward_step")
    _check_t(t, sched.T)
    b = _gather(sched.beta, t, y_prev)
    return torch.sqrt(1.0 - b) * y_prev + torch.sqrt(b) * eps


def predict_y0_from_eps(
    y_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t,
    sched: NoiseSchedule,
    clip_denoised: bool = False,
) -> torch.Tensor:
    """Invert the closed-form noising: y0_hat = (y_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t)."""
    _check_shapes(y_t, eps_hat, "predict_y0_from_eps")
    _check_t(t, sched.T)
    ab = _gather(sched.alpha_bar, t, y_t)
    y0 = (y_t - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)
    if clip_denoised:
        y0 = y0.clamp(-1.0, 1.0)
    return y0


def posterior_mean(y_t: torch.Tensor, y0: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Mean of the noising posterior q(y_{t-1} | y_t, y0).

    mu = sqrt(ab_{t-1}) beta_t / (1 - ab_t) * y0
       + sqrt(1 - beta_t) (1 - ab_{t-1}) / (1 - ab_t) * y_t
    """
    _check_shapes(y_t, y0, "posterior_mean")
    _check_t(t, sched.T)
    b = _gather(sched.beta, t, y_t)
    ab = _gather(sched.alpha_bar, t, y_t)
    ab_prev = _gather(sched.alpha_bar_prev(), t, y_t)
    coef0 = torch.sqrt(ab_prev) * b / (1.0 - ab)
    coef_t = torch.sqrt(1.0 - b) * (1.0 - ab_prev) / (1.0 - ab)
    return coef0 * y0 + coef_t * y_t


def p_step(
    y_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t,
    sched: NoiseSchedule,
    noise: torch.Tensor,
    clip_denoised: bool = False,
) -> torch.Tensor:
    """One reverse transition with fixed posterior variance.

    Returns the posterior mean evaluated at the eps-predicted clean video,
    plus sqrt(posterior_var_t) * noise. The final step (t == 1) adds no
    noise, so its `noise` argument is ignored.
    """
    _check_shapes(y_t, eps_hat, "p_step")
    _check_shapes(y_t, noise, "p_step noise")
    _check_t(t, sched.T)
    y0_hat = predict_y0_from_eps(y_t, eps_hat, t, sched, clip_denoised=clip_denoised)
    mean = posterior_mean(y_t, y0_hat, t, sched)
    var = _gather(sched.posterior_var, t, y_t)
    if torch.is_tensor(t):
        keep = (t.long() > 1).reshape(t.shape[0], *([1] * (y_t.dim() - 1)))
        return mean + keep.to(y_t.dtype) * torch.sqrt(var) * noise
    if int(t) == 1:
        return mean
    return mean + math.sqrt(float(var)) * noise


def training_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise, as a scalar tensor."""
    _check_shapes(eps_hat, eps, "training_loss")
    return ((eps - eps_hat) ** 2).mean()
