"""Noise-prediction training loop with classifier-free condition dropout.

One training step: sample t uniformly per example, add closed-form noise,
drop each example's semantic map to the null condition with probability
cond_drop_prob, regress the injected noise, apply one Adam update, then the
EMA update. Checkpoints carry raw and EMA weights, the optimizer state, the
schedule constants and both RNG states, so a resumed run reproduces an
uninterrupted one bit for bit.
"""

import hashlib
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .cascade import downsample_video, upsample_video
from .data import DatasetSplit, PatientRecord, record_condition, resample_frames
from .diffusion import NoiseSchedule, q_sample, schedule_from_constants, training_loss
from .errors import CheckpointError, ConfigurationError, TrainingError
from .nets import DenoiserUNet, NetConfig, parameter_manifest
from .semantics import SemanticCondition, condition_batch, null_like, resize_condition

CHECKPOINT_FORMAT_VERSION = 1
VARIANTS = ("ddpm", "cascade_base", "cascade_sr")


@dataclass
class TrainConfig:
    max_steps: int | None = None
    learning_rate: float = 1e-4
    batch_size: int = 24
    micro_batch_size: int | None = None
    cond_drop_prob: float = 0.1
    ema_decay: float | None = 0.9999
    grad_clip_norm: float | None = 1.0
    seed: int = 0
    frames: int = 16
    condition_mode: str = "spade"
    variant: str = "ddpm"
    base_hw: int = 56
    target_hw: int = 128
    sr_noise_aug_level: float = 0.1
    checkpoint_every: int = 500
    log_every: int = 1

    def validate(self) -> list[str]:
        problems = []
        if self.max_steps is None or self.max_steps < 1:
            problems.append("max_steps must be set explicitly")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0.0 <= self.cond_drop_prob <= 1.0):
            problems.append(f"cond_drop_prob must be in [0, 1], got {self.cond_drop_prob}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if self.micro_batch_size is not None and not (1 <= self.micro_batch_size <= self.batch_size):
            problems.append("micro_batch_size must be in [1, batch_size]")
        if self.ema_decay is not None and not (0.0 < self.ema_decay < 1.0):
            problems.append(f"ema_decay must be in (0, 1) or null, got {self.ema_decay}")
        if self.frames < 2:
            problems.append(f"frames must be >= 2, got {self.frames}")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        return problems


def drop_condition(x: SemanticCondition, p: float, rng: torch.Generator) -> SemanticCondition:
    """With probability p, replace the semantic map with the all-zero null label."""
    if not (0.0 <= p <= 1.0):
        raise ConfigurationError(f"dropout probability must be in [0, 1], got {p}")
    if torch.rand((), generator=rng).item() < p:
        return null_like(x)
    return x


@dataclass
class TrainState:
    net: DenoiserUNet
    opt: torch.optim.Adam
    sched: NoiseSchedule
    train_cfg: TrainConfig
    net_cfg: NetConfig
    gen: torch.Generator
    step: int = 0
    ema: dict[str, torch.Tensor] | None = None


def init_state(train_cfg: TrainConfig, net_cfg: NetConfig, sched: NoiseSchedule) -> TrainState:
    problems = train_cfg.validate()
    if problems:
        raise ConfigurationError("; ".join(problems))
    torch.manual_seed(train_cfg.seed)
    net = DenoiserUNet(net_cfg)
    opt = torch.optim.Adam(net.parameters(), lr=train_cfg.learning_rate)
    gen = torch.Generator().manual_seed(train_cfg.seed + 1)
    ema = None
    if train_cfg.ema_decay is not None:
        ema = {k: v.detach().clone() for k, v in net.state_dict().items()}
    return TrainState(net=net, opt=opt, sched=sched, train_cfg=train_cfg,
                      net_cfg=net_cfg, gen=gen, ema=ema)


def ema_update(ema: dict[str, torch.Tensor], net: DenoiserUNet, decay: float) -> None:
    """ema <- decay * ema + (1 - decay) * params, applied after the optimizer step.

    Computed incrementally as ema + (1 - decay) * (params - ema), which is
    algebraically identical and an exact no-op when the weights have not
    moved (so a zero-learning-rate step leaves the EMA untouched).
    """
    with torch.no_grad():
        for k, v in net.state_dict().items():
            ema[k].add_((v - ema[k]) * (1.0 - decay))


def train_step(state: TrainState, videos: torch.Tensor, conds: torch.Tensor,
               lowres: torch.Tensor | None = None) -> float:
    """One optimization step over a (B, K, C, H, W) batch; returns the loss."""
    cfg = state.train_cfg
    b = videos.shape[0]
    t = torch.randint(1, state.sched.T + 1, (b,), generator=state.gen)
    eps = torch.randn(videos.shape, generator=state.gen)
    y_t = q_sample(videos, t, eps, state.sched)

    keep = torch.ones(b)
    for i in range(b):
        if torch.rand((), generator=state.gen).item() < cfg.cond_drop_prob:
            keep[i] = 0.0
    conds_used = conds * keep.view(b, 1, 1, 1)

    micro = cfg.micro_batch_size or b
    state.opt.zero_grad(set_to_none=True)
    total = 0.0
    for lo in range(0, b, micro):
        hi = min(lo + micro, b)
        low_slice = None if lowres is None else lowres[lo:hi]
        eps_hat = state.net(y_t[lo:hi], conds_used[lo:hi], t[lo:hi], low_slice)
        loss = training_loss(eps_hat, eps[lo:hi]) * (hi - lo) / b
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at step {state.step}; t={t[lo:hi].tolist()}, "
                f"|y_t|max={y_t[lo:hi].abs().max().item():.3e}")
        loss.backward()
        total += float(loss.detach())
    if cfg.grad_clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(state.net.parameters(), cfg.grad_clip_norm)
    state.opt.step()
    if state.ema is not None:
        ema_update(state.ema, state.net, cfg.ema_decay)
    state.step += 1
    return total


def _params_fingerprint(params: dict[str, torch.Tensor],
                        ema: dict[str, torch.Tensor] | None) -> str:
    h = hashlib.sha256()
    for name in ("params", "ema"):
        group = params if name == "params" else (ema or {})
        for key in sorted(group):
            h.update(key.encode())
            h.update(group[key].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(state: TrainState, path: Path | str) -> Path:
    """Atomic single-file checkpoint (write temp, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = {k: v.detach().cpu() for k, v in state.net.state_dict().items()}
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "params": params,
        "ema_params": None if state.ema is None else {k: v.cpu() for k, v in state.ema.items()},
        "optimizer": state.opt.state_dict(),
        "schedule": state.sched.constants(),
        "net_config": asdict(state.net_cfg),
        "train_config": asdict(state.train_cfg),
        "step": state.step,
        "torch_rng": state.gen.get_state(),
        "fingerprint": _params_fingerprint(params, state.ema),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: Path | str) -> dict:
    """Load and integrity-check a checkpoint payload."""
    path = Path(path)
    try:
        payload = torch.load(path, weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable or corrupt checkpoint ({exc})") from exc
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} != supported {CHECKPOINT_FORMAT_VERSION}")
    expected = payload.get("fingerprint")
    actual = _params_fingerprint(payload["params"], payload.get("ema_params"))
    if expected != actual:
        raise CheckpointError(f"{path}: parameter fingerprint mismatch "
                              f"(stored {expected[:12]}..., recomputed {actual[:12]}...)")
    return payload


def state_from_checkpoint(payload: dict) -> TrainState:
    net_cfg = NetConfig(**payload["net_config"])
    train_cfg = TrainConfig(**payload["train_config"])
    net = DenoiserUNet(net_cfg)
    net.load_state_dict(payload["params"])
    opt = torch.optim.Adam(net.parameters(), lr=train_cfg.learning_rate)
    opt.load_state_dict(payload["optimizer"])
    gen = torch.Generator()
    gen.set_state(payload["torch_rng"])
    ema = payload.get("ema_params")
    sched = schedule_from_constants(payload["schedule"])
    return TrainState(net=net, opt=opt, sched=sched, train_cfg=train_cfg, net_cfg=net_cfg,
                      gen=gen, step=int(payload["step"]),
                      ema=None if ema is None else dict(ema))


def model_from_checkpoint(payload: dict, use_ema: bool = True) -> tuple[DenoiserUNet, NoiseSchedule]:
    """Instantiate an inference net (EMA weights when present) plus its schedule."""
    net_cfg = NetConfig(**payload["net_config"])
    net = DenoiserUNet(net_cfg)
    weights = payload["params"]
    if use_ema and payload.get("ema_params") is not None:
        weights = payload["ema_params"]
    net.load_state_dict(weights)
    net.eval()
    return net, schedule_from_constants(payload["schedule"])


def _stage_tensors(records: list[PatientRecord], cfg: TrainConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack training videos and conditions at the resolution of the variant."""
    videos = torch.stack([resample_frames(r, cfg.frames) for r in records])
    conds = condition_batch([record_condition(r) for r in records])
    if cfg.variant == "cascade_base":
        videos = torch.stack([downsample_video(v, cfg.base_hw) for v in videos])
        conds = condition_batch([
            resize_condition(record_condition(r), cfg.base_hw, cfg.base_hw) for r in records])
    return videos, conds


def _sr_lowres(videos: torch.Tensor, cfg: TrainConfig, gen: torch.Generator) -> torch.Tensor:
    """Build the SR stage conditioning: down, up, then noise-augment."""
    low = torch.stack([upsample_video(downsample_video(v, cfg.base_hw), cfg.target_hw)
                       for v in videos])
    aug = torch.randn(low.shape, generator=gen)
    return low + cfg.sr_noise_aug_level * aug


def run_training(
    train_cfg: TrainConfig,
    net_cfg: NetConfig,
    sched: NoiseSchedule,
    records: list[PatientRecord],
    split: DatasetSplit,
    out_dir: Path | str,
    resume_from: Path | str | None = None,
) -> Path:
    """Full training run; returns the path of the final checkpoint.

    Writes `metrics.jsonl` (one record per logged step), periodic
    `ckpt_stepN.pt` files and a final `ckpt_final.pt` under out_dir.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {r.patient_id: r for r in records}
    missing = [pid for pid in split.train if pid not in by_id]
    if missing:
        raise TrainingError(f"split references unknown patients: {missing[:5]}")
    train_records = [by_id[pid] for pid in split.train]
    if not train_records:
        raise TrainingError("empty training split")

    if resume_from is not None:
        problems = train_cfg.validate()
        if problems:
            raise ConfigurationError("; ".join(problems))
        state = state_from_checkpoint(load_checkpoint(resume_from))
        # the caller's config governs the continued run (it may extend
        # max_steps); optimizer moments and RNG state stay restored
        state.train_cfg = train_cfg
        for group in state.opt.param_groups:
            group["lr"] = train_cfg.learning_rate
    else:
        state = init_state(train_cfg, net_cfg, sched)
    cfg = state.train_cfg

    videos, conds = _stage_tensors(train_records, cfg)
    n = videos.shape[0]
    (out_dir / "param_manifest.txt").write_text(parameter_manifest(state.net) + "\n")
    log_path = out_dir / "metrics.jsonl"
    mode = "a" if resume_from is not None else "w"
    with log_path.open(mode) as log:
        while state.step < cfg.max_steps:
            t0 = time.perf_counter()
            idx = torch.randint(0, n, (cfg.batch_size,), generator=state.gen)
            batch_v = videos[idx]
            batch_c = conds[idx]
            lowres = _sr_lowres(batch_v, cfg, state.gen) if cfg.variant == "cascade_sr" else None
            loss = train_step(state, batch_v, batch_c, lowres)
            dt = time.perf_counter() - t0
            if state.step % cfg.log_every == 0 or state.step == cfg.max_steps:
                rec = {"step": state.step, "loss": round(loss, 6),
                       "sec_per_step": round(dt, 4),
                       "videos_per_sec": round(cfg.batch_size / dt, 3)}
                log.write(json.dumps(rec) + "\n")
                log.flush()
            if state.step % cfg.checkpoint_every == 0 or state.step == cfg.max_steps:
                save_checkpoint(state, out_dir / f"ckpt_step{state.step}.pt")
    final = save_checkpoint(state, out_dir / "ckpt_final.pt")
    return final


def latest_checkpoint(out_dir: Path | str) -> Path | None:
    out_dir = Path(out_dir)
    if (out_dir / "ckpt_final.pt").exists():
        return out_dir / "ckpt_final.pt"
    steps = sorted(out_dir.glob("ckpt_step*.pt"),
                   key=lambda p: int(p.stem.replace("ckpt_step", "")))
    return steps[-1] if steps else None
