"""Quantitative evaluation: SSIM, Frechet distances (FID/FVD), suite protocol.

SSIM is implemented from scratch with the original defaults: 11x11 Gaussian
window, sigma 1.5, C1 = (0.01 L)^2, C2 = (0.03 L)^2 at dynamic range L = 1.

The Frechet distance uses an eigendecomposition route for the matrix square
root: with A = sqrt(S2), tr sqrt(S1 S2) = tr sqrt(A S1 A) and A S1 A is
symmetric PSD. Eigenvalues down to -1e-8 (relative) are clipped to zero;
anything lower is rejected as non-PSD.

Feature backbones are pluggable. The built-in toy extractors (fixed-seed
random projections over pooled frames; the video variant adds inter-frame
difference features) keep the whole pipeline hermetic. Published backbone
weights can be plugged in as TorchScript modules. Absolute FID/FVD values
are relative to the chosen backbone and the reports label them as such.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule
from .errors import ConfigurationError, ContractViolation, NumericsError
from .nets import DenoiserUNet
from .sampling import SamplerConfig, batch_sample, derive_seed
from .semantics import SemanticCondition

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = (0.01) ** 2
SSIM_C2 = (0.03) ** 2


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _window_means(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    """Valid-mode weighted local means via a sliding-window view."""
    view = np.lib.stride_tricks.sliding_window_view(img, window.shape)
    return np.tensordot(view, window, axes=([2, 3], [0, 1]))


def ssim_frame(a, b) -> float:
    """Mean local SSIM between two images with values in [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"ssim_frame: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ContractViolation(f"ssim_frame expects 2-D images, got {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ContractViolation(
            f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    w = _gaussian_window()
    mu_a = _window_means(a, w)
    mu_b = _window_means(b, w)
    s_aa = _window_means(a * a, w) - mu_a ** 2
    s_bb = _window_means(b * b, w) - mu_b ** 2
    s_ab = _window_means(a * b, w) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * s_ab + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (s_aa + s_bb + SSIM_C2)
    return float((num / den).mean())


def _video_to_unit(video: torch.Tensor) -> np.ndarray:
    """(K, C, H, W) in [-1, 1] -> (K, H, W) float in [0, 1], channel-averaged."""
    arr = np.asarray(video.detach().cpu(), dtype=np.float64)
    return ((arr + 1.0) / 2.0).mean(axis=1)


def ssim_video_pairs(
    generated: list[tuple[str, torch.Tensor]],
    real: dict[str, torch.Tensor],
) -> float:
    """Mean frame SSIM, pairing each generated video with the real video
    that shares its segmentation map id. Frame counts must agree."""
    if not generated:
        raise ContractViolation("no generated videos to score")
    orphans = sorted({mid for mid, _ in generated} - set(real))
    if orphans:
        raise ContractViolation(f"generated videos with no real counterpart: {orphans}")
    values = []
    for map_id, vid in generated:
        g = _video_to_unit(vid)
        r = _video_to_unit(real[map_id])
        if g.shape != r.shape:
            raise ContractViolation(
                f"map {map_id}: generated {g.shape} vs real {r.shape} frame shapes differ")
        for gf, rf in zip(g, r):
            values.append(ssim_frame(gf, rf))
    return float(np.mean(values))


def _sqrt_psd(mat: np.ndarray, tol: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    if vals.min() < -tol:
        raise NumericsError(f"matrix is non-PSD beyond tolerance (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _frechet(mu1, sigma1, mu2, sigma2, eps_reg: float = 1e-6) -> tuple[float, bool]:
    mu1 = np.asarray(mu1, dtype=np.float64).ravel()
    mu2 = np.asarray(mu2, dtype=np.float64).ravel()
    s1 = np.asarray(sigma1, dtype=np.float64)
    s2 = np.asarray(sigma2, dtype=np.float64)
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (mu1.size, mu1.size):
        raise ContractViolation("moment shapes disagree")
    if not (np.allclose(s1, s1.T, atol=1e-8) and np.allclose(s2, s2.T, atol=1e-8)):
        raise ContractViolation("covariances must be symmetric")
    scale = max(1.0, float(np.abs(s1).max()), float(np.abs(s2).max()))
    tol = 1e-8 * scale
    regularized = False
    if min(np.linalg.eigvalsh(s1).min(), np.linalg.eigvalsh(s2).min()) < tol:
        s1 = s1 + eps_reg * np.eye(s1.shape[0])
        s2 = s2 + eps_reg * np.eye(s2.shape[0])
        regularized = True
    a = _sqrt_psd(s2, tol)
    inner = a @ s1 @ a
    inner = (inner + inner.T) / 2.0
    vals = np.linalg.eigvalsh(inner)
    if vals.min() < -tol:
        raise NumericsError(f"cross term non-PSD beyond tolerance ({vals.min():.3e})")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = mu1 - mu2
    d2 = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)
    return max(d2, 0.0), regularized


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """Squared Frechet distance between two Gaussians."""
    return _frechet(mu1, sigma1, mu2, sigma2)[0]


class FeatureExtractor:
    """Deterministic fixed-dimension embedding of frames or videos."""

    identity: str = "abstract"
    dim: int = 0

    def embed_frames(self, frames: torch.Tensor) -> np.ndarray:
        raise NotImplementedError

    def embed_videos(self, videos: list[torch.Tensor]) -> np.ndarray:
        raise NotImplementedError


def _pool_frames(frames: torch.Tensor, pool: int) -> torch.Tensor:
    """(N, C, H, W) -> (N, pool*pool) channel-averaged adaptive pooling."""
    x = frames.float().mean(dim=1, keepdim=True)
    return F.adaptive_avg_pool2d(x, (pool, pool)).reshape(frames.shape[0], -1)


class ToyFrameExtractor(FeatureExtractor):
    """Fixed-seed random projection of average-pooled frames."""

    def __init__(self, dim: int = 64, pool: int = 16, seed: int = 0):
        self.dim = dim
        self.pool = pool
        self.seed = seed
        rng = np.random.default_rng(seed)
        self._proj = torch.from_numpy(
            rng.standard_normal((pool * pool, dim)) / np.sqrt(pool * pool)).float()
        self.identity = f"toy-frame-v1(seed={seed},pool={pool},dim={dim})"

    def embed_frames(self, frames: torch.Tensor) -> np.ndarray:
        pooled = _pool_frames(frames, self.pool)
        return (pooled @ self._proj).double().numpy()


class ToyVideoExtractor(FeatureExtractor):
    """Frame-projection means plus inter-frame difference features.

    The difference half makes the embedding sensitive to temporal order, so
    frame-shuffled copies of a set score a strictly positive distance.
    """

    def __init__(self, dim: int = 64, pool: int = 16, seed: int = 0):
        self.frame_part = ToyFrameExtractor(dim=dim, pool=pool, seed=seed)
        rng = np.random.default_rng(seed + 1)
        self._diff_proj = torch.from_numpy(
            rng.standard_normal((pool * pool, dim)) / np.sqrt(pool * pool)).float()
        self.pool = pool
        self.dim = 2 * dim
        self.identity = f"toy-video-v1(seed={seed},pool={pool},dim={self.dim})"

    def embed_videos(self, videos: list[torch.Tensor]) -> np.ndarray:
        feats = []
        for v in videos:
            frame_feats = self.frame_part.embed_frames(v).mean(axis=0)
            if v.shape[0] > 1:
                diffs = v[1:] - v[:-1]
                pooled = _pool_frames(diffs, self.pool)
                diff_feats = (pooled @ self._diff_proj).double().numpy().mean(axis=0)
            else:
                diff_feats = np.zeros(self._diff_proj.shape[1])
            feats.append(np.concatenate([frame_feats, diff_feats]))
        return np.stack(feats)


class TorchScriptFrameExtractor(FeatureExtractor):
    """Adapter for published image backbones exported as TorchScript.

    The module must map a (N, C, H, W) float batch to (N, dim) features.
    """

    def __init__(self, path: Path | str, input_hw: int = 299, channels: int = 3):
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"backbone weights not found: {path}")
        self.module = torch.jit.load(str(path)).eval()
        self.input_hw = input_hw
        self.channels = channels
        self.identity = f"torchscript-frame({path.name},sha256={_file_sha(path)[:12]})"
        self.dim = -1

    @torch.no_grad()
    def embed_frames(self, frames: torch.Tensor) -> np.ndarray:
        x = frames.float()
        if x.shape[1] == 1 and self.channels == 3:
            x = x.expand(-1, 3, -1, -1)
        x = F.interpolate(x, size=(self.input_hw, self.input_hw),
                          mode="bilinear", align_corners=False)
        out = self.module(x)
        self.dim = out.shape[-1]
        return out.double().numpy()


class TorchScriptVideoExtractor(FeatureExtractor):
    """Adapter for published video backbones (e.g. an exported I3D) that map
    a (1, C, K, H, W) clip to a (1, dim) feature vector."""

    def __init__(self, path: Path | str, input_hw: int = 224, channels: int = 3):
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"backbone weights not found: {path}")
        self.module = torch.jit.load(str(path)).eval()
        self.input_hw = input_hw
        self.channels = channels
        self.identity = f"torchscript-video({path.name},sha256={_file_sha(path)[:12]})"
        self.dim = -1

    @torch.no_grad()
    def embed_videos(self, videos: list[torch.Tensor]) -> np.ndarray:
        feats = []
        for v in videos:
            x = v.float().permute(1, 0, 2, 3).unsqueeze(0)
            if x.shape[1] == 1 and self.channels == 3:
                x = x.expand(-1, 3, -1, -1, -1)
            x = F.interpolate(x, size=(x.shape[2], self.input_hw, self.input_hw),
                              mode="trilinear", align_corners=False)
            feats.append(self.module(x).reshape(-1).double().numpy())
        out = np.stack(feats)
        self.dim = out.shape[-1]
        return out


def _file_sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def accumulate_moments(features: np.ndarray, state: dict | None = None) -> dict:
    """Order-independent streaming moments: running sum and outer-product sum."""
    f = np.asarray(features, dtype=np.float64)
    if state is None:
        state = {"n": 0, "s1": np.zeros(f.shape[1]), "s2": np.zeros((f.shape[1], f.shape[1]))}
    state["n"] += f.shape[0]
    state["s1"] = state["s1"] + f.sum(axis=0)
    state["s2"] = state["s2"] + f.T @ f
    return state


def finalize_moments(state: dict) -> tuple[np.ndarray, np.ndarray]:
    n = state["n"]
    if n < 2:
        raise ContractViolation(f"need >= 2 items per side to fit moments, got {n}")
    mu = state["s1"] / n
    sigma = (state["s2"] - n * np.outer(mu, mu)) / (n - 1)
    return mu, (sigma + sigma.T) / 2.0


def _fid_with_info(real_frames: torch.Tensor, gen_frames: torch.Tensor,
                   extractor: FeatureExtractor) -> tuple[float, dict]:
    mu_r, sig_r = finalize_moments(accumulate_moments(extractor.embed_frames(real_frames)))
    mu_g, sig_g = finalize_moments(accumulate_moments(extractor.embed_frames(gen_frames)))
    value, regularized = _frechet(mu_r, sig_r, mu_g, sig_g)
    return value, {"regularized": regularized, "extractor": extractor.identity}


def fid_compute(real_frames: torch.Tensor, gen_frames: torch.Tensor,
                extractor: FeatureExtractor) -> float:
    """Frechet distance between Gaussian fits of frame embeddings."""
    return _fid_with_info(real_frames, gen_frames, extractor)[0]


def _fvd_with_info(real_videos: list[torch.Tensor], gen_videos: list[torch.Tensor],
                   extractor: FeatureExtractor) -> tuple[float, dict]:
    mu_r, sig_r = finalize_moments(accumulate_moments(extractor.embed_videos(real_videos)))
    mu_g, sig_g = finalize_moments(accumulate_moments(extractor.embed_videos(gen_videos)))
    value, regularized = _frechet(mu_r, sig_r, mu_g, sig_g)
    return value, {"regularized": regularized, "extractor": extractor.identity}


def fvd_compute(real_videos: list[torch.Tensor], gen_videos: list[torch.Tensor],
                extractor: FeatureExtractor) -> float:
    """Frechet distance between Gaussian fits of whole-video embeddings."""
    return _fvd_with_info(real_videos, gen_videos, extractor)[0]


@dataclass
class MetricsReport:
    fid: float
    fvd: float
    mean_ssim: float
    n_real: int
    n_generated: int
    frame_extractor: str
    video_extractor: str
    config_fingerprint: str
    fid_regularized: bool = False
    fvd_regularized: bool = False
    condition_mode: str = "spade"
    model: str = "DDPM"
    frames: int = 16
    note: str = "FID/FVD values are relative to the configured feature backbones"

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in (self.fid, self.fvd, self.mean_ssim))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def format_table(rows: list[dict]) -> str:
    """Table-1-style summary with columns Cond./Model/K/FID/FVD/SSIM."""
    header = ("Cond.", "Model", "K", "FID", "FVD", "SSIM")
    body = [(str(r["cond"]), str(r["model"]), str(r["k"]),
             f"{r['fid']:.2f}", f"{r['fvd']:.2f}", f"{r['ssim']:.2f}") for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h)
              for i, h in enumerate(header)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths))
    lines = [fmt(header), fmt(["-" * w for w in widths])]
    lines.extend(fmt(b) for b in body)
    return "\n".join(lines)


def report_table(report: MetricsReport) -> str:
    return format_table([{
        "cond": report.condition_mode.capitalize() if report.condition_mode != "spade" else "SPADE",
        "model": report.model, "k": report.frames,
        "fid": report.fid, "fvd": report.fvd, "ssim": report.mean_ssim,
    }])


def evaluate_suite(
    net: DenoiserUNet | None,
    sched: NoiseSchedule | None,
    test_conditions: list[tuple[str, SemanticCondition]],
    real_videos: dict[str, torch.Tensor],
    n_per_map: int = 10,
    sampler_cfg: SamplerConfig | None = None,
    frame_extractor: FeatureExtractor | None = None,
    video_extractor: FeatureExtractor | None = None,
    sample_fn=None,
    config_fingerprint: str = "",
    condition_mode: str = "spade",
    model_name: str = "DDPM",
) -> tuple[MetricsReport, list[tuple[str, torch.Tensor]]]:
    """Run the full evaluation protocol over the test maps.

    Generates n_per_map videos per condition (10 per map over 45 test maps
    gives the full 450-video suite), then scores FID over frames, FVD
    over videos and SSIM over map-paired frames. `sample_fn(condition, seed)
    -> video` can replace the real sampler, e.g. for protocol tests.
    """
    if n_per_map < 1:
        raise ContractViolation(f"n_per_map must be >= 1, got {n_per_map}")
    missing = [mid for mid, _ in test_conditions if mid not in real_videos]
    if missing:
        raise ContractViolation(f"test maps with no real video: {missing}")
    sampler_cfg = sampler_cfg or SamplerConfig()
    frame_extractor = frame_extractor or ToyFrameExtractor()
    video_extractor = video_extractor or ToyVideoExtractor()

    generated: list[tuple[str, torch.Tensor]] = []
    if sample_fn is not None:
        for ci, (map_id, cond) in enumerate(test_conditions):
            for ri in range(n_per_map):
                generated.append((map_id, sample_fn(cond, derive_seed(sampler_cfg.seed, ci, ri))))
    else:
        if net is None or sched is None:
            raise ContractViolation("evaluate_suite needs a model or an injected sample_fn")
        videos = batch_sample([c for _, c in test_conditions], n_per_map, net, sched, sampler_cfg)
        for ci, (map_id, _) in enumerate(test_conditions):
            for ri in range(n_per_map):
                generated.append((map_id, videos[ci * n_per_map + ri]))

    gen_frames = torch.cat([v for _, v in generated], dim=0)
    real_list = [real_videos[mid] for mid, _ in test_conditions]
    real_frames = torch.cat(real_list, dim=0)
    fid, fid_info = _fid_with_info(real_frames, gen_frames, frame_extractor)
    fvd, fvd_info = _fvd_with_info(real_list, [v for _, v in generated], video_extractor)
    mean_ssim = ssim_video_pairs(generated, real_videos)
    report = MetricsReport(
        fid=fid, fvd=fvd, mean_ssim=mean_ssim,
        n_real=len(real_list), n_generated=len(generated),
        frame_extractor=frame_extractor.identity, video_extractor=video_extractor.identity,
        config_fingerprint=config_fingerprint,
        fid_regularized=fid_info["regularized"], fvd_regularized=fvd_info["regularized"],
        condition_mode=condition_mode, model=model_name, frames=sampler_cfg.frames,
    )
    return report, generated
