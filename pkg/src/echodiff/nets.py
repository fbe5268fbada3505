"""Conditional 3D denoising UNet.

The encoder stacks 3D residual convolution blocks with additive timestep
embeddings, followed (at configured levels) by a spatial attention layer and
a temporal attention layer. Downsampling is spatial-only, so the frame count
K is preserved end to end. In `spade` mode the decoder blocks replace their
normalization with a semantic-map-modulated group normalization; in `concat`
mode the replicated map is channel-concatenated with the noisy input instead.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolation, NumericsError
from .semantics import NUM_CLASSES, SemanticCondition

CONDITION_MODES = ("spade", "concat")


def time_embed(t, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of a step index.

    Layout is [sin(t * w_0..w_{d/2-1}), cos(t * ...)], so t = 0 maps to all
    zeros in the first half and all ones in the second. Accepts a scalar or
    a (B,) tensor; returns (dim,) or (B, dim) float32.
    """
    if dim % 2 != 0 or dim < 2:
        raise ConfigurationError(f"embedding dim must be a positive even integer, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=torch.float64)
    else:
        freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / (half - 1))
    tt = torch.as_tensor(t, dtype=torch.float64)
    angles = tt.reshape(-1, 1) * freqs.reshape(1, -1)
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1).float()
    return emb.squeeze(0) if tt.dim() == 0 else emb


def frame_embed(frame_index, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of a frame index within the clip (same layout as time_embed)."""
    return time_embed(frame_index, dim)


class FrameGroupNorm(nn.Module):
    """Group normalization with statistics computed per (frame, group).

    Input is (B, C, K, H, W); mean and variance are taken over the channels
    of each group and the spatial extent of one frame, never across frames.
    With affine=False this is the parameter-free normalization used inside
    the semantic modulation layer.
    """

    EPS = 1e-5

    def __init__(self, groups: int, channels: int, affine: bool = True):
        super().__init__()
        if channels % groups != 0:
            raise ConfigurationError(f"channels ({channels}) must be divisible by groups ({groups})")
        self.groups = groups
        self.channels = channels
        if affine:
            self.weight = nn.Parameter(torch.ones(channels))
            self.bias = nn.Parameter(torch.zeros(channels))
        else:
            self.weight = None
            self.bias = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, k, h, w = x.shape
        g = self.groups
        xg = x.reshape(b, g, c // g, k, h, w)
        mean = xg.mean(dim=(2, 4, 5), keepdim=True)
        var = xg.var(dim=(2, 4, 5), unbiased=False, keepdim=True)
        out = ((xg - mean) / torch.sqrt(var + self.EPS)).reshape(b, c, k, h, w)
        if self.weight is not None:
            out = out * self.weight.view(1, c, 1, 1, 1) + self.bias.view(1, c, 1, 1, 1)
        return out


class SpadeGroupNorm(nn.Module):
    """Semantic modulation over parameter-free group normalization.

    gamma(x, k) * Norm(f) + delta(x, k), where gamma and delta come from a
    shared two-stage convolutional trunk over the (resized, temporally
    replicated) one-hot map, additively biased per frame by the frame
    embedding. Both 1x1 heads are zero-initialized so the layer starts out
    exactly equal to the plain normalization (gamma = 1, delta = 0).
    """

    def __init__(self, channels: int, label_channels: int, frame_embed_dim: int,
                 groups: int, hidden: int):
        super().__init__()
        self.norm = FrameGroupNorm(groups, channels, affine=False)
        self.frame_embed_dim = frame_embed_dim
        self.trunk1 = nn.Conv3d(label_channels, hidden, (1, 3, 3), padding=(0, 1, 1))
        self.trunk2 = nn.Conv3d(hidden, hidden, (1, 3, 3), padding=(0, 1, 1))
        self.frame_proj = nn.Linear(frame_embed_dim, hidden)
        self.gamma_head = nn.Conv3d(hidden, channels, 1)
        self.delta_head = nn.Conv3d(hidden, channels, 1)
        nn.init.zeros_(self.gamma_head.weight)
        nn.init.zeros_(self.gamma_head.bias)
        nn.init.zeros_(self.delta_head.weight)
        nn.init.zeros_(self.delta_head.bias)

    def modulation(self, cond: torch.Tensor, frame_emb: torch.Tensor,
                   size: tuple[int, int]) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-pixel (gamma, delta), each (B, C, K, H_f, W_f).

        `cond` is the full-resolution one-hot map (B, L, H, W); `frame_emb`
        holds one embedding per frame, shape (K, frame_embed_dim).
        """
        if frame_emb.shape[-1] != self.frame_embed_dim:
            raise ConfigurationError(
                f"frame embedding dim {frame_emb.shape[-1]} does not match head input "
                f"{self.frame_embed_dim}")
        k = frame_emb.shape[0]
        x = F.interpolate(cond, size=size, mode="nearest")
        x = x.unsqueeze(2).expand(-1, -1, k, -1, -1)
        h = self.trunk1(x)
        kb = self.frame_proj(frame_emb.to(h.dtype))
        h = h + kb.t().unsqueeze(0).unsqueeze(-1).unsqueeze(-1)
        h = F.silu(h)
        h = F.silu(self.trunk2(h))
        gamma = 1.0 + self.gamma_head(h)
        delta = self.delta_head(h)
        return gamma, delta

    def forward(self, f: torch.Tensor, cond: torch.Tensor, frame_emb: torch.Tensor) -> torch.Tensor:
        if cond.shape[0] != f.shape[0]:
            raise ContractViolation(
                f"condition batch {cond.shape[0]} does not match features {f.shape[0]}")
        gamma, delta = self.modulation(cond, frame_emb, size=(f.shape[-2], f.shape[-1]))
        return gamma * self.norm(f) + delta


def _attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, heads: int) -> torch.Tensor:
    """Multi-head softmax attention over (B, N, C) token tensors."""
    b, n, c = q.shape
    d = c // heads
    q = q.reshape(b, n, heads, d).transpose(1, 2)
    k = k.reshape(b, n, heads, d).transpose(1, 2)
    v = v.reshape(b, n, heads, d).transpose(1, 2)
    attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
    out = attn @ v
    return out.transpose(1, 2).reshape(b, n, c)


class SelfAttention3d(nn.Module):
    """Residual self-attention over one axis of a (B, C, K, H, W) feature map.

    axis="spatial" attends over the H*W positions of each frame separately;
    axis="temporal" attends over the K frames of each pixel separately. The
    output projection is zero-initialized, so a fresh layer is the identity.
    """

    def __init__(self, channels: int, groups: int, axis: str, heads: int | None = None):
        super().__init__()
        assert axis in ("spatial", "temporal")
        self.axis = axis
        self.heads = heads if heads is not None else max(1, channels // 32)
        if channels % self.heads != 0:
            raise ConfigurationError(f"channels {channels} not divisible by heads {self.heads}")
        self.norm = FrameGroupNorm(groups, channels, affine=True)
        self.to_qkv = nn.Linear(channels, channels * 3)
        self.to_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.to_out.weight)
        nn.init.zeros_(self.to_out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, k, h, w = x.shape
        y = self.norm(x)
        if self.axis == "spatial":
            tokens = y.permute(0, 2, 3, 4, 1).reshape(b * k, h * w, c)
        else:
            tokens = y.permute(0, 3, 4, 2, 1).reshape(b * h * w, k, c)
        q, kk, v = self.to_qkv(tokens).chunk(3, dim=-1)
        out = self.to_out(_attention(q, kk, v, self.heads))
        if self.axis == "spatial":
            out = out.reshape(b, k, h, w, c).permute(0, 4, 1, 2, 3)
        else:
            out = out.reshape(b, h, w, k, c).permute(0, 4, 3, 1, 2)
        return x + out


class ResBlock3d(nn.Module):
    """3D residual convolution block: conv -> +t_emb -> norm -> silu, twice.

    The timestep embedding enters as a per-channel bias after the first
    convolution. Decoder blocks pass spade=True and normalize through the
    semantic modulation layer instead of the plain group norm.
    """

    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int,
                 spade: bool = False, label_channels: int = NUM_CLASSES,
                 frame_embed_dim: int = 64, spade_hidden: int = 32):
        super().__init__()
        self.spade = spade
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        if spade:
            self.norm1 = SpadeGroupNorm(out_ch, label_channels, frame_embed_dim, groups, spade_hidden)
            self.norm2 = SpadeGroupNorm(out_ch, label_channels, frame_embed_dim, groups, spade_hidden)
        else:
            self.norm1 = FrameGroupNorm(groups, out_ch)
            self.norm2 = FrameGroupNorm(groups, out_ch)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def _norm(self, norm, h, cond, frame_emb):
        if self.spade:
            return norm(h, cond, frame_emb)
        return norm(h)

    def forward(self, f: torch.Tensor, t_emb: torch.Tensor,
                cond: torch.Tensor | None = None,
                frame_emb: torch.Tensor | None = None) -> torch.Tensor:
        h = self.conv1(f)
        h = h + self.time_proj(t_emb).unsqueeze(-1).unsqueeze(-1).unsqueeze(-1)
        h = F.silu(self._norm(self.norm1, h, cond, frame_emb))
        h = self.conv2(h)
        h = F.silu(self._norm(self.norm2, h, cond, frame_emb))
        return h + self.skip(f)


class Downsample(nn.Module):
    """Stride-2 spatial downsampling; the temporal axis is untouched."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    """Nearest x2 spatial upsampling followed by a channel-changing conv."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, (1, 3, 3), padding=(0, 1, 1))

    def forward(self, x):
        b, c, k, h, w = x.shape
        x = x.permute(0, 2, 1, 3, 4).reshape(b * k, c, h, w)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = x.reshape(b, k, c, h * 2, w * 2).permute(0, 2, 1, 3, 4)
        return self.conv(x)


@dataclass
class NetConfig:
    """Denoiser architecture knobs.

    attention_levels indexes resolution levels, 0 being the finest; None
    selects the two coarsest levels. lowres_cond_channels > 0 makes the net
    expect an upsampled low-resolution video concatenated at the input (the
    super-resolution stage of the cascade).
    """

    in_channels: int = 1
    label_channels: int = NUM_CLASSES
    base_width: int = 64
    channel_multipliers: tuple = (1, 2, 4)
    attention_levels: tuple | None = None
    time_embed_dim: int = 128
    frame_embed_dim: int = 64
    groups: int = 8
    condition_mode: str = "spade"
    lowres_cond_channels: int = 0

    def __post_init__(self):
        self.channel_multipliers = tuple(self.channel_multipliers)
        if self.attention_levels is not None:
            self.attention_levels = tuple(self.attention_levels)

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    def resolved_attention_levels(self) -> tuple:
        """Explicit levels, or the two coarsest when left unset."""
        if self.attention_levels is not None:
            return tuple(self.attention_levels)
        return tuple(range(max(0, self.levels - 2), self.levels))

    @property
    def widths(self) -> tuple:
        return tuple(self.base_width * m for m in self.channel_multipliers)

    def validate(self) -> list[str]:
        problems = []
        if self.condition_mode not in CONDITION_MODES:
            problems.append(f"condition_mode must be one of {CONDITION_MODES}, got {self.condition_mode!r}")
        if self.levels < 2:
            problems.append("at least 2 resolution levels are required")
        if self.base_width % self.groups != 0:
            problems.append(f"base_width ({self.base_width}) must be divisible by groups ({self.groups})")
        if self.time_embed_dim % 2 or self.frame_embed_dim % 2:
            problems.append("time_embed_dim and frame_embed_dim must be even")
        if any(lv < 0 or lv >= self.levels for lv in self.resolved_attention_levels()):
            problems.append(f"attention_levels {self.attention_levels} out of range for {self.levels} levels")
        if self.in_channels < 1 or self.label_channels < 1:
            problems.append("in_channels and label_channels must be positive")
        return problems


class DenoiserUNet(nn.Module):
    """Noise-prediction network over (B, K, C, H, W) video states."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        problems = cfg.validate()
        if problems:
            raise ConfigurationError("; ".join(problems))
        self.cfg = cfg
        widths = cfg.widths
        spade = cfg.condition_mode == "spade"
        in_ch = cfg.in_channels + cfg.lowres_cond_channels
        if cfg.condition_mode == "concat":
            in_ch += cfg.label_channels

        self.init_conv = nn.Conv3d(in_ch, widths[0], 3, padding=1)
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
            nn.SiLU(),
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
        )

        def attn_pair(ch):
            return nn.ModuleList([
                SelfAttention3d(ch, cfg.groups, "spatial"),
                SelfAttention3d(ch, cfg.groups, "temporal"),
            ])

        attention_levels = cfg.resolved_attention_levels()
        spade_kw = dict(label_channels=cfg.label_channels, frame_embed_dim=cfg.frame_embed_dim,
                        spade_hidden=max(cfg.groups, cfg.base_width // 2))
        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            self.down_blocks.append(ResBlock3d(prev, w, cfg.time_embed_dim, cfg.groups))
            self.down_attn.append(attn_pair(w) if i in attention_levels else None)
            if i < cfg.levels - 1:
                self.downsamples.append(Downsample(w))
            prev = w

        mid = widths[-1]
        self.mid_block1 = ResBlock3d(mid, mid, cfg.time_embed_dim, cfg.groups)
        self.mid_attn = attn_pair(mid)
        self.mid_block2 = ResBlock3d(mid, mid, cfg.time_embed_dim, cfg.groups)

        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(cfg.levels)):
            w = widths[i]
            self.up_blocks.append(
                ResBlock3d(2 * w, w, cfg.time_embed_dim, cfg.groups, spade=spade, **spade_kw))
            self.up_attn.append(attn_pair(w) if i in attention_levels else None)
            if i > 0:
                self.upsamples.append(Upsample(w, widths[i - 1]))

        self.out_norm = FrameGroupNorm(cfg.groups, widths[0])
        self.out_conv = nn.Conv3d(widths[0], cfg.in_channels, 3, padding=1)

    def forward(self, y: torch.Tensor, cond: torch.Tensor, t,
                lowres: torch.Tensor | None = None) -> torch.Tensor:
        """Predict the noise component of y.

        y: (B, K, C, H, W) noisy videos; cond: (B, L, H, W) one-hot maps
        (all-zero rows encode the null condition); t: int or (B,) 1-based
        step indices; lowres: (B, K, C, H, W) upsampled low-resolution
        conditioning when the config declares it.
        """
        cfg = self.cfg
        if y.dim() != 5:
            raise ContractViolation(f"expected (B, K, C, H, W), got {tuple(y.shape)}")
        b, k, c, h, w = y.shape
        div = 2 ** (cfg.levels - 1)
        if h % div or w % div:
            raise ConfigurationError(
                f"spatial dims ({h}x{w}) must be divisible by {div} for {cfg.levels} levels")
        if cond.shape != (b, cfg.label_channels, h, w):
            raise ContractViolation(
                f"condition shape {tuple(cond.shape)} does not match ({b}, {cfg.label_channels}, {h}, {w})")

        x = y.permute(0, 2, 1, 3, 4)
        if cfg.lowres_cond_channels:
            if lowres is None:
                raise ContractViolation("net configured with lowres conditioning but none given")
            x = torch.cat([x, lowres.permute(0, 2, 1, 3, 4)], dim=1)
        elif lowres is not None:
            raise ContractViolation("lowres conditioning passed to a net not configured for it")
        if cfg.condition_mode == "concat":
            rep = cond.unsqueeze(2).expand(-1, -1, k, -1, -1).to(x.dtype)
            x = torch.cat([x, rep], dim=1)

        dtype = self.init_conv.weight.dtype
        if torch.is_tensor(t):
            t_vec = t.reshape(-1)
            if t_vec.shape[0] != b:
                raise ContractViolation(f"t batch {t_vec.shape[0]} does not match input batch {b}")
        else:
            t_vec = torch.full((b,), int(t))
        t_emb = self.time_mlp(time_embed(t_vec, cfg.time_embed_dim).to(dtype))
        k_emb = frame_embed(torch.arange(k), cfg.frame_embed_dim).to(dtype)
        cond = cond.to(dtype)

        h_ = self.init_conv(x.to(dtype))
        skips = []
        for i in range(cfg.levels):
            h_ = self.down_blocks[i](h_, t_emb)
            if self.down_attn[i] is not None:
                for attn in self.down_attn[i]:
                    h_ = attn(h_)
            skips.append(h_)
            if i < cfg.levels - 1:
                h_ = self.downsamples[i](h_)

        h_ = self.mid_block1(h_, t_emb)
        for attn in self.mid_attn:
            h_ = attn(h_)
        h_ = self.mid_block2(h_, t_emb)

        for j, i in enumerate(reversed(range(cfg.levels))):
            h_ = torch.cat([h_, skips.pop()], dim=1)
            h_ = self.up_blocks[j](h_, t_emb, cond, k_emb)
            if self.up_attn[j] is not None:
                for attn in self.up_attn[j]:
                    h_ = attn(h_)
            if i > 0:
                h_ = self.upsamples[j](h_)

        out = self.out_conv(F.silu(self.out_norm(h_)))
        out = out.permute(0, 2, 1, 3, 4)
        if not torch.isfinite(out).all():
            raise NumericsError("denoiser produced non-finite values")
        return out


def denoise_forward(y_t: torch.Tensor, x: SemanticCondition, t, net: DenoiserUNet,
                    lowres: torch.Tensor | None = None) -> torch.Tensor:
    """Single-clip entry point: (K, C, H, W) in, noise estimate of the same shape out."""
    out = net(y_t.unsqueeze(0), x.onehot.unsqueeze(0),
              t, None if lowres is None else lowres.unsqueeze(0))
    return out.squeeze(0)


def parameter_manifest(net: nn.Module) -> str:
    """Human-readable parameter inventory: one `path shape numel` line per array."""
    lines = []
    total = 0
    for name, p in sorted(net.named_parameters()):
        lines.append(f"{name}  {tuple(p.shape)}  {p.numel()}")
        total += p.numel()
    lines.append(f"TOTAL  {total}")
    return "\n".join(lines)
