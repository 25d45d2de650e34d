"""Conditioned denoising UNet and the DDPM forward-diffusion machinery.

The UNet predicts the noise added to a latent, conditioned on a timestep
embedding and on the semantic embedding via cross-attention at every
resolution of both the down and up paths. Its decoder activations double as
the feature maps consumed by the depth decoder; for that use the latent is
diffused to a fixed timestep t_feat with zero noise, making feature
extraction deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core_types import ModelConfig
from .latent_codec import LatentTensor


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep beta, alpha = 1 - beta and alpha_bar = cumprod(alpha)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def validate(self) -> list[str]:
        problems = []
        if not (len(self.beta) == len(self.alpha) == len(self.alpha_bar) == self.T):
            problems.append(f"array lengths must all equal T={self.T}")
            return problems
        if not ((self.beta > 0) & (self.beta < 1)).all():
            problems.append("beta: values must lie strictly inside (0, 1)")
        if np.abs(self.alpha - (1.0 - self.beta)).max() > 1e-12:
            problems.append("alpha: must equal 1 - beta")
        if not (np.diff(self.alpha_bar) < 0).all():
            problems.append("alpha_bar: must be strictly decreasing")
        expected = np.cumprod(self.alpha)
        if np.abs(self.alpha_bar - expected).max() > 1e-12:
            problems.append("alpha_bar: inconsistent with cumprod(alpha) beyond 1e-12")
        return problems


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule between the given endpoints, inclusive."""
    if T < 1:
        raise ValueError("schedule needs T >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _unwrap(z):
    return z.data if isinstance(z, LatentTensor) else z


def forward_diffuse(z0, t, eps, schedule: NoiseSchedule):
    """z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps.

    t may be a single int or, for batched tensors, a 1-D integer tensor with
    one timestep per sample. Returns the same container kind it was given.
    """
    data = _unwrap(z0)
    noise = _unwrap(eps)
    if tuple(data.shape) != tuple(noise.shape):
        raise ValueError(f"z0 shape {tuple(data.shape)} != eps shape {tuple(noise.shape)}")
    if isinstance(t, (int, np.integer)):
        if not 0 <= int(t) < schedule.T:
            raise ValueError(f"timestep {t} outside [0, {schedule.T})")
        abar = float(schedule.alpha_bar[int(t)])
        out = math.sqrt(abar) * data + math.sqrt(1.0 - abar) * noise
    else:
        t = torch.as_tensor(t, dtype=torch.long)
        if t.min() < 0 or t.max() >= schedule.T:
            raise ValueError(f"timestep outside [0, {schedule.T})")
        # take sqrt in float64 before casting: 1 - alpha_bar cancels badly
        # in float32 when alpha_bar is close to 1
        abar = schedule.alpha_bar[t.numpy()]
        shape = (-1,) + (1,) * (data.dim() - 1)
        c_sig = torch.from_numpy(np.sqrt(abar)).to(data.dtype).view(shape)
        c_eps = torch.from_numpy(np.sqrt(1.0 - abar)).to(data.dtype).view(shape)
        out = c_sig * data + c_eps * noise
    if isinstance(z0, LatentTensor):
        return LatentTensor(out, z0.downsample_factor, z0.source_hw)
    return out


def diffusion_loss(eps: torch.Tensor, eps_pred: torch.Tensor) -> torch.Tensor:
    """Mean squared error between true and predicted noise, over all elements."""
    if tuple(eps.shape) != tuple(eps_pred.shape):
        raise ValueError(f"eps shape {tuple(eps.shape)} != eps_pred shape {tuple(eps_pred.shape)}")
    return torch.mean((eps_pred - eps) ** 2)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(torch.arange(half, dtype=torch.float32) * (-math.log(10000.0) / half))
    args = t.float()[:, None] * freqs[None].to(t.device)
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _gn_groups(c: int) -> int:
    for g in (8, 4, 2):
        if c % g == 0:
            return g
    return 1


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_gn_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, cout)
        self.norm2 = nn.GroupNorm(_gn_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttentionBlock(nn.Module):
    """Pre-norm cross-attention from spatial tokens onto the semantic rows."""

    def __init__(self, channels: int, d_sem: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.norm_ctx = nn.LayerNorm(d_sem)
        self.attn = nn.MultiheadAttention(
            channels, heads, kdim=d_sem, vdim=d_sem, batch_first=True)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = nn.Sequential(
            nn.Linear(channels, 2 * channels), nn.GELU(), nn.Linear(2 * channels, channels))

    def forward(self, x: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        t = x.flatten(2).transpose(1, 2)
        ctx = self.norm_ctx(s)
        t = t + self.attn(self.norm(t), ctx, ctx, need_weights=False)[0]
        t = t + self.mlp(self.norm2(t))
        return t.transpose(1, 2).reshape(b, c, h, w)


class DenoisingUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        base, levels = config.unet_base_channels, config.unet_levels
        if base % config.n_heads != 0:
            raise ValueError("unet_base_channels must be divisible by n_heads")
        self.config = config
        chans = [base * 2 ** i for i in range(levels)]
        self.chans = chans
        time_dim = base * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(base, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.conv_in = nn.Conv2d(config.latent_channels, chans[0], 3, padding=1)

        heads, d_sem = config.n_heads, config.d_sem
        self.down_samples = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1) for i in range(levels - 1))
        self.down_res = nn.ModuleList(ResidualBlock(c, c, time_dim) for c in chans)
        self.down_attn = nn.ModuleList(CrossAttentionBlock(c, d_sem, heads) for c in chans)

        self.mid_res1 = ResidualBlock(chans[-1], chans[-1], time_dim)
        self.mid_attn = CrossAttentionBlock(chans[-1], d_sem, heads)
        self.mid_res2 = ResidualBlock(chans[-1], chans[-1], time_dim)

        self.up_convs = nn.ModuleList(
            nn.Conv2d(chans[i + 1], chans[i], 3, padding=1) for i in reversed(range(levels - 1)))
        self.up_res = nn.ModuleList(
            ResidualBlock(2 * chans[i], chans[i], time_dim) for i in reversed(range(levels - 1)))
        self.up_attn = nn.ModuleList(
            CrossAttentionBlock(chans[i], d_sem, heads) for i in reversed(range(levels - 1)))

        self.out_norm = nn.GroupNorm(_gn_groups(chans[0]), chans[0])
        self.out_conv = nn.Conv2d(chans[0], config.latent_channels, 3, padding=1)

    def forward(self, z_t: torch.Tensor, t, s: torch.Tensor
                ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Returns (eps_pred, decoder features finest-last).

        z_t: (B, C_lat, h, w); t: int or (B,) long; s: (B, n_queries, d_sem).
        """
        cfg = self.config
        if z_t.dim() != 4 or z_t.shape[1] != cfg.latent_channels:
            raise ValueError(f"z_t must be (B, {cfg.latent_channels}, h, w), got {tuple(z_t.shape)}")
        if s.dim() != 3 or s.shape[1] != cfg.n_queries or s.shape[2] != cfg.d_sem:
            raise ValueError(
                f"conditioning must be (B, {cfg.n_queries}, {cfg.d_sem}), got {tuple(s.shape)}")
        if isinstance(t, (int, np.integer)):
            t = torch.full((z_t.shape[0],), int(t), dtype=torch.long, device=z_t.device)
        temb = self.time_mlp(sinusoidal_embedding(t, cfg.unet_base_channels).to(z_t.dtype))

        x = self.conv_in(z_t)
        skips = []
        for i in range(cfg.unet_levels):
            if i > 0:
                x = self.down_samples[i - 1](x)
            x = self.down_res[i](x, temb)
            x = self.down_attn[i](x, s)
            skips.append(x)

        x = self.mid_res1(x, temb)
        x = self.mid_attn(x, s)
        x = self.mid_res2(x, temb)

        features = [x]
        for k, i in enumerate(reversed(range(cfg.unet_levels - 1))):
            x = F.interpolate(x, size=skips[i].shape[-2:], mode="nearest")
            x = self.up_convs[k](x)
            x = self.up_res[k](torch.cat([x, skips[i]], dim=1), temb)
            x = self.up_attn[k](x, s)
            features.append(x)

        eps_pred = self.out_conv(F.silu(self.out_norm(x)))
        return eps_pred, features

    def extract_features(self, z0: torch.Tensor, s: torch.Tensor,
                         schedule: NoiseSchedule, t_feat: int | None = None) -> list[torch.Tensor]:
        """Deterministic feature pass: diffuse to t_feat with zero noise."""
        if t_feat is None:
            t_feat = self.config.t_feat
        if not 0 <= t_feat < schedule.T:
            raise ValueError(f"t_feat {t_feat} outside [0, {schedule.T})")
        z_t = math.sqrt(float(schedule.alpha_bar[t_feat])) * z0
        _, features = self(z_t, t_feat, s)
        return features


def decoder_feature_channels(config: ModelConfig) -> list[int]:
    """Channel widths of the UNet decoder features, coarsest first."""
    return [config.unet_base_channels * 2 ** i
            for i in range(config.unet_levels - 1, -1, -1)]


def unet_forward(unet: DenoisingUNet, z_t, t: int, s: torch.Tensor
                 ) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Single-sample wrapper: (C, h, w) latent and (n, d) conditioning."""
    data = _unwrap(z_t)
    eps_pred, feats = unet(data.unsqueeze(0), t, s.unsqueeze(0))
    return eps_pred[0], [f[0] for f in feats]


def extract_features_for_depth(unet: DenoisingUNet, z0: LatentTensor, s: torch.Tensor,
                               schedule: NoiseSchedule) -> list[torch.Tensor]:
    """Single-sample wrapper around DenoisingUNet.extract_features."""
    feats = unet.extract_features(z0.data.unsqueeze(0), s.unsqueeze(0), schedule)
    return [f[0] for f in feats]
