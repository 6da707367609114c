"""Video VAE with minimal (chunk-local) encoding and windowed decoding.

Every latent unit is produced from exactly one 8-frame chunk: the clip is
reshaped to ``(T/8, 8, C, H, W)`` and the chunks are pushed through the
encoder as independent batch elements, so no convolution can see across a
chunk boundary.  The decoder is free to mix context and consumes ``R``
contiguous units per call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .clips import VideoClip
from .errors import ConfigurationError, DimensionError, NumericError

CHUNK = 8
DECODE_WINDOWS = (1, 4, 8)

_LAPLACIAN = torch.tensor([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass
class VaeConfig:
    c_z: int = 24
    lambda_kl: float = 1e-6
    gamma_gan: float = 0.01
    rec_weights: tuple[float, float, float] = (1.0, 1.0, 0.1)
    adaptive_floor: float = 0.1
    gan_enabled: bool = False
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 24, 32)

    def __post_init__(self):
        self.rec_weights = tuple(float(w) for w in self.rec_weights)
        self.widths = tuple(int(w) for w in self.widths)
        if self.c_z < 1:
            raise ConfigurationError("c_z must be positive")
        if len(self.rec_weights) != 3 or min(self.rec_weights) < 0 or not any(self.rec_weights):
            raise ConfigurationError("rec_weights must be three nonnegative reals, not all zero")
        if self.lambda_kl < 0 or self.gamma_gan < 0:
            raise ConfigurationError("lambda_kl and gamma_gan must be nonnegative")
        if self.adaptive_floor <= 0:
            raise ConfigurationError("adaptive_floor must be positive")
        if len(self.widths) != 3:
            raise ConfigurationError("widths needs one entry per downsampling stage (3)")
        if self.in_channels not in (1, 3):
            raise ConfigurationError("in_channels must be 1 or 3")


class LatentSequence(NamedTuple):
    units: torch.Tensor  # (U, H/8, W/8, C_z)
    post_mean: torch.Tensor
    post_logvar: torch.Tensor


def _conv3d(cin, cout, kernel, stride=1):
    if isinstance(kernel, int):
        kernel = (kernel, kernel, kernel)
    pad = tuple(k // 2 for k in kernel)
    return nn.Conv3d(cin, cout, kernel, stride=stride, padding=pad)


class ChunkEncoder(nn.Module):
    """Alternating 2D-spatial / 3D convolutions, each stage halving T, H and W."""

    def __init__(self, in_channels: int, widths: tuple[int, ...], c_z: int):
        super().__init__()
        layers = []
        cin = in_channels
        for w in widths:
            layers += [_conv3d(cin, w, (1, 3, 3)), nn.SiLU(), _conv3d(w, w, 3, stride=2), nn.SiLU()]
            cin = w
        self.body = nn.Sequential(*layers)
        self.posterior_head = nn.Conv3d(cin, 2 * c_z, 1)

    def forward(self, chunks: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        # chunks: (n, C, 8, H, W) -> mean, logvar (n, C_z, 1, H/8, W/8)
        stats = self.posterior_head(self.body(chunks))
        return stats.chunk(2, dim=1)


class WindowDecoder(nn.Module):
    def __init__(self, out_channels: int, widths: tuple[int, ...], c_z: int):
        super().__init__()
        rev = list(reversed(widths))
        self.stem = _conv3d(c_z, rev[0], 3)
        layers = []
        cin = rev[0]
        for w in rev:
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), _conv3d(cin, w, 3), nn.SiLU(),
                       _conv3d(w, w, (1, 3, 3)), nn.SiLU()]
            cin = w
        self.body = nn.Sequential(*layers)
        self.out = _conv3d(cin, out_channels, 3)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # z: (n, C_z, R, h, w) -> (n, C, 8R, 8h, 8w)
        return self.out(self.body(F.silu(self.stem(z))))


class PatchCritic(nn.Module):
    """Three strided 2D conv layers applied frame-wise; one score per patch."""

    def __init__(self, in_channels: int = 3, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 4, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(2 * width, 1, 3, stride=1, padding=1),
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.net(frames.reshape(-1, *frames.shape[-3:]))


class VideoVAE(nn.Module):
    def __init__(self, config: VaeConfig | None = None):
        super().__init__()
        self.config = config or VaeConfig()
        cfg = self.config
        self.encoder = ChunkEncoder(cfg.in_channels, cfg.widths, cfg.c_z)
        self.decoder = WindowDecoder(cfg.in_channels, cfg.widths, cfg.c_z)
        self.discriminator = PatchCritic(cfg.in_channels)

    def partitions(self) -> dict[str, list[str]]:
        """Parameter names grouped into encoder / posterior head / decoder / discriminator."""
        groups: dict[str, list[str]] = {"encoder": [], "posterior_head": [], "decoder": [],
                                        "discriminator": []}
        for name, _ in self.named_parameters():
            if name.startswith("encoder.posterior_head"):
                groups["posterior_head"].append(name)
            else:
                groups[name.split(".")[0]].append(name)
        return groups

    def encode_frames(self, frames: torch.Tensor, deterministic: bool = True,
                      generator: torch.Generator | None = None) -> LatentSequence:
        """Encode a (T, C, H, W) tensor."""
        if frames.ndim != 4:
            raise DimensionError(f"expected (T, C, H, W), got {tuple(frames.shape)}")
        t, c, h, w = frames.shape
        for axis, size in (("T", t), ("H", h), ("W", w)):
            if size % CHUNK:
                raise DimensionError(f"axis {axis}={size} is not divisible by {CHUNK}")
        if c != self.config.in_channels:
            raise DimensionError(f"clip has {c} channels, VAE expects {self.config.in_channels}")
        u = t // CHUNK
        chunks = frames.reshape(u, CHUNK, c, h, w).permute(0, 2, 1, 3, 4)
        mean, logvar = self.encoder(chunks)
        mean = mean[:, :, 0].permute(0, 2, 3, 1)
        logvar = logvar[:, :, 0].permute(0, 2, 3, 1)
        if deterministic:
            units = mean
        else:
            eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
            units = mean + torch.exp(0.5 * logvar) * eps
        return LatentSequence(units, mean, logvar)

    def decode_units(self, units: torch.Tensor, window: int) -> torch.Tensor:
        """Decode (U, h, w, C_z) latents in U/R independent calls of R units each."""
        if window not in DECODE_WINDOWS:
            raise DimensionError(f"decoder window must be one of {DECODE_WINDOWS}, got {window}")
        if units.ndim != 4:
            raise DimensionError(f"expected (U, h, w, C_z), got {tuple(units.shape)}")
        u, h, w, cz = units.shape
        if u % window:
            raise DimensionError(f"U={u} latent units are not divisible by window R={window}")
        windows = units.reshape(u // window, window, h, w, cz).permute(0, 4, 1, 2, 3)
        out = torch.cat([self.decoder(windows[i:i + 1]) for i in range(u // window)])
        # (U/R, C, 8R, H, W) -> (T, C, H, W)
        return out.permute(0, 2, 1, 3, 4).reshape(u * CHUNK, self.config.in_channels, h * CHUNK, w * CHUNK)


def _as_tensor(frames) -> torch.Tensor:
    if isinstance(frames, VideoClip):
        frames = frames.frames
    if isinstance(frames, np.ndarray):
        frames = torch.from_numpy(np.ascontiguousarray(frames))
    return frames


def encode(clip, vae: VideoVAE, deterministic: bool = True,
           generator: torch.Generator | None = None) -> LatentSequence:
    frames = _as_tensor(clip).to(next(vae.parameters()).dtype)
    return vae.encode_frames(frames, deterministic, generator)


def decode(latents: LatentSequence | torch.Tensor, window: int, vae: VideoVAE) -> torch.Tensor:
    units = latents.units if isinstance(latents, LatentSequence) else latents
    return vae.decode_units(units, window)


def laplacian(frames: torch.Tensor) -> torch.Tensor:
    """5-point Laplacian of (N, 1, H, W) images with replicate-edge padding."""
    kernel = _LAPLACIAN.to(frames.dtype).reshape(1, 1, 3, 3)
    return F.conv2d(F.pad(frames, (1, 1, 1, 1), mode="replicate"), kernel)


def saliency_weights(clip) -> torch.Tensor:
    """|forward temporal difference of the Laplacian|, shape (T, 1, H, W).

    Channels are averaged first.  The last frame has no forward neighbour and
    reuses the weights of frame T-2.
    """
    frames = _as_tensor(clip)
    if frames.shape[0] < 2:
        raise DimensionError("saliency needs at least two frames (T >= 2)")
    lap = laplacian(frames.mean(dim=1, keepdim=True))
    w = (lap[1:] - lap[:-1]).abs()
    return torch.cat([w, w[-1:]], dim=0)


def kl_divergence(post_mean: torch.Tensor, post_logvar: torch.Tensor) -> torch.Tensor:
    if post_mean.shape != post_logvar.shape:
        raise DimensionError(f"mean {tuple(post_mean.shape)} vs logvar {tuple(post_logvar.shape)}")
    if not (torch.isfinite(post_mean).all() and torch.isfinite(post_logvar).all()):
        raise NumericError("posterior statistics contain NaN or Inf")
    return (-0.5 * (1 + post_logvar - post_mean.pow(2) - post_logvar.exp())).mean()


def _grad_magnitude(x: torch.Tensor) -> torch.Tensor:
    gx = x[..., :-1, 1:] - x[..., :-1, :-1]
    gy = x[..., 1:, :-1] - x[..., :-1, :-1]
    return torch.sqrt(gx * gx + gy * gy + 1e-12)


def perceptual_proxy(clip: torch.Tensor, recon: torch.Tensor, scales: int = 3) -> torch.Tensor:
    """L1 distance between gradient-magnitude pyramids of two (T, C, H, W) clips."""
    a, b = clip, recon
    total = clip.new_zeros(())
    for s in range(scales):
        if s:
            a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
        total = total + (_grad_magnitude(a) - _grad_magnitude(b)).abs().mean()
    return total / scales


def reconstruction_loss(clip, recon, weights=(1.0, 1.0, 0.1), saliency: torch.Tensor | None = None,
                        floor: float = 0.1) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    clip, recon = _as_tensor(clip), _as_tensor(recon)
    if clip.shape != recon.shape:
        raise DimensionError(f"clip {tuple(clip.shape)} and recon {tuple(recon.shape)} differ")
    w_mse, w_l1, w_perc = weights
    diff = clip - recon
    mse = diff.pow(2).mean()
    if saliency is None:
        l1 = diff.abs().mean()
    else:
        mean_w = saliency.mean()
        unit = saliency / mean_w if mean_w > 0 else torch.zeros_like(saliency)
        l1 = ((unit + floor) * diff.abs()).mean()
    perc = perceptual_proxy(clip, recon) if w_perc else clip.new_zeros(())
    total = w_mse * mse + w_l1 * l1 + w_perc * perc
    return total, {"mse": mse, "l1": l1, "perc": perc}


def generator_hinge(critic_scores: torch.Tensor) -> torch.Tensor:
    return -critic_scores.mean()


def critic_hinge(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    return F.relu(1 - real_scores).mean() + F.relu(1 + fake_scores).mean()


def vae_total_loss(clip, recon, post_mean, post_logvar, critic_scores=None,
                   config: VaeConfig | None = None, saliency: torch.Tensor | None = None
                   ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Reconstruction + lambda * KL + gamma * generator hinge term.

    ``components["rec"] + lambda_kl * components["kl"] + gamma_gan * components["gan"]``
    reproduces the returned total bit-for-bit.
    """
    config = config or VaeConfig()
    if config.gan_enabled and critic_scores is None:
        raise ConfigurationError("gan_enabled requires critic_scores")
    rec, parts = reconstruction_loss(clip, recon, config.rec_weights, saliency, config.adaptive_floor)
    kl = kl_divergence(post_mean, post_logvar)
    if config.gan_enabled:
        gan = generator_hinge(critic_scores)
    else:
        gan = rec.new_zeros(())
    total = rec + config.lambda_kl * kl + config.gamma_gan * gan
    return total, {"rec": rec, "kl": kl, "gan": gan, **parts}


def psnr_pm1(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB for [-1, 1] tensors mapped to [0, 1]."""
    mse = float(((a - b) / 2).pow(2).mean())
    return 100.0 if mse < 1e-10 else 10 * math.log10(1.0 / mse)


@dataclass
class VaeTrainResult:
    model: VideoVAE
    history: list[dict] = field(default_factory=list)


def train_vae(frames, config: VaeConfig | None = None, steps: int = 600, lr: float = 2e-3,
              seed: int = 0, adaptive_after: int | None = None, gan_after: int | None = None,
              log: Callable[[dict], None] | None = None, target_psnr: float | None = None
              ) -> VaeTrainResult:
    """Fit the VAE to a single clip (desk-scale overfit loop).

    ``adaptive_after`` switches the L1 term to the saliency-weighted form once
    the core objective has had that many steps; ``gan_after`` enables the
    patch critic for the final fine-tuning phase.
    """
    config = config or VaeConfig()
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    vae = VideoVAE(config)
    frames = _as_tensor(frames).float()
    u = frames.shape[0] // CHUNK
    windows = [r for r in DECODE_WINDOWS if u % r == 0]
    gen_params = [p for n, p in vae.named_parameters() if not n.startswith("discriminator")]
    opt = torch.optim.AdamW(gen_params, lr=lr, weight_decay=0.0)
    opt_d = torch.optim.AdamW(vae.discriminator.parameters(), lr=lr, betas=(0.5, 0.9))
    saliency = saliency_weights(frames)
    result = VaeTrainResult(vae)
    for step in range(steps):
        use_gan = gan_after is not None and step >= gan_after
        cfg = VaeConfig(**{**config.__dict__, "gan_enabled": use_gan})
        window = windows[int(torch.randint(len(windows), (1,), generator=gen))]
        lat = vae.encode_frames(frames, deterministic=False, generator=gen)
        recon = vae.decode_units(lat.units, window)
        critic = vae.discriminator(recon) if use_gan else None
        sal = saliency if adaptive_after is not None and step >= adaptive_after else None
        loss, parts = vae_total_loss(frames, recon, lat.post_mean, lat.post_logvar, critic, cfg, sal)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite VAE loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if use_gan:
            d_loss = critic_hinge(vae.discriminator(frames), vae.discriminator(recon.detach()))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
        record = {"step": step, "loss": float(loss.detach()), "window": window,
                  **{k: float(v.detach()) for k, v in parts.items()}}
        result.history.append(record)
        if log:
            log(record)
        if target_psnr is not None and step % 25 == 24:
            with torch.no_grad():
                recon_det = vae.decode_units(vae.encode_frames(frames).units, windows[0])
            if psnr_pm1(frames, recon_det) >= target_psnr:
                break
    return result
