"""Conditional diffusion over preference vectors.

A cosine-free quadratic beta schedule, a single-token cross-attention
denoiser that predicts x0, the closed-form posterior step, and a truncated
reverse chain that starts from a partially diffused initial vector instead
of pure noise. Direction-keyed linear guessers supply that initial vector
at inference time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import torch
from torch import nn

from .corpus import ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step beta/alpha arrays, 1-based: beta[t-1] holds β_t."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def bar(self, t: int) -> float:
        """ᾱ_t with the ᾱ_0 = 1 convention."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def check_step(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"step t={t} outside 1..{self.T}")


def build_noise_schedule(beta_min: float, beta_max: float, T: int) -> NoiseSchedule:
    """Interpolate sqrt(beta) linearly over T steps and square."""
    if not 0 < beta_min < beta_max < 1:
        raise ConfigError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    if T < 2:
        raise ConfigError(f"need T >= 2, got {T}")
    steps = np.arange(T, dtype=np.float64)
    root = math.sqrt(beta_min) + steps / (T - 1) * (math.sqrt(beta_max) - math.sqrt(beta_min))
    beta = root**2
    alpha = 1.0 - beta
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def forward_sample(
    x0: torch.Tensor, t: int, noise: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Closed-form forward marginal: √ᾱ_t·x0 + √(1−ᾱ_t)·noise."""
    schedule.check_step(t)
    bar = schedule.bar(t)
    return math.sqrt(bar) * x0 + math.sqrt(1.0 - bar) * noise


def posterior_step(
    x_t: torch.Tensor,
    x0_hat: torch.Tensor,
    t: int,
    schedule: NoiseSchedule,
    noise: torch.Tensor,
) -> torch.Tensor:
    """One reverse step from the approximate posterior q(x_{t-1} | x_t, x̂_0).

    Variance is the standard posterior variance and is forced to zero at
    t=1 so the chain ends deterministically.
    """
    schedule.check_step(t)
    bar_t = schedule.bar(t)
    bar_prev = schedule.bar(t - 1)
    beta_t = float(schedule.beta[t - 1])
    alpha_t = float(schedule.alpha[t - 1])
    denom = 1.0 - bar_t
    mean = (math.sqrt(bar_prev) * beta_t / denom) * x0_hat + (
        math.sqrt(alpha_t) * (1.0 - bar_prev) / denom
    ) * x_t
    if t == 1:
        return mean
    variance = (1.0 - bar_prev) / denom * beta_t
    return mean + math.sqrt(variance) * noise


class NoiseSourceProtocol(Protocol):
    def sample(self, like: torch.Tensor) -> torch.Tensor: ...


class GaussianNoise:
    """Standard normal draws from an explicit generator for replayability."""

    def __init__(self, generator: torch.Generator | None = None):
        self.generator = generator

    def sample(self, like: torch.Tensor) -> torch.Tensor:
        return torch.randn(
            like.shape, generator=self.generator, dtype=like.dtype, device=like.device
        )


class ZeroNoise:
    def sample(self, like: torch.Tensor) -> torch.Tensor:
        return torch.zeros_like(like)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Classic sin/cos position code for integer steps, width dim."""
    half = dim // 2
    device = t.device
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=device) / max(half, 1)
    )
    args = t.to(torch.float64).unsqueeze(-1) * freqs.unsqueeze(0)
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2 == 1:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb


CONDITIONING_MODES = ("cross_attention", "linear", "id_only", "text_only", "none")


class Denoiser(nn.Module):
    """x0-predicting network conditioned on a single guidance vector.

    The noisy vector and the condition each act as one token; guidance is
    injected through cross-attention (or a linear fusion, or not at all,
    depending on the conditioning mode). id_only / text_only change how the
    condition was built upstream and behave like cross_attention here.
    """

    def __init__(self, d_model: int, n_heads: int = 4):
        super().__init__()
        self.d_model = d_model
        self.time_proj = nn.Linear(d_model, d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.linear_fuse = nn.Linear(2 * d_model, d_model)
        self.ff = nn.Sequential(
            nn.Linear(d_model, 4 * d_model),
            nn.GELU(),
            nn.Linear(4 * d_model, d_model),
        )

    def forward(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        h_cond: torch.Tensor,
        mode: str = "cross_attention",
    ) -> torch.Tensor:
        if mode not in CONDITIONING_MODES:
            raise ConfigError(f"unknown conditioning mode {mode!r}")
        dtype = self.time_proj.weight.dtype
        e_t = self.time_proj(sinusoidal_embedding(t, self.d_model).to(dtype))
        x_tilde = x_t + e_t

        query = x_tilde.unsqueeze(1)
        if mode == "linear":
            guided = self.linear_fuse(torch.cat([x_tilde, h_cond], dim=-1))
        else:
            source = query if mode == "none" else h_cond.unsqueeze(1)
            attn_out, _ = self.attn(query, source, source, need_weights=False)
            guided = attn_out.squeeze(1)
        x_1 = x_tilde + guided
        return x_1 + self.ff(x_1)


def diffusion_loss(
    x0: torch.Tensor,
    h_cond: torch.Tensor,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    target_mode: str = "x0",
    conditioning_mode: str = "cross_attention",
    t: torch.Tensor | None = None,
    noise: torch.Tensor | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Denoising MSE with per-element uniform steps.

    ``t`` and ``noise`` may be supplied for deterministic tests; otherwise
    they are drawn here (from ``generator`` when given). target_mode "x0"
    regresses the clean vector, "noise_mse" regresses the injected noise.
    """
    if x0.numel() == 0:
        raise ValueError("empty diffusion batch")
    if target_mode not in ("x0", "noise_mse"):
        raise ConfigError(f"unknown target mode {target_mode!r}")
    batch = x0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T + 1, (batch,), generator=generator, device=x0.device)
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)

    bar = torch.as_tensor(
        schedule.alpha_bar[(t - 1).cpu().numpy()], dtype=x0.dtype, device=x0.device
    ).unsqueeze(-1)
    x_t = torch.sqrt(bar) * x0 + torch.sqrt(1.0 - bar) * noise
    prediction = denoiser(x_t, t, h_cond, mode=conditioning_mode)
    target = x0 if target_mode == "x0" else noise
    return nn.functional.mse_loss(prediction, target)


def reverse_generate(
    h_init: torch.Tensor,
    h_cond: torch.Tensor,
    lam: float,
    schedule: NoiseSchedule,
    denoise_fn: Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor],
    noise_source: NoiseSourceProtocol,
) -> torch.Tensor:
    """Truncated reverse chain seeded from a forward-diffused h_init.

    Runs exactly t_start = max(1, round(λ·T)) denoise calls. Only the final
    call tracks gradients; the rest of the chain is treated as data, which
    bounds memory for long chains while still letting the last refinement
    step train end to end.
    """
    if not 0 < lam <= 1:
        raise ConfigError(f"start-step ratio must be in (0, 1], got {lam}")
    t_start = max(1, round(lam * schedule.T))
    x = forward_sample(h_init, t_start, noise_source.sample(h_init), schedule)
    t_batch = torch.empty(h_init.shape[0], dtype=torch.long, device=h_init.device)

    with torch.no_grad():
        for t in range(t_start, 1, -1):
            x0_hat = denoise_fn(x, t_batch.fill_(t), h_cond)
            x = posterior_step(x, x0_hat, t, schedule, noise_source.sample(x))

    x0_hat = denoise_fn(x.detach(), t_batch.fill_(1), h_cond)
    return posterior_step(x.detach(), x0_hat, 1, schedule, noise_source.sample(x))


class Guessers(nn.Module):
    """Direction-keyed linear maps from condition space to target space."""

    def __init__(self, d_model: int):
        super().__init__()
        self.maps = nn.ModuleDict({"A2B": nn.Linear(d_model, d_model), "B2A": nn.Linear(d_model, d_model)})

    def predict(self, h_cond: torch.Tensor, direction: str) -> torch.Tensor:
        if direction not in self.maps:
            raise ConfigError(f"unknown direction {direction!r}")
        return self.maps[direction](h_cond)


def guesser_loss(prediction: torch.Tensor, h_tgt: torch.Tensor) -> torch.Tensor:
    """Squared L2 residual, summed over width and averaged over the batch."""
    return (prediction - h_tgt).pow(2).sum(dim=-1).mean()


def alignment_loss(h_rev: torch.Tensor, h_cond: torch.Tensor) -> torch.Tensor:
    """Squared L2 distance pulling restored vectors toward the condition."""
    return (h_rev - h_cond).pow(2).sum(dim=-1).mean()
