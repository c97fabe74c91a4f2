"""DDPM action-chunk policy conditioned on latent foresight.

The denoiser is a FiLM-conditioned MLP over the flattened chunk with a
sinusoidal timestep embedding. The foresight vector is modulated by the
current observation (Stage-2 FiLM, identity at init); ancestral sampling
follows the standard reverse update with sigma_1 = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from ..config import RunConfig

D_ACTION = 2


@dataclass
class DiffusionSchedule:
    betas: torch.Tensor       # (K,)
    alphas: torch.Tensor      # (K,)
    alpha_bars: torch.Tensor  # (K,) cumulative products
    sigmas: torch.Tensor      # (K,) posterior noise scales, sigmas[0] == 0

    @property
    def K(self) -> int:
        return self.betas.shape[0]


def build_schedule(K: int, beta_start: float, beta_end: float) -> DiffusionSchedule:
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("require 0 < beta_start <= beta_end < 1")
    if K < 1:
        raise ValueError("K must be >= 1")
    betas = torch.linspace(beta_start, beta_end, K, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    alpha_bars_prev = torch.cat([torch.ones(1, dtype=torch.float64), alpha_bars[:-1]])
    sigma_sq = betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)
    sigmas = torch.sqrt(sigma_sq)
    sigmas[0] = 0.0  # final denoising step to x_0 is deterministic
    return DiffusionSchedule(betas, alphas, alpha_bars, sigmas)


def forward_noise(a_0: torch.Tensor, k: torch.Tensor | int, eps: torch.Tensor,
                  schedule: DiffusionSchedule) -> torch.Tensor:
    """a_k = sqrt(abar_k) a_0 + sqrt(1 - abar_k) eps, k in [1, K]."""
    k = torch.as_tensor(k)
    if (k < 1).any() or (k > schedule.K).any():
        raise ValueError(f"diffusion step k must lie in [1, {schedule.K}]")
    abar = schedule.alpha_bars[k - 1].to(a_0.dtype)
    while abar.dim() < a_0.dim():
        abar = abar.unsqueeze(-1)
    return torch.sqrt(abar) * a_0 + torch.sqrt(1.0 - abar) * eps


def ddpm_sample(denoise_fn, shape: tuple, schedule: DiffusionSchedule,
                generator: torch.Generator | None = None,
                dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Ancestral sampler; `denoise_fn(x, k)` predicts the injected noise."""
    x = torch.randn(shape, generator=generator, dtype=dtype)
    for k in range(schedule.K, 0, -1):
        alpha = float(schedule.alphas[k - 1])
        abar = float(schedule.alpha_bars[k - 1])
        sigma = float(schedule.sigmas[k - 1])
        eps_hat = denoise_fn(x, torch.full(shape[:1], k, dtype=torch.long))
        x = (x - (1.0 - alpha) / math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(alpha)
        if sigma > 0.0:
            x = x + sigma * torch.randn(shape, generator=generator, dtype=dtype)
    return x


class SinusoidalTimeEmbedding(nn.Module):
    def __init__(self, dim: int, max_period: float = 10_000.0):
        super().__init__()
        if dim % 2 != 0:
            raise ValueError("time embedding dim must be even")
        self.dim = dim
        self.max_period = max_period

    def forward(self, k: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(self.max_period) * torch.arange(half, dtype=torch.float64) / half
        )
        ang = k.double().unsqueeze(-1) * freqs
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class ObservationEncoders(nn.Module):
    """Stage-2-owned observation encoders e_p / e_s (disjoint from Stage 1)."""

    def __init__(self, d_proprio: int, d_visual: int, d_lang: int, n_tasks: int,
                 obs_width: int):
        super().__init__()
        self.task_table = nn.Embedding(n_tasks, d_lang)
        self.e_p = nn.Sequential(
            nn.Linear(d_proprio, obs_width), nn.GELU(), nn.Linear(obs_width, obs_width)
        )
        self.e_s = nn.Sequential(
            nn.Linear(d_visual + d_lang, obs_width), nn.GELU(),
            nn.Linear(obs_width, obs_width),
        )

    def forward(self, p: torch.Tensor, v: torch.Tensor,
                task_id: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        o_p = self.e_p(p)
        o_s = self.e_s(torch.cat([v, self.task_table(task_id)], dim=-1))
        return o_p, o_s


class ForesightFilm(nn.Module):
    """g = (1 + gamma(o)) * fo + beta(o); zero-init so conditioning starts as
    the identity on the foresight vector."""

    def __init__(self, obs_width: int, foresight_width: int):
        super().__init__()
        self.gamma = nn.Linear(obs_width, foresight_width)
        self.beta = nn.Linear(obs_width, foresight_width)
        for lin in (self.gamma, self.beta):
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)

    def forward(self, fo: torch.Tensor, obs: torch.Tensor) -> torch.Tensor:
        return (1.0 + self.gamma(obs)) * fo + self.beta(obs)


class _FilmBlock(nn.Module):
    def __init__(self, width: int, cond_width: int):
        super().__init__()
        self.lin = nn.Linear(width, width)
        self.gamma = nn.Linear(cond_width, width)
        self.beta = nn.Linear(cond_width, width)
        self.act = nn.GELU()

    def forward(self, h: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        return self.act((1.0 + self.gamma(cond)) * self.lin(h) + self.beta(cond))


class DenoiserMLP(nn.Module):
    """Noise predictor over flattened action chunks, FiLM-conditioned at each
    hidden block by the (g_p, g_s) concatenation."""

    N_BLOCKS = 3

    def __init__(self, tau: int, width: int, cond_width: int, time_dim: int = 32):
        super().__init__()
        self.tau = tau
        self.time_embed = SinusoidalTimeEmbedding(time_dim)
        self.input = nn.Linear(tau * D_ACTION + time_dim, width)
        self.blocks = nn.ModuleList(
            [_FilmBlock(width, cond_width) for _ in range(self.N_BLOCKS)]
        )
        self.output = nn.Linear(width, tau * D_ACTION)

    def forward(self, a_k: torch.Tensor, k: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        B = a_k.shape[0]
        t = self.time_embed(k).to(a_k.dtype)
        h = self.input(torch.cat([a_k.reshape(B, -1), t], dim=-1))
        for block in self.blocks:
            h = block(h, cond)
        return self.output(h).view(B, self.tau, D_ACTION)


class ActionNormalizer(nn.Module):
    """Per-dimension min-max normalization to [-1, 1] from dataset statistics."""

    def __init__(self, lo: torch.Tensor, hi: torch.Tensor):
        super().__init__()
        span = (hi - lo).clamp_min(1e-6)
        self.register_buffer("lo", lo)
        self.register_buffer("span", span)

    @classmethod
    def from_actions(cls, actions) -> "ActionNormalizer":
        a = torch.as_tensor(actions, dtype=torch.float32).reshape(-1, D_ACTION)
        return cls(a.min(dim=0).values, a.max(dim=0).values)

    def normalize(self, a: torch.Tensor) -> torch.Tensor:
        return 2.0 * (a - self.lo) / self.span - 1.0

    def denormalize(self, a: torch.Tensor) -> torch.Tensor:
        return (a + 1.0) * 0.5 * self.span + self.lo


def apply_condition_mode(fo_concat: torch.Tensor, mode: str, hidden: int) -> torch.Tensor:
    """Ablation switch: zero out one modality's foresight slot."""
    if mode == "full":
        return fo_concat
    out = fo_concat.clone()
    if mode == "proprio_only":
        out[..., hidden:] = 0.0
    elif mode == "semantic_only":
        out[..., :hidden] = 0.0
    else:
        raise ValueError(f"bad condition mode: {mode}")
    return out


class DiffusionPolicy(nn.Module):
    def __init__(self, cfg: RunConfig, n_tasks: int, normalizer: ActionNormalizer):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        m, p = cfg.model, cfg.policy
        self.foresight_width = 2 * m.hidden
        if p.no_foresight and p.obs_width != self.foresight_width:
            raise ValueError("no_foresight requires obs_width == 2 * hidden")
        self.obs = ObservationEncoders(m.d_proprio, m.d_visual, m.d_lang, n_tasks,
                                       p.obs_width)
        self.film_p = ForesightFilm(p.obs_width, self.foresight_width)
        self.film_s = ForesightFilm(p.obs_width, self.foresight_width)
        self.denoiser = DenoiserMLP(m.tau, p.hidden_width, 2 * self.foresight_width)
        self.normalizer = normalizer
        self.schedule = build_schedule(cfg.ddpm.K, cfg.ddpm.beta_start, cfg.ddpm.beta_end)

    def make_condition(self, fo_concat: torch.Tensor, o_p: torch.Tensor,
                       o_s: torch.Tensor) -> torch.Tensor:
        if self.cfg.policy.no_foresight:
            # foresight-free variant: raw observation concat, same widths
            return torch.cat([o_p, o_s], dim=-1)
        fo_concat = apply_condition_mode(fo_concat, self.cfg.policy.condition_mode,
                                         self.cfg.model.hidden)
        g_p = self.film_p(fo_concat, o_p)
        g_s = self.film_s(fo_concat, o_s)
        return torch.cat([g_p, g_s], dim=-1)

    def denoise_train_loss(self, a_0_norm: torch.Tensor, cond: torch.Tensor,
                           generator: torch.Generator | None = None,
                           k: torch.Tensor | None = None,
                           eps: torch.Tensor | None = None) -> torch.Tensor:
        """Noise-prediction MSE, summed over chunk dims, batch mean."""
        B = a_0_norm.shape[0]
        if k is None:
            k = torch.randint(1, self.schedule.K + 1, (B,), generator=generator)
        if eps is None:
            eps = torch.randn(a_0_norm.shape, generator=generator, dtype=a_0_norm.dtype)
        a_k = forward_noise(a_0_norm, k, eps, self.schedule)
        eps_hat = self.denoiser(a_k, k, cond)
        return ((eps - eps_hat) ** 2).sum(dim=(-2, -1)).mean()

    @torch.no_grad()
    def sample_actions(self, cond: torch.Tensor,
                       generator: torch.Generator | None = None,
                       sample_K: int = 0) -> torch.Tensor:
        """Sample a denormalized, bound-clipped action chunk (B, tau, 2)."""
        B = cond.shape[0]
        sched = self.schedule
        if sample_K and sample_K != sched.K:
            sched = build_schedule(sample_K, self.cfg.ddpm.beta_start, self.cfg.ddpm.beta_end)
        chunk = ddpm_sample(
            lambda x, k: self.denoiser(x, k, cond),
            (B, self.cfg.model.tau, D_ACTION),
            sched,
            generator=generator,
            dtype=cond.dtype,
        )
        a = self.normalizer.denormalize(chunk)
        a_max = self.cfg.env.a_max
        return a.clamp(-a_max, a_max)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]
