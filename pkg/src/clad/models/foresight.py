"""Latent foresight heads and the Stage-1 losses.

Predictors g_p/g_s decode the future latent of each modality from z_dyn alone.
The latent loss is an MSE against L2-normalized EMA targets; auxiliary L1
reconstruction decoders keep predictions anchored to observable quantities.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

TARGET_NORM_EPS = 1e-8


class DegenerateTargetError(RuntimeError):
    """A target embedding had (near-)zero norm: encoder collapse or dead input."""


@dataclass
class ForesightOutput:
    z_hat_p: torch.Tensor      # (B, H)
    z_hat_s: torch.Tensor      # (B, H)
    z_hat_concat: torch.Tensor  # (B, 2H)
    z_dyn: torch.Tensor        # (B, H)


def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.GELU(), nn.Linear(hidden, d_out))


class ForesightHead(nn.Module):
    def __init__(self, hidden: int, d_proprio: int, d_semantic: int):
        super().__init__()
        self.g_p = _mlp(hidden, hidden, hidden)
        self.g_s = _mlp(hidden, hidden, hidden)
        # lightweight reconstruction decoders (grounding)
        self.h_p = _mlp(hidden, hidden, d_proprio)
        self.h_s = _mlp(hidden, hidden, d_semantic)

    def predict(self, z_dyn: torch.Tensor) -> ForesightOutput:
        z_hat_p = self.g_p(z_dyn)
        z_hat_s = self.g_s(z_dyn)
        return ForesightOutput(
            z_hat_p=z_hat_p,
            z_hat_s=z_hat_s,
            z_hat_concat=torch.cat([z_hat_p, z_hat_s], dim=-1),
            z_dyn=z_dyn,
        )


def pool_target_tokens(tokens: torch.Tensor) -> torch.Tensor:
    """Mean over the token axis: (B, N, H) -> (B, H)."""
    return tokens.mean(dim=-2)


def normalize_target(z_bar: torch.Tensor) -> torch.Tensor:
    norms = z_bar.norm(dim=-1, keepdim=True)
    if (norms < TARGET_NORM_EPS).any():
        raise DegenerateTargetError(
            f"target norm below {TARGET_NORM_EPS}: min {norms.min().item():.3e}"
        )
    return z_bar / norms

def latent_loss(fo: ForesightOutput, z_bar_p: torch.Tensor, z_bar_s: torch.Tensor,
                normalize_predictions: bool = False) -> torch.Tensor:
    """Sum over dims of squared error against unit-norm targets, batch mean."""
    t_p = normalize_target(z_bar_p)
    t_s = normalize_target(z_bar_s)
    pred_p, pred_s = fo.z_hat_p, fo.z_hat_s
    if normalize_predictions:
        pred_p = pred_p / pred_p.norm(dim=-1, keepdim=True).clamp_min(TARGET_NORM_EPS)
        pred_s = pred_s / pred_s.norm(dim=-1, keepdim=True).clamp_min(TARGET_NORM_EPS)
    per_sample = ((pred_p - t_p) ** 2).sum(dim=-1) + ((pred_s - t_s) ** 2).sum(dim=-1)
    return per_sample.mean()


def recon_loss(head: ForesightHead, fo: ForesightOutput,
               p_future: torch.Tensor, v_future: torch.Tensor) -> torch.Tensor:
    """L1 reconstruction of the raw future proprio and visual embedding."""
    per_sample = (head.h_p(fo.z_hat_p) - p_future).abs().sum(dim=-1)
    per_sample = per_sample + (head.h_s(fo.z_hat_s) - v_future).abs().sum(dim=-1)
    return per_sample.mean()
