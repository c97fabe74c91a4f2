"""Cross-modal dynamics core: transition embeddings with stochastic action
masking, asymmetric cross-attention between modalities, and learnable-query
pooling down to the dynamics code z_dyn.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from ..config import ModelConfig


class CrossAttentionBlock(nn.Module):
    """Pre-norm multi-head cross-attention + residual + feed-forward sublayer.

    The residual rides on the query stream. No positional encodings: tokens
    are learned reshapes of a single state vector, not a sequence, which makes
    the output invariant to permutations of the key/value tokens.
    """

    def __init__(self, width: int, n_heads: int, ff_mult: int = 2):
        super().__init__()
        if width % n_heads != 0:
            raise ValueError("width must be divisible by n_heads")
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        self.ln_q = nn.LayerNorm(width)
        self.ln_kv = nn.LayerNorm(width)
        self.w_q = nn.Linear(width, width)
        self.w_k = nn.Linear(width, width)
        self.w_v = nn.Linear(width, width)
        self.w_o = nn.Linear(width, width)
        self.ln_ff = nn.LayerNorm(width)
        self.ff = nn.Sequential(
            nn.Linear(width, ff_mult * width),
            nn.GELU(),
            nn.Linear(ff_mult * width, width),
        )

    def attention_weights(self, query: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        q, k, _ = self._qkv(query, kv)
        return torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)

    def _qkv(self, query, kv):
        B, Nq, W = query.shape
        Nk = kv.shape[1]
        qn = self.ln_q(query)
        kvn = self.ln_kv(kv)
        q = self.w_q(qn).view(B, Nq, self.n_heads, self.head_dim).transpose(1, 2)
        k = self.w_k(kvn).view(B, Nk, self.n_heads, self.head_dim).transpose(1, 2)
        v = self.w_v(kvn).view(B, Nk, self.n_heads, self.head_dim).transpose(1, 2)
        return q, k, v

    def forward(self, query: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        B, Nq, W = query.shape
        q, k, v = self._qkv(query, kv)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, Nq, W)
        x = query + self.w_o(out)
        return x + self.ff(self.ln_ff(x))


class DynamicsCore(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        H = cfg.hidden
        self.mask_token = nn.Parameter(torch.zeros(H))
        nn.init.normal_(self.mask_token, std=0.02)
        self.attn_p = CrossAttentionBlock(H, cfg.n_heads)
        self.attn_s = CrossAttentionBlock(H, cfg.n_heads)
        self.attn_fuse = CrossAttentionBlock(H, cfg.n_heads)
        self.pool_query = nn.Parameter(torch.zeros(1, H))
        nn.init.normal_(self.pool_query, std=0.02)
        self.pool_attn = CrossAttentionBlock(H, cfg.n_heads)

    def mask_actions(self, action_tokens: torch.Tensor, mask_draws: torch.Tensor) -> torch.Tensor:
        tok = self.mask_token.to(action_tokens.dtype)
        return torch.where(mask_draws.unsqueeze(-1), tok.expand_as(action_tokens), action_tokens)

    def transition_embed(self, block: CrossAttentionBlock, curr_tokens: torch.Tensor,
                         past_tokens: torch.Tensor, action_tokens: torch.Tensor,
                         mask_draws: torch.Tensor) -> torch.Tensor:
        kv = torch.cat([past_tokens, self.mask_actions(action_tokens, mask_draws)], dim=1)
        return block(curr_tokens, kv)

    def cross_modal_fuse(self, z_p: torch.Tensor, z_s: torch.Tensor) -> torch.Tensor:
        direction = self.cfg.attention_direction
        if direction == "p_queries_s":
            return self.attn_fuse(z_p, z_s)
        if direction == "s_queries_p":
            return self.attn_fuse(z_s, z_p)
        if direction == "symmetric_self":
            both = torch.cat([z_p, z_s], dim=1)
            return self.attn_fuse(both, both)
        raise ValueError(f"bad attention direction: {direction}")

    def pool_readout(self, z_fused: torch.Tensor) -> torch.Tensor:
        mode = self.cfg.pool
        if mode == "learned_query":
            q = self.pool_query.to(z_fused.dtype).unsqueeze(0).expand(z_fused.shape[0], -1, -1)
            return self.pool_attn(q, z_fused).squeeze(1)
        if mode == "mean":
            return z_fused.mean(dim=1)
        if mode == "max":
            return z_fused.max(dim=1).values
        raise ValueError(f"bad pool mode: {mode}")

    def forward(self, p_curr: torch.Tensor, p_past: torch.Tensor,
                s_curr: torch.Tensor, s_past: torch.Tensor,
                action_tokens: torch.Tensor, mask_p: torch.Tensor,
                mask_s: torch.Tensor) -> torch.Tensor:
        z_p = self.transition_embed(self.attn_p, p_curr, p_past, action_tokens, mask_p)
        z_s = self.transition_embed(self.attn_s, s_curr, s_past, action_tokens, mask_s)
        return self.pool_readout(self.cross_modal_fuse(z_p, z_s))


def draw_masks(batch: int, tau: int, ratio: float,
               generator: torch.Generator | None) -> torch.Tensor:
    """Independent Bernoulli(ratio) per action token per forward pass."""
    if ratio <= 0.0:
        return torch.zeros(batch, tau, dtype=torch.bool)
    if ratio >= 1.0:
        return torch.ones(batch, tau, dtype=torch.bool)
    return torch.rand(batch, tau, generator=generator) < ratio
