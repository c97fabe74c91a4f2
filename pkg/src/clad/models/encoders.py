"""Online and EMA-target state encoders.

f_p / f_s tokenize a state vector into N tokens of width H, FiLM fuses the
frozen visual embedding with a learned task embedding, f_a encodes each action
independently. Target copies of {f_p, f_s, FiLM, task table} are updated with
momentum and never enter a gradient computation.
"""

from __future__ import annotations

import copy

import torch
from torch import nn

from ..config import ModelConfig
from .backbone import FrozenVisualBackbone


class MLPTokenizer(nn.Module):
    """State vector -> (n_tokens, token_width) via a 2-hidden-layer MLP."""

    def __init__(self, in_dim: int, hidden: int, n_tokens: int, token_width: int):
        super().__init__()
        self.n_tokens = n_tokens
        self.token_width = token_width
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
            nn.GELU(),
            nn.Linear(hidden, n_tokens * token_width),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.net(x)
        return out.view(*x.shape[:-1], self.n_tokens, self.token_width)


class FilmFusion(nn.Module):
    """s = (1 + gamma(l)) * (W_v v) + beta(l), identity modulation at init."""

    def __init__(self, d_visual: int, d_lang: int, d_out: int):
        super().__init__()
        self.proj = nn.Linear(d_visual, d_out, bias=False)
        self.gamma = nn.Linear(d_lang, d_out)
        self.beta = nn.Linear(d_lang, d_out)
        nn.init.zeros_(self.gamma.weight)
        nn.init.zeros_(self.gamma.bias)
        nn.init.zeros_(self.beta.weight)
        nn.init.zeros_(self.beta.bias)

    def forward(self, v: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
        return (1.0 + self.gamma(l)) * self.proj(v) + self.beta(l)


class ActionEncoder(nn.Module):
    """Shared per-action MLP; (B, tau, d_action) -> (B, tau, H)."""

    def __init__(self, d_action: int, hidden: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_action, hidden),
            nn.GELU(),
            nn.Linear(hidden, hidden),
        )

    def forward(self, a_seq: torch.Tensor) -> torch.Tensor:
        return self.net(a_seq)


class Stage1Encoders(nn.Module):
    D_ACTION = 2

    def __init__(self, cfg: ModelConfig, n_tasks: int):
        super().__init__()
        self.cfg = cfg
        self.n_tasks = n_tasks
        d_s = cfg.d_visual  # fused semantic width matches the visual embedding
        self.backbone = FrozenVisualBackbone(cfg.d_visual, seed=cfg.backbone_seed)
        self.online = nn.ModuleDict(
            {
                "task_table": nn.Embedding(n_tasks, cfg.d_lang),
                "film": FilmFusion(cfg.d_visual, cfg.d_lang, d_s),
                "f_p": MLPTokenizer(cfg.d_proprio, cfg.hidden, cfg.n_tokens_p, cfg.hidden),
                "f_s": MLPTokenizer(d_s, cfg.hidden, cfg.n_tokens_s, cfg.hidden),
            }
        )
        if cfg.frozen_task_table:
            self.online["task_table"].weight.requires_grad_(False)
        self.f_a = ActionEncoder(self.D_ACTION, cfg.hidden)
        self.target = copy.deepcopy(self.online)
        for p in self.target.parameters():
            p.requires_grad_(False)

    # -- online paths -----------------------------------------------------

    def embed_visual(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images)

    def encode_proprio(self, p: torch.Tensor) -> torch.Tensor:
        if not torch.isfinite(p).all():
            raise ValueError("non-finite proprioceptive input")
        return self.online["f_p"](p)

    def _check_task(self, task_id: torch.Tensor) -> None:
        if task_id.numel() and (task_id.min() < 0 or task_id.max() >= self.n_tasks):
            raise ValueError(f"task_id outside [0, {self.n_tasks})")

    def fuse_semantic(self, v: torch.Tensor, task_id: torch.Tensor,
                      params: str = "online") -> tuple[torch.Tensor, torch.Tensor]:
        """Fused semantic state and its tokens from a visual embedding."""
        self._check_task(task_id)
        mods = self.online if params == "online" else self.target
        l = mods["task_table"](task_id)
        s = mods["film"](v, l)
        return s, mods["f_s"](s)

    def encode_semantic(self, images: torch.Tensor,
                        task_id: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        v = self.embed_visual(images)
        s, tokens = self.fuse_semantic(v, task_id)
        return v, s, tokens

    def encode_actions(self, a_seq: torch.Tensor, tau: int) -> torch.Tensor:
        if a_seq.shape[-2] != tau:
            raise ValueError(f"expected {tau} actions, got {a_seq.shape[-2]}")
        return self.f_a(a_seq)

    # -- target paths ------------------------------------------------------

    @torch.no_grad()
    def encode_target(self, p_future: torch.Tensor, v_future: torch.Tensor,
                      task_id: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Token targets from the EMA copies; never records gradients."""
        if not torch.isfinite(p_future).all():
            raise ValueError("non-finite proprioceptive input")
        tokens_p = self.target["f_p"](p_future)
        _, tokens_s = self.fuse_semantic(v_future, task_id, params="target")
        return tokens_p, tokens_s

    @torch.no_grad()
    def ema_update(self, momentum: float) -> None:
        """theta_target <- m * theta_target + (1 - m) * theta_online."""
        on = dict(self.online.named_parameters())
        tg = dict(self.target.named_parameters())
        if on.keys() != tg.keys():
            raise RuntimeError("online/target parameter sets diverged")
        for name, p_t in tg.items():
            p_o = on[name]
            if p_t.shape != p_o.shape:
                raise RuntimeError(f"shape mismatch for {name}")
            p_t.mul_(momentum).add_(p_o, alpha=1.0 - momentum)
