"""Stage-1 model: encoders + dynamics core + foresight heads, and the combined
training objective."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from ..config import RunConfig
from .dynamics import DynamicsCore, draw_masks
from .encoders import Stage1Encoders
from .foresight import (ForesightHead, ForesightOutput, latent_loss,
                        pool_target_tokens, recon_loss)


@dataclass
class Stage1Losses:
    latent: torch.Tensor
    recon: torch.Tensor
    total: torch.Tensor
    lambda_recon: float
    fo: ForesightOutput
    z_bar_p: torch.Tensor
    z_bar_s: torch.Tensor


class Stage1Model(nn.Module):
    def __init__(self, cfg: RunConfig, n_tasks: int):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoders = Stage1Encoders(cfg.model, n_tasks)
        self.dynamics = DynamicsCore(cfg.model)
        self.foresight = ForesightHead(cfg.model.hidden, cfg.model.d_proprio,
                                       cfg.model.d_visual)

    @property
    def tau(self) -> int:
        return self.cfg.model.tau

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def clad_forward(self, batch: dict, generator: torch.Generator | None = None,
                     mask_ratio: float | None = None,
                     masks: tuple[torch.Tensor, torch.Tensor] | None = None):
        """z_dyn for a batch; fresh independent mask draws per modality."""
        enc = self.encoders
        p_curr = enc.encode_proprio(batch["p_curr"])
        p_past = enc.encode_proprio(batch["p_past"])
        _, s_curr = enc.fuse_semantic(batch["v_curr"], batch["task_id"])
        _, s_past = enc.fuse_semantic(batch["v_past"], batch["task_id"])
        a_tokens = enc.encode_actions(batch["a_seq"], self.tau)
        B = p_curr.shape[0]
        if masks is None:
            r = self.cfg.mask.ratio if mask_ratio is None else mask_ratio
            mask_p = draw_masks(B, self.tau, r, generator)
            mask_s = draw_masks(B, self.tau, r, generator)
        else:
            mask_p, mask_s = masks
        z_dyn = self.dynamics(p_curr, p_past, s_curr, s_past, a_tokens, mask_p, mask_s)
        return z_dyn, (mask_p, mask_s)

    def stage1_loss(self, batch: dict, generator: torch.Generator | None = None,
                    mask_ratio: float | None = None,
                    masks: tuple[torch.Tensor, torch.Tensor] | None = None) -> Stage1Losses:
        z_dyn, drawn = self.clad_forward(batch, generator, mask_ratio, masks)
        fo = self.foresight.predict(z_dyn)
        tokens_p, tokens_s = self.encoders.encode_target(
            batch["p_future"], batch["v_future"], batch["task_id"]
        )
        z_bar_p = pool_target_tokens(tokens_p)
        z_bar_s = pool_target_tokens(tokens_s)
        l_latent = latent_loss(fo, z_bar_p, z_bar_s,
                               normalize_predictions=self.cfg.loss.normalize_predictions)
        l_recon = recon_loss(self.foresight, fo, batch["p_future"], batch["v_future"])
        lam = self.cfg.loss.lambda_recon
        return Stage1Losses(
            latent=l_latent,
            recon=l_recon,
            total=l_latent + lam * l_recon,
            lambda_recon=lam,
            fo=fo,
            z_bar_p=z_bar_p,
            z_bar_s=z_bar_s,
        )

    @torch.no_grad()
    def foresight_from_batch(self, batch: dict) -> ForesightOutput:
        """Inference-time foresight: masking disabled (ratio 0)."""
        z_dyn, _ = self.clad_forward(batch, mask_ratio=0.0)
        return self.foresight.predict(z_dyn)
