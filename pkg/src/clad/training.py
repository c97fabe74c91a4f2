"""Two-stage training: dynamics + foresight (Stage 1) and the frozen-foresight
diffusion policy (Stage 2).

Every run writes the resolved config, a line-delimited metrics log
(step, loss components, grad norm, wall time), and a checkpoint into its
output directory; two runs with identical (config, dataset) are bit-identical
in single-threaded mode.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .config import RunConfig
from .data import BatchSampler, precompute_visual
from .errors import NumericError, PreconditionError
from .models.backbone import parameter_hash
from .models.policy import ActionNormalizer, DiffusionPolicy
from .models.stage1 import Stage1Model
from .sim.dataset import Dataset, load_dataset
from .sim.tasks import N_TASKS

STAGE1_CKPT = "stage1.npz"
STAGE2_CKPT = "stage2.npz"
METRICS_LOG = "metrics.jsonl"
CONFIG_FILE = "config.json"


def mask_ratio_for_step(cfg: RunConfig, step: int) -> float:
    """Base ratio, or the last curriculum entry whose step threshold passed."""
    ratio = cfg.mask.ratio
    for entry_step, entry_ratio in cfg.mask.curriculum:
        if step >= entry_step:
            ratio = entry_ratio
    return ratio


def _setup_run(config: RunConfig, out_dir: str | Path) -> tuple[Path, Dataset]:
    config.validate()
    if not config.dataset:
        raise PreconditionError("config.dataset not set")
    if not (Path(config.dataset) / "manifest.json").exists():
        raise PreconditionError(f"no dataset at {config.dataset}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / CONFIG_FILE)
    if config.train.deterministic:
        torch.set_num_threads(1)
    data = load_dataset(config.dataset)
    if data.episode_len != config.env.episode_len:
        raise PreconditionError(
            f"dataset episode_len {data.episode_len} != config {config.env.episode_len}"
        )
    return out, data


def _log_metrics(fh, step: int, fields: dict) -> None:
    fh.write(json.dumps({"step": step, **fields}, sort_keys=True) + "\n")
    fh.flush()


def _write_summary(out: Path, steps: int, wall_time: float) -> None:
    """Timing sidecar, kept out of metrics.jsonl so logs are reproducible."""
    (out / "summary.json").write_text(
        json.dumps({"steps": steps, "wall_time_s": wall_time}, indent=2) + "\n"
    )


def _check_finite(value: float, step: int, out: Path, context: dict) -> None:
    if np.isfinite(value):
        return
    dump = out / f"diagnostic_step{step}.json"
    dump.write_text(json.dumps({"step": step, **context}, indent=2))
    raise NumericError(f"non-finite loss at step {step}; diagnostics in {dump}")


def train_stage1(config: RunConfig, out_dir: str | Path) -> Path:
    out, data = _setup_run(config, out_dir)
    torch.manual_seed(config.seed)
    model = Stage1Model(config, N_TASKS)
    visual = precompute_visual(data, model.encoders.backbone)
    sampler = BatchSampler(data, visual, config.model.tau)
    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.trainable_parameters(), lr=config.train.lr)
    backbone_hash_before = parameter_hash(model.encoders.backbone)

    t0 = time.monotonic()
    with open(out / METRICS_LOG, "w") as fh:
        for step in range(config.train.stage1_steps):
            batch = sampler.sample_stage1(config.train.batch_size, rng)
            losses = model.stage1_loss(batch, gen,
                                       mask_ratio=mask_ratio_for_step(config, step))
            total = losses.total
            _check_finite(total.item(), step, out,
                          {"latent": losses.latent.item(), "recon": losses.recon.item()})
            opt.zero_grad()
            total.backward()
            grad_norm = torch.nn.utils.clip_grad_norm_(
                model.trainable_parameters(), config.train.grad_clip
            )
            opt.step()
            model.encoders.ema_update(config.ema.momentum)
            if step % config.train.log_every == 0 or step == config.train.stage1_steps - 1:
                _log_metrics(fh, step, {
                    "latent": losses.latent.item(),
                    "recon": losses.recon.item(),
                    "total": total.item(),
                    "grad_norm": float(grad_norm),
                })
    _write_summary(out, config.train.stage1_steps, time.monotonic() - t0)

    if parameter_hash(model.encoders.backbone) != backbone_hash_before:
        raise NumericError("frozen backbone parameters changed during training")
    return save_checkpoint(
        out / STAGE1_CKPT, model, config,
        extra={"stage": 1, "steps": config.train.stage1_steps,
               "backbone_hash": backbone_hash_before},
    )


def load_stage1(ckpt_path: str | Path) -> tuple[Stage1Model, RunConfig, dict]:
    params, config, extra = load_checkpoint(ckpt_path)
    if extra.get("stage") != 1:
        raise PreconditionError(f"{ckpt_path} is not a Stage-1 checkpoint")
    model = Stage1Model(config, N_TASKS)
    load_into(model, params)
    model.eval()
    return model, config, extra


def freeze(module: torch.nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()


def train_stage2(config: RunConfig, stage1_ckpt: str | Path, out_dir: str | Path) -> Path:
    out, data = _setup_run(config, out_dir)
    stage1, s1_config, _ = load_stage1(stage1_ckpt)
    for key in ("hidden", "tau", "n_tokens_p", "n_tokens_s", "d_visual", "d_lang"):
        if getattr(s1_config.model, key) != getattr(config.model, key):
            raise PreconditionError(f"stage-1 checkpoint model.{key} differs from config")
    freeze(stage1)
    stage1_hash_before = parameter_hash(stage1)

    torch.manual_seed(config.seed + 1)
    normalizer = ActionNormalizer.from_actions(data.actions)
    policy = DiffusionPolicy(config, N_TASKS, normalizer)
    visual = precompute_visual(data, stage1.encoders.backbone)
    sampler = BatchSampler(data, visual, config.model.tau)
    rng = np.random.default_rng(config.seed + 1)
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt = torch.optim.Adam(policy.trainable_parameters(), lr=config.train.stage2_lr)
    scheduler = None
    if config.train.lr_schedule == "cosine":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=config.train.stage2_steps
        )

    t0 = time.monotonic()
    with open(out / METRICS_LOG, "w") as fh:
        for step in range(config.train.stage2_steps):
            batch = sampler.sample_stage2(config.train.batch_size, rng)
            with torch.no_grad():
                fo = stage1.foresight_from_batch(batch)
            o_p, o_s = policy.obs(batch["p_curr"], batch["v_curr"], batch["task_id"])
            cond = policy.make_condition(fo.z_hat_concat, o_p, o_s)
            a0 = normalizer.normalize(batch["a_future"])
            loss = policy.denoise_train_loss(a0, cond, gen)
            _check_finite(loss.item(), step, out, {"denoise": loss.item()})
            opt.zero_grad()
            loss.backward()
            grad_norm = torch.nn.utils.clip_grad_norm_(
                policy.trainable_parameters(), config.train.grad_clip
            )
            opt.step()
            if scheduler is not None:
                scheduler.step()
            if step % config.train.log_every == 0 or step == config.train.stage2_steps - 1:
                _log_metrics(fh, step, {
                    "denoise": loss.item(),
                    "grad_norm": float(grad_norm),
                })
    _write_summary(out, config.train.stage2_steps, time.monotonic() - t0)

    if parameter_hash(stage1) != stage1_hash_before:
        raise NumericError("frozen Stage-1 parameters changed during Stage 2")
    return save_checkpoint(
        out / STAGE2_CKPT, policy, config,
        extra={"stage": 2, "steps": config.train.stage2_steps,
               "stage1_hash": stage1_hash_before},
    )


def load_stage2(ckpt_path: str | Path) -> tuple[DiffusionPolicy, RunConfig, dict]:
    params, config, extra = load_checkpoint(ckpt_path)
    if extra.get("stage") != 2:
        raise PreconditionError(f"{ckpt_path} is not a Stage-2 checkpoint")
    normalizer = ActionNormalizer(torch.zeros(2), torch.ones(2))
    policy = DiffusionPolicy(config, N_TASKS, normalizer)
    load_into(policy, params)
    policy.eval()
    return policy, config, extra
