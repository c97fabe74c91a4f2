"""Evaluation harness, ablation grid, and representation diagnostics.

Replaces qualitative embedding plots with quantitative collapse/grounding
metrics: per-dimension target variance, intra- vs inter-task cosine
similarity of the dynamics code, and a task-label silhouette score with a
2-D PCA scatter.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .data import BatchSampler, precompute_visual
from .models.foresight import pool_target_tokens
from .models.stage1 import Stage1Model
from .rollout import ExpertActor, PolicyActor, PolicyBundle, rollout_episode
from .sim.dataset import Dataset
from .training import (STAGE1_CKPT, STAGE2_CKPT, load_stage1, load_stage2,
                       train_stage1, train_stage2)


@dataclass
class RolloutReport:
    task_id: int
    n_rollouts: int
    successes: int
    success_rate: float
    mean_steps_to_success: float | None
    seed: int


def evaluate(actor, task_id: int, n_rollouts: int, seed: int,
             episode_len: int = 120, dt: float = 0.05, a_max: float = 2.0,
             records_path: str | Path | None = None) -> RolloutReport:
    """n_rollouts independent episodes with seeds seed+i."""
    records = [
        rollout_episode(actor, task_id, seed + i, episode_len, dt, a_max)
        for i in range(n_rollouts)
    ]
    if records_path is not None:
        with open(records_path, "w") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    successes = sum(r["success"] for r in records)
    steps = [r["steps"] for r in records if r["success"]]
    return RolloutReport(
        task_id=task_id,
        n_rollouts=n_rollouts,
        successes=successes,
        success_rate=successes / n_rollouts,
        mean_steps_to_success=float(np.mean(steps)) if steps else None,
        seed=seed,
    )


def evaluate_expert(task_id: int, n_rollouts: int, seed: int, **kwargs) -> RolloutReport:
    return evaluate(ExpertActor(kwargs.get("a_max", 2.0)), task_id, n_rollouts, seed, **kwargs)


# ---------------------------------------------------------------------------
# representation diagnostics

def _embed_dataset(model: Stage1Model, data: Dataset, n_per_task: int,
                   seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """z_dyn and pooled targets over sampled windows, with task labels."""
    visual = precompute_visual(data, model.encoders.backbone)
    sampler = BatchSampler(data, visual, model.tau)
    rng = np.random.default_rng(seed)
    z_dyn_all, zbar_p_all, zbar_s_all, labels = [], [], [], []
    for tid in sorted(set(data.task_ids.tolist())):
        eps = np.flatnonzero(data.task_ids == tid)
        e = rng.choice(eps, size=n_per_task)
        t = rng.choice(sampler.t_values, size=n_per_task)
        batch = sampler._stage1_fields(e, t)
        with torch.no_grad():
            z_dyn, _ = model.clad_forward(batch, mask_ratio=0.0)
            tok_p, tok_s = model.encoders.encode_target(
                batch["p_future"], batch["v_future"], batch["task_id"]
            )
        z_dyn_all.append(z_dyn.numpy())
        zbar_p_all.append(pool_target_tokens(tok_p).numpy())
        zbar_s_all.append(pool_target_tokens(tok_s).numpy())
        labels.append(np.full(n_per_task, tid))
    return (np.concatenate(z_dyn_all), np.concatenate(zbar_p_all),
            np.concatenate(zbar_s_all), np.concatenate(labels))


def _mean_cosine(x: np.ndarray) -> np.ndarray:
    n = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    return n @ n.T


def diagnose_representation(model: Stage1Model, data: Dataset, n_per_task: int = 256,
                            seed: int = 0, out_dir: str | Path | None = None) -> dict:
    from sklearn.metrics import silhouette_score

    z_dyn, zbar_p, zbar_s, labels = _embed_dataset(model, data, n_per_task, seed)
    report: dict = {
        "n_samples": int(z_dyn.shape[0]),
        "zbar_p_dim_std_min": float(zbar_p.std(axis=0).min()),
        "zbar_s_dim_std_min": float(zbar_s.std(axis=0).min()),
        "zbar_p_dim_std_mean": float(zbar_p.std(axis=0).mean()),
        "zbar_s_dim_std_mean": float(zbar_s.std(axis=0).mean()),
    }

    cos = _mean_cosine(z_dyn)
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    report["intra_task_cosine"] = float(cos[same & off_diag].mean())
    report["inter_task_cosine"] = float(cos[~same].mean()) if (~same).any() else None

    if len(set(labels.tolist())) < 2 or np.allclose(z_dyn.std(axis=0), 0.0):
        report["silhouette"] = None
        report["collapse_alarm"] = True
    else:
        report["silhouette"] = float(silhouette_score(z_dyn, labels))
        report["collapse_alarm"] = bool(report["zbar_s_dim_std_mean"] < 1e-3)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _pca_scatter(z_dyn, labels, out / "z_dyn_pca.png")
        (out / "diagnostics.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def _pca_scatter(x: np.ndarray, labels: np.ndarray, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:2].T
    fig, ax = plt.subplots(figsize=(5, 4))
    for tid in sorted(set(labels.tolist())):
        m = labels == tid
        ax.scatter(proj[m, 0], proj[m, 1], s=6, label=f"task {tid}")
    ax.legend()
    ax.set_title("dynamics code, 2-D PCA")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# ablation grid

ABLATION_VARIANTS: dict[str, dict] = {
    "full_clad": {},
    "policy_only": {"policy.no_foresight": True},
    "proprio_foresight_only": {"policy.condition_mode": "proprio_only"},
    "semantic_foresight_only": {"policy.condition_mode": "semantic_only"},
    "no_recon_loss": {"loss.lambda_recon": 0.0},
    "s_queries_p": {"model.attention_direction": "s_queries_p"},
    "symmetric_self_attention": {"model.attention_direction": "symmetric_self"},
    "mask_r_0.3": {"mask.ratio": 0.3},
    "mask_r_0.9": {"mask.ratio": 0.9},
    "action_free": {"mask.ratio": 1.0},
    "curriculum": {"mask.ratio": 0.3, "mask.curriculum": [[0, 1.0], [1000, 0.3]]},
}


def run_ablations(base_config: RunConfig, out_root: str | Path,
                  task_ids: list[int] | None = None,
                  variants: dict[str, dict] | None = None) -> dict:
    """Train and evaluate every variant; failures are recorded, the grid
    continues. Returns {variant: {report|error, params, delta}}."""
    out_root = Path(out_root)
    variants = ABLATION_VARIANTS if variants is None else variants
    task_ids = task_ids if task_ids is not None else [2]
    grid: dict[str, dict] = {}
    for name, delta in variants.items():
        vdir = out_root / name
        try:
            cfg = base_config.with_overrides(delta)
            s1 = train_stage1(cfg, vdir / "stage1")
            s2 = train_stage2(cfg, s1, vdir / "stage2")
            stage1, _, _ = load_stage1(s1)
            policy, _, _ = load_stage2(s2)
            bundle = PolicyBundle(stage1=stage1, policy=policy, config=cfg)
            n_params = sum(p.numel() for p in stage1.parameters())
            n_params += sum(p.numel() for p in policy.parameters())
            reports = {
                tid: asdict(evaluate(
                    PolicyActor(bundle), tid, cfg.eval.n_rollouts, cfg.seed,
                    episode_len=cfg.env.episode_len, dt=cfg.env.dt, a_max=cfg.env.a_max,
                    records_path=vdir / f"rollouts_task{tid}.jsonl",
                ))
                for tid in task_ids
            }
            grid[name] = {"delta": delta, "params": n_params, "reports": reports}
        except Exception as exc:  # keep the grid going
            grid[name] = {"delta": delta, "error": f"{type(exc).__name__}: {exc}"}
    (out_root / "ablation_grid.json").write_text(json.dumps(grid, indent=2) + "\n")
    (out_root / "ablation_table.txt").write_text(render_ablation_table(grid))
    return grid


def render_ablation_table(grid: dict) -> str:
    lines = [f"{'variant':<28} {'params':>10} {'success rates':<30}", "-" * 70]
    for name, row in grid.items():
        if "error" in row:
            lines.append(f"{name:<28} {'-':>10} ERROR: {row['error']}")
            continue
        srs = ", ".join(
            f"T{tid}: {rep['success_rate']:.2f}" for tid, rep in row["reports"].items()
        )
        lines.append(f"{name:<28} {row['params']:>10} {srs:<30}")
    return "\n".join(lines) + "\n"
