"""Acceptance gate: one test per release criterion.

Each test name carries its criterion number, so `pytest -v` prints exactly one
pass/fail line per criterion. Criteria 9-11 train desk-scale models and are by
far the slowest part of the suite; they share a dataset and trained
checkpoints through the module-scoped `runs` fixture.

Numerical criteria are checked against independent oracles:
 - analytic gradients vs. central finite differences in float64 (criterion 1);
 - Monte Carlo forward marginals vs. the closed-form Gaussian (criterion 2);
 - the ancestral sampler driven by the analytically optimal noise predictor
   for 1-D Gaussian data, which must reproduce that Gaussian (criterion 3).

For criterion 3 the optimal predictor is eps*(x, k) =
(x - sqrt(abar_k) mu) * sqrt(1 - abar_k) / (s^2 abar_k + 1 - abar_k),
the posterior mean E[eps | x_k] when x_0 ~ N(mu, s^2). The fixed-variance
(sigma^2 = beta-tilde) ancestral sampler reproduces the data distribution only
in the fine-step limit, so this oracle runs at K=1000 with the matching
(1e-4, 0.02) beta endpoints; at the production K=100 schedule the sampler
variance is biased low by design (see the K-scaling note in config.py).
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from clad.config import RunConfig, desk_preset, tiny_preset
from clad.data import BatchSampler, precompute_visual
from clad.eval_diag import (diagnose_representation, evaluate, evaluate_expert)
from clad.models.backbone import parameter_hash
from clad.models.dynamics import draw_masks
from clad.models.foresight import latent_loss, pool_target_tokens, recon_loss
from clad.models.policy import (ActionNormalizer, DiffusionPolicy,
                                build_schedule, forward_noise)
from clad.models.stage1 import Stage1Model
from clad.rollout import PolicyActor, PolicyBundle
from clad.sim.dataset import generate_dataset, load_dataset
from clad.training import load_stage1, load_stage2, train_stage1, train_stage2

torch.set_num_threads(1)

N_TASKS = 3
SEEDS = (0, 1, 2)          # training seeds for the ordering criteria
EPISODES_PER_TASK = (40, 60, 260)  # T2-heavy mix; criterion 11 targets task 2
ACTION_NOISE = 0.3         # exploration noise in the demonstration data
CHUNK_EXECUTE = 3          # receding-horizon replan interval at rollout time
EVAL_EPISODE_LEN = 240


def _tiny_batch(cfg, B, gen, dtype=torch.float64):
    m = cfg.model
    r = lambda *shape: torch.randn(*shape, generator=gen, dtype=dtype)
    return {
        "p_past": r(B, m.d_proprio), "v_past": r(B, m.d_visual),
        "p_curr": r(B, m.d_proprio), "v_curr": r(B, m.d_visual),
        "p_future": r(B, m.d_proprio), "v_future": r(B, m.d_visual),
        "a_seq": r(B, m.tau, 2),
        "task_id": torch.arange(B, dtype=torch.long) % N_TASKS,
    }


# ---------------------------------------------------------------------------
# criterion 1: gradients vs central finite differences (float64, tiny dims)

def _max_rel_err(loss_fn, params, entries_per_tensor=5, h=1e-6, seed=0):
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.data.view(-1)
            n = flat.numel()
            idx = torch.randperm(n, generator=gen)[:entries_per_tensor]
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2 * h)
                an = 0.0 if g is None else g.view(-1)[i].item()
                # entries this small are below central-difference resolution
                # (roundoff ~1e-10 at h=1e-6 in float64)
                if abs(fd) < 1e-5 and abs(an) < 1e-5:
                    continue
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    return worst


def test_criterion_01_gradient_correctness():
    t0 = time.monotonic()
    cfg = tiny_preset()
    gen = torch.Generator().manual_seed(0)

    torch.manual_seed(0)
    model = Stage1Model(cfg, N_TASKS).double()
    batch = _tiny_batch(cfg, 6, gen)
    masks = (draw_masks(6, cfg.model.tau, 0.5, gen),
             draw_masks(6, cfg.model.tau, 0.5, gen))
    s1_params = model.trainable_parameters()
    err_s1 = _max_rel_err(lambda: model.stage1_loss(batch, masks=masks).total,
                          s1_params)

    torch.manual_seed(1)
    norm = ActionNormalizer(torch.full((2,), -1.0), torch.full((2,), 1.0))
    policy = DiffusionPolicy(cfg, N_TASKS, norm).double()
    B = 6
    p = torch.randn(B, cfg.model.d_proprio, generator=gen, dtype=torch.float64)
    v = torch.randn(B, cfg.model.d_visual, generator=gen, dtype=torch.float64)
    task = torch.arange(B) % N_TASKS
    fo = torch.randn(B, 2 * cfg.model.hidden, generator=gen, dtype=torch.float64)
    a0 = torch.randn(B, cfg.model.tau, 2, generator=gen, dtype=torch.float64).clamp(-1, 1)
    k = torch.randint(1, cfg.ddpm.K + 1, (B,), generator=gen)
    eps = torch.randn(B, cfg.model.tau, 2, generator=gen, dtype=torch.float64)

    def pol_loss():
        o_p, o_s = policy.obs(p, v, task)
        cond = policy.make_condition(fo, o_p, o_s)
        return policy.denoise_train_loss(a0, cond, k=k, eps=eps)

    err_pol = _max_rel_err(pol_loss, policy.trainable_parameters())

    elapsed = time.monotonic() - t0
    assert err_s1 < 1e-4, f"stage-1 gradient max rel err {err_s1:.2e}"
    assert err_pol < 1e-4, f"policy gradient max rel err {err_pol:.2e}"
    assert elapsed < 120.0, f"gradient check took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# criterion 2: forward-noising marginal via Monte Carlo

def test_criterion_02_forward_marginal():
    cfg = desk_preset()
    sched = build_schedule(cfg.ddpm.K, cfg.ddpm.beta_start, cfg.ddpm.beta_end)
    gen = torch.Generator().manual_seed(1)
    a0 = 0.5 * torch.randn(1, 6, 2, generator=gen)
    n = 100_000
    for k in (1, cfg.ddpm.K // 2, cfg.ddpm.K):
        eps = torch.randn(n, 6, 2, generator=gen)
        a_k = forward_noise(a0.expand(n, -1, -1), k, eps, sched).double()
        abar = float(sched.alpha_bars[k - 1])
        mean_true = math.sqrt(abar) * a0.double()
        var_true = 1.0 - abar
        se_mean = math.sqrt(var_true / n)
        se_var = var_true * math.sqrt(2.0 / (n - 1))
        mean_err = (a_k.mean(dim=0) - mean_true).abs().max().item()
        var_err = (a_k.var(dim=0) - var_true).abs().max().item()
        assert mean_err <= 3 * se_mean, f"k={k}: mean off by {mean_err / se_mean:.1f} SE"
        assert var_err <= 3 * se_var, f"k={k}: var off by {var_err / se_var:.1f} SE"


# ---------------------------------------------------------------------------
# criterion 3: ancestral sampler with the analytic optimal noise predictor

class _GaussianOracle(torch.nn.Module):
    """E[eps | x_k] for x_0 ~ N(mu, s^2); ignores the conditioning vector."""

    def __init__(self, schedule, mu, s):
        super().__init__()
        self.register_buffer("abars", schedule.alpha_bars)
        self.mu, self.s = mu, s

    def forward(self, x, k, cond=None):
        ab = self.abars[k - 1].to(x.dtype)
        while ab.dim() < x.dim():
            ab = ab.unsqueeze(-1)
        return ((x - torch.sqrt(ab) * self.mu) * torch.sqrt(1.0 - ab)
                / (self.s ** 2 * ab + 1.0 - ab))


def test_criterion_03_sampler_oracle():
    t0 = time.monotonic()
    mu, s = 0.2, 0.5
    cfg = tiny_preset()
    cfg.ddpm.K = 1000
    cfg.ddpm.beta_start = 1e-4
    cfg.ddpm.beta_end = 0.02
    norm = ActionNormalizer(torch.full((2,), -1.0), torch.full((2,), 1.0))
    policy = DiffusionPolicy(cfg, N_TASKS, norm)
    policy.denoiser = _GaussianOracle(policy.schedule, mu, s)

    gen = torch.Generator().manual_seed(2)
    per_call = 25_000 // (cfg.model.tau * 2) + 1
    cond = torch.zeros(per_call, 4 * cfg.model.hidden)
    draws = torch.cat([policy.sample_actions(cond, generator=gen).reshape(-1)
                       for _ in range(4)]).double()
    assert draws.numel() >= 100_000
    mean_rel = abs(draws.mean().item() - mu) / abs(mu)
    var_rel = abs(draws.var().item() - s * s) / (s * s)
    elapsed = time.monotonic() - t0
    assert mean_rel < 0.03, f"sampled mean off by {mean_rel: .2%}"
    assert var_rel < 0.03, f"sampled variance off by {var_rel: .2%}"
    assert elapsed < 300.0, f"sampler oracle took {elapsed:.0f}s"


# ---------------------------------------------------------------------------
# criterion 4: EMA target update exactness and gradient isolation

def test_criterion_04_ema_exactness():
    cfg = tiny_preset()
    gen = torch.Generator().manual_seed(3)
    model = Stage1Model(cfg, N_TASKS)
    enc = model.encoders
    with torch.no_grad():
        for p in enc.online.parameters():
            p.add_(torch.randn(p.shape, generator=gen) * 0.1)

    online = {n: p.detach().clone() for n, p in enc.online.named_parameters()}
    target = {n: p.detach().clone() for n, p in enc.target.named_parameters()}

    m = 0.7
    enc.ema_update(m)
    for n, p in enc.target.named_parameters():
        expect = target[n].mul(m).add(online[n], alpha=1.0 - m)
        assert torch.equal(p, expect), f"EMA mismatch in {n}"

    frozen = {n: p.detach().clone() for n, p in enc.target.named_parameters()}
    enc.ema_update(1.0)
    for n, p in enc.target.named_parameters():
        assert torch.equal(p, frozen[n]), f"m=1 moved target {n}"
    enc.ema_update(0.0)
    for n, p in enc.target.named_parameters():
        online_now = dict(enc.online.named_parameters())[n]
        assert torch.equal(p, online_now), f"m=0 did not copy online {n}"

    batch = _tiny_batch(cfg, 4, gen, dtype=torch.float32)
    losses = model.stage1_loss(batch, gen)
    losses.total.backward()
    for n, p in enc.target.named_parameters():
        assert not p.requires_grad and p.grad is None, f"target {n} gets gradients"


# ---------------------------------------------------------------------------
# criterion 5: full-mask action invariance / unmasked sensitivity

def test_criterion_05_full_mask_action_invariance():
    cfg = tiny_preset()
    gen = torch.Generator().manual_seed(4)
    model = Stage1Model(cfg, N_TASKS)

    opt = torch.optim.Adam(model.trainable_parameters(), lr=1e-3)
    for _ in range(30):
        batch = _tiny_batch(cfg, 8, gen, dtype=torch.float32)
        loss = model.stage1_loss(batch, gen, mask_ratio=0.3).total
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()

    batch = _tiny_batch(cfg, 8, gen, dtype=torch.float32)
    perturbed = {**batch, "a_seq": batch["a_seq"] + torch.randn(
        batch["a_seq"].shape, generator=gen)}
    B, tau = 8, cfg.model.tau
    ones = torch.ones(B, tau, dtype=torch.bool)
    zeros = torch.zeros(B, tau, dtype=torch.bool)

    with torch.no_grad():
        z_full_a, _ = model.clad_forward(batch, masks=(ones, ones))
        z_full_b, _ = model.clad_forward(perturbed, masks=(ones, ones))
        z_none_a, _ = model.clad_forward(batch, masks=(zeros, zeros))
        z_none_b, _ = model.clad_forward(perturbed, masks=(zeros, zeros))

    assert torch.equal(z_full_a, z_full_b), "r=1 output depends on actions"
    assert not torch.allclose(z_none_a, z_none_b), "r=0 output ignores actions"


# ---------------------------------------------------------------------------
# criterion 6: target normalization and loss decomposition

def test_criterion_06_loss_normalization():
    cfg = tiny_preset()
    gen = torch.Generator().manual_seed(5)
    model = Stage1Model(cfg, N_TASKS).double()
    batch = _tiny_batch(cfg, 16, gen)
    losses = model.stage1_loss(batch, gen, mask_ratio=0.3)

    assert losses.lambda_recon == 0.1
    recomputed = losses.latent + 0.1 * losses.recon
    assert torch.allclose(losses.total, recomputed, rtol=0, atol=1e-12)

    # the normalized targets actually consumed by the latent loss
    from clad.models.foresight import normalize_target
    for z_bar in (losses.z_bar_p, losses.z_bar_s):
        norms = normalize_target(z_bar).norm(dim=-1)
        assert (norms - 1.0).abs().max().item() < 1e-6

    # independent recomputation of both terms from the returned pieces
    l_lat = latent_loss(losses.fo, losses.z_bar_p, losses.z_bar_s,
                        normalize_predictions=cfg.loss.normalize_predictions)
    l_rec = recon_loss(model.foresight, losses.fo,
                       batch["p_future"], batch["v_future"])
    assert torch.allclose(losses.latent, l_lat, atol=1e-12)
    assert torch.allclose(losses.recon, l_rec, atol=1e-12)


# ---------------------------------------------------------------------------
# criterion 7: FiLM identity at initialization (both conditioning paths)

def test_criterion_07_film_identity_at_init():
    cfg = tiny_preset()
    gen = torch.Generator().manual_seed(6)

    # policy path: zero-init generators pass the foresight vector through
    norm = ActionNormalizer(torch.full((2,), -1.0), torch.full((2,), 1.0))
    policy = DiffusionPolicy(cfg, N_TASKS, norm)
    B = 5
    fo = torch.randn(B, 2 * cfg.model.hidden, generator=gen)
    o_p = torch.randn(B, cfg.policy.obs_width, generator=gen)
    o_s = torch.randn(B, cfg.policy.obs_width, generator=gen)
    cond = policy.make_condition(fo, o_p, o_s)
    assert torch.equal(cond, torch.cat([fo, fo], dim=-1))

    # semantic-fusion path: output is the unmodulated visual projection,
    # independent of the language embedding
    model = Stage1Model(cfg, N_TASKS)
    film = model.encoders.online["film"]
    v = torch.randn(B, cfg.model.d_visual, generator=gen)
    l1 = torch.randn(B, cfg.model.d_lang, generator=gen)
    l2 = torch.randn(B, cfg.model.d_lang, generator=gen)
    assert torch.equal(film(v, l1), film.proj(v))
    assert torch.equal(film(v, l1), film(v, l2))


# ---------------------------------------------------------------------------
# shared small dataset for the freeze/determinism criteria

@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    # short reach-only episodes: the push tasks need longer horizons than the
    # quick determinism/freeze checks can afford
    root = tmp_path_factory.mktemp("small_ds") / "data"
    generate_dataset(root, [0], episodes_per_task=4, seed=0, episode_len=24)
    return root


def _small_cfg(ds, seed=0):
    cfg = tiny_preset()
    cfg.seed = seed
    cfg.dataset = str(ds)
    cfg.env.episode_len = 24
    cfg.train.stage1_steps = 40
    cfg.train.stage2_steps = 30
    cfg.train.batch_size = 16
    cfg.train.log_every = 10
    return cfg


# criterion 8: freeze contracts -------------------------------------------

def test_criterion_08_freeze_contracts(small_ds, tmp_path):
    cfg = _small_cfg(small_ds)
    ck1 = train_stage1(cfg, tmp_path / "s1")
    model, _, extra1 = load_stage1(ck1)
    assert parameter_hash(model.encoders.backbone) == extra1["backbone_hash"], \
        "backbone hash changed across stage-1 training"

    stage1_hash = parameter_hash(model)
    ck2 = train_stage2(cfg, ck1, tmp_path / "s2")
    _, _, extra2 = load_stage2(ck2)
    assert extra2["stage1_hash"] == stage1_hash, \
        "stage-1 parameters changed during stage-2 training"


# ---------------------------------------------------------------------------
# heavy desk-scale runs shared by criteria 9, 10 and 11

class _RunCache:
    def __init__(self, root: Path, dataset: Path):
        self.root = root
        self.dataset = dataset
        self._stage1 = {}
        self._stage2 = {}

    def _cfg(self, seed: int) -> RunConfig:
        cfg = desk_preset()
        cfg.seed = seed
        cfg.dataset = str(self.dataset)
        cfg.policy.chunk_execute = CHUNK_EXECUTE
        return cfg

    def stage1(self, seed: int, with_recon: bool = True) -> Path:
        key = (seed, with_recon)
        if key not in self._stage1:
            cfg = self._cfg(seed)
            if not with_recon:
                cfg.loss.lambda_recon = 0.0
            tag = f"s1_seed{seed}_{'rec' if with_recon else 'norec'}"
            self._stage1[key] = train_stage1(cfg, self.root / tag)
        return self._stage1[key]

    def stage2(self, seed: int, no_foresight: bool) -> Path:
        key = (seed, no_foresight)
        if key not in self._stage2:
            cfg = self._cfg(seed)
            cfg.policy.no_foresight = no_foresight
            tag = f"s2_seed{seed}_{'nofs' if no_foresight else 'full'}"
            self._stage2[key] = train_stage2(cfg, self.stage1(seed),
                                             self.root / tag)
        return self._stage2[key]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_runs")
    ds = root / "dataset"
    generate_dataset(ds, [0, 1, 2], episodes_per_task=list(EPISODES_PER_TASK),
                     seed=0, action_noise=ACTION_NOISE)
    return _RunCache(root, ds)


def _mean_pairwise_cosine(x: torch.Tensor) -> float:
    u = torch.nn.functional.normalize(x, dim=-1)
    sim = u @ u.T
    n = sim.shape[0]
    return float((sim.sum() - n) / (n * (n - 1)))


# criterion 9: anti-collapse after desk-scale stage-1 training -------------

def test_criterion_09_stage1_anti_collapse(runs):
    ckpt = runs.stage1(0)
    rows = [json.loads(l) for l in
            (ckpt.parent / "metrics.jsonl").read_text().splitlines()]
    assert rows[-1]["latent"] <= 0.5 * rows[0]["latent"], \
        f"latent loss {rows[-1]['latent']:.4f} vs step-0 {rows[0]['latent']:.4f}"

    model, cfg, _ = load_stage1(ckpt)
    data = load_dataset(runs.dataset)
    visual = precompute_visual(data, model.encoders.backbone)
    sampler = BatchSampler(data, visual, cfg.model.tau)
    batch = sampler.sample_stage1(256, np.random.default_rng(0))
    with torch.no_grad():
        losses = model.stage1_loss(batch, mask_ratio=0.0)
    for name, z_bar in (("proprio", losses.z_bar_p), ("semantic", losses.z_bar_s)):
        std_min = z_bar.std(dim=0).min().item()
        assert std_min > 1e-3, f"{name} target per-dim std {std_min:.2e}"
    cos = _mean_pairwise_cosine(losses.fo.z_hat_s)
    assert cos < 0.99, f"mean pairwise cosine of predicted semantics {cos:.4f}"


# criterion 10: reconstruction loss improves task grounding ----------------

def test_criterion_10_recon_grounding_ordering(runs):
    data = load_dataset(runs.dataset)
    wins = 0
    scores = []
    for seed in SEEDS:
        with_r, _, _ = load_stage1(runs.stage1(seed, with_recon=True))
        without_r, _, _ = load_stage1(runs.stage1(seed, with_recon=False))
        s_with = diagnose_representation(with_r, data, n_per_task=128,
                                         seed=seed)["silhouette"]
        s_without = diagnose_representation(without_r, data, n_per_task=128,
                                            seed=seed)["silhouette"]
        scores.append((seed, s_with, s_without))
        wins += int(s_with is not None and s_without is not None
                    and s_with >= s_without)
    assert wins * 2 > len(SEEDS), \
        f"silhouette with-recon >= without-recon in only {wins}/{len(SEEDS)}: {scores}"


# criterion 11: foresight conditioning helps on the sequential-push task ---

def test_criterion_11_foresight_ordering(runs):
    t0 = time.monotonic()
    task = 2
    rates = {False: [], True: []}
    for seed in SEEDS:
        s1, _, _ = load_stage1(runs.stage1(seed))
        for no_fs in (False, True):
            policy, cfg, _ = load_stage2(runs.stage2(seed, no_fs))
            actor = PolicyActor(PolicyBundle(s1, policy, cfg))
            report = evaluate(actor, task, n_rollouts=50, seed=1000 + seed,
                              episode_len=EVAL_EPISODE_LEN)
            rates[no_fs].append(report.success_rate)
    full = float(np.mean(rates[False]))
    nofs = float(np.mean(rates[True]))
    elapsed = time.monotonic() - t0
    assert full >= nofs, f"full {full:.2f} < no-foresight {nofs:.2f} ({rates})"
    assert full > 0.40, f"full-policy success {full:.2f} below sanity floor"
    assert nofs > 0.40, f"no-foresight success {nofs:.2f} below sanity floor"
    assert elapsed < 7200.0, f"foresight ordering took {elapsed:.0f}s"


# criterion 12: the harness itself, validated with the scripted expert -----

def test_criterion_12_expert_through_harness():
    for task in (0, 1, 2):
        report = evaluate_expert(task, n_rollouts=20, seed=7)
        assert report.success_rate >= 0.95, \
            f"expert scores {report.success_rate:.2f} on task {task}"


# criterion 13: bytewise determinism ----------------------------------------

def _dataset_bytes(root: Path) -> dict:
    out = {"manifest": (root / "manifest.json").read_bytes()}
    for f in sorted(root.glob("*.bin")):
        out[f.name] = f.read_bytes()
    return out


def test_criterion_13_determinism(small_ds, tmp_path):
    ds_a, ds_b = tmp_path / "ds_a", tmp_path / "ds_b"
    for d in (ds_a, ds_b):
        generate_dataset(d, [0, 1], episodes_per_task=1, seed=3,
                         action_noise=0.25)
    assert _dataset_bytes(ds_a) == _dataset_bytes(ds_b), "gen-data not reproducible"

    outputs = []
    for run in ("a", "b"):
        cfg = _small_cfg(small_ds, seed=5)
        ck1 = train_stage1(cfg, tmp_path / f"s1_{run}")
        ck2 = train_stage2(cfg, ck1, tmp_path / f"s2_{run}")
        outputs.append({
            "s1_metrics": (ck1.parent / "metrics.jsonl").read_bytes(),
            "s1_ckpt": ck1.read_bytes(),
            "s2_metrics": (ck2.parent / "metrics.jsonl").read_bytes(),
            "s2_ckpt": ck2.read_bytes(),
        })
    for key in outputs[0]:
        assert outputs[0][key] == outputs[1][key], f"{key} differs between runs"
