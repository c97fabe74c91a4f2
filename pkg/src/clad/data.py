"""Batch sampling for the two training stages.

Visual embeddings of the frozen backbone are precomputed once per dataset
(the backbone never changes), so training batches index into a cached
(E, T, D_v) array instead of re-running the conv net.
"""

from __future__ import annotations

import numpy as np
import torch

from .models.backbone import FrozenVisualBackbone, parameter_hash
from .sim.dataset import Dataset


def valid_t_values(episode_len: int, tau: int) -> np.ndarray:
    """Indices t with a full past window, future state, and action window:
    tau <= t <= T - tau - 1."""
    return np.arange(tau, episode_len - tau)


def precompute_visual(data: Dataset, backbone: FrozenVisualBackbone,
                      batch: int = 512) -> np.ndarray:
    E, T = data.images.shape[:2]
    cache = None
    if data.path is not None:
        key = parameter_hash(backbone)[:12]
        cache = data.path / f".visual_{key}_{backbone.d_visual}.npy"
        if cache.exists():
            cached = np.load(cache)
            if cached.shape == (E, T, backbone.d_visual):
                return cached
    flat = torch.from_numpy(data.images.reshape(E * T, *data.images.shape[2:]))
    out = np.zeros((E * T, backbone.d_visual), dtype=np.float32)
    with torch.no_grad():
        for i in range(0, E * T, batch):
            out[i:i + batch] = backbone(flat[i:i + batch]).numpy()
    out = out.reshape(E, T, -1)
    if cache is not None:
        try:
            np.save(cache, out)
        except OSError:
            pass  # read-only dataset directory; recompute next time
    return out


class BatchSampler:
    def __init__(self, data: Dataset, visual: np.ndarray, tau: int,
                 dtype: torch.dtype = torch.float32):
        self.data = data
        self.visual = visual
        self.tau = tau
        self.dtype = dtype
        self.t_values = valid_t_values(data.episode_len, tau)
        if len(self.t_values) == 0:
            raise ValueError("episode too short for the configured tau")

    def _draw_indices(self, batch_size: int, rng: np.random.Generator):
        e = rng.integers(0, self.data.n_episodes, size=batch_size)
        t = rng.choice(self.t_values, size=batch_size)
        return e, t

    def _stage1_fields(self, e, t) -> dict:
        d, v = self.data, self.visual
        tau = self.tau
        f = lambda arr: torch.as_tensor(arr, dtype=self.dtype)
        a_seq = np.stack([d.actions[ei, ti - tau:ti] for ei, ti in zip(e, t)])
        return {
            "p_past": f(d.proprio[e, t - tau]),
            "v_past": f(v[e, t - tau]),
            "p_curr": f(d.proprio[e, t]),
            "v_curr": f(v[e, t]),
            "p_future": f(d.proprio[e, t + tau]),
            "v_future": f(v[e, t + tau]),
            "a_seq": f(a_seq),
            "task_id": torch.as_tensor(d.task_ids[e], dtype=torch.long),
            "episode": torch.as_tensor(e, dtype=torch.long),
            "t": torch.as_tensor(t, dtype=torch.long),
        }

    def sample_stage1(self, batch_size: int, rng: np.random.Generator) -> dict:
        e, t = self._draw_indices(batch_size, rng)
        return self._stage1_fields(e, t)

    def sample_stage2(self, batch_size: int, rng: np.random.Generator) -> dict:
        """Stage-1 inputs plus the ground-truth future action chunk a^{t:t+tau}."""
        e, t = self._draw_indices(batch_size, rng)
        fields = self._stage1_fields(e, t)
        a_future = np.stack(
            [self.data.actions[ei, ti:ti + self.tau] for ei, ti in zip(e, t)]
        )
        fields["a_future"] = torch.as_tensor(a_future, dtype=self.dtype)
        return fields
