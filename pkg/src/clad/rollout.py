"""Closed-loop execution: receding-horizon action chunks from the trained
policy, with the tau-lagged observation buffer the foresight model needs.

At episode start (t < tau) the past state is padded with the initial state and
the executed-action window with zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .config import RunConfig
from .models.policy import DiffusionPolicy
from .models.stage1 import Stage1Model
from .sim import env, tasks
from .sim.expert import scripted_expert


@dataclass
class PolicyBundle:
    stage1: Stage1Model
    policy: DiffusionPolicy
    config: RunConfig


class ExpertActor:
    """Scripted expert behind the same actor interface as the policy."""

    def __init__(self, a_max: float = 2.0):
        self.a_max = a_max

    def begin_episode(self, seed: int) -> None:
        pass

    def act(self, world: env.WorldState, t: int) -> np.ndarray:
        return scripted_expert(world, self.a_max)


class PolicyActor:
    """Samples a chunk every `chunk_execute` steps and replays it in between."""

    def __init__(self, bundle: PolicyBundle):
        self.bundle = bundle
        self.cfg = bundle.config
        self._gen = torch.Generator()

    def begin_episode(self, seed: int) -> None:
        self._gen.manual_seed(seed)
        self._states_p: list[np.ndarray] = []
        self._states_v: list[torch.Tensor] = []
        self._actions: list[np.ndarray] = []
        self._chunk: np.ndarray | None = None
        self._chunk_pos = 0

    @torch.no_grad()
    def _plan(self, t: int, p_t: np.ndarray, v_t: torch.Tensor, task_id: int) -> np.ndarray:
        cfg = self.cfg
        tau = cfg.model.tau
        past_i = max(0, t - tau)
        p_past = self._states_p[past_i] if self._states_p else p_t
        v_past = self._states_v[past_i] if self._states_v else v_t
        recent = self._actions[max(0, t - tau):t]
        a_seq = np.zeros((tau, 2), dtype=np.float32)
        if recent:
            a_seq[tau - len(recent):] = np.stack(recent)
        f = lambda x: torch.as_tensor(np.asarray(x, dtype=np.float32)).unsqueeze(0)
        batch = {
            "p_past": f(p_past), "v_past": v_past.unsqueeze(0),
            "p_curr": f(p_t), "v_curr": v_t.unsqueeze(0),
            "a_seq": f(a_seq),
            "task_id": torch.tensor([task_id], dtype=torch.long),
        }
        fo = self.bundle.stage1.foresight_from_batch(batch)
        o_p, o_s = self.bundle.policy.obs(batch["p_curr"], batch["v_curr"], batch["task_id"])
        cond = self.bundle.policy.make_condition(fo.z_hat_concat, o_p, o_s)
        chunk = self.bundle.policy.sample_actions(cond, self._gen,
                                                  sample_K=cfg.eval.sample_K)
        return chunk[0].numpy()

    def act(self, world: env.WorldState, t: int) -> np.ndarray:
        p_t = world.arm.proprio.astype(np.float32)
        with torch.no_grad():
            v_t = self.bundle.stage1.encoders.embed_visual(
                torch.as_tensor(env.render(world)).unsqueeze(0)
            ).squeeze(0)
        self._states_p.append(p_t)
        self._states_v.append(v_t)
        if self._chunk is None or self._chunk_pos >= self.cfg.policy.chunk_execute:
            self._chunk = self._plan(t, p_t, v_t, world.task_id)
            self._chunk_pos = 0
        a = self._chunk[self._chunk_pos]
        self._chunk_pos += 1
        self._actions.append(a)
        return a


def rollout_episode(actor, task_id: int, seed: int, episode_len: int = 120,
                    dt: float = 0.05, a_max: float = 2.0) -> dict:
    """One closed-loop episode; returns success and steps-to-success."""
    rng = np.random.default_rng(seed)
    world = tasks.initial_world(task_id, rng)
    actor.begin_episode(seed)
    for t in range(episode_len):
        a = actor.act(world, t)
        world = env.step(world, a, dt, a_max)
        if tasks.success(world):
            return {"task_id": task_id, "seed": seed, "success": True, "steps": t + 1}
    return {"task_id": task_id, "seed": seed, "success": False, "steps": episode_len}
