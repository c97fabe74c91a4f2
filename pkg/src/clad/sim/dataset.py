"""Demonstration dataset generation and the on-disk episode format.

Layout: ``manifest.json`` plus one binary file per episode. Each episode file
is a flat little-endian float32 stream of (proprio[6], image[4096], action[2])
per step, T_ep steps, followed by a single success byte. Per-episode seeds are
``seed + episode_index`` so episodes are independent and order-reproducible.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import env, tasks
from .expert import UnreachableWaypointError, scripted_expert

FORMAT_VERSION = 1
D_PROPRIO = 6
D_ACTION = 2
IMAGE_PIXELS = env.IMAGE_SIZE * env.IMAGE_SIZE
STEP_FLOATS = D_PROPRIO + IMAGE_PIXELS + D_ACTION

MIN_EXPERT_SUCCESS = 0.95


class DatasetError(RuntimeError):
    pass


@dataclass
class EpisodeRecord:
    task_id: int
    proprio: np.ndarray  # (T, 6) float32
    images: np.ndarray   # (T, 64, 64) float32 in [0, 1]
    actions: np.ndarray  # (T, 2) float32
    success: bool
    seed: int


def run_episode(task_id: int, seed: int, episode_len: int, dt: float, a_max: float,
                policy=None, action_noise: float = 0.0) -> EpisodeRecord:
    """Roll one episode under `policy` (default: scripted expert).

    With ``action_noise > 0`` the executed (and recorded) action is the expert
    action plus clipped Gaussian noise; the perturbed rollouts cover states off
    the expert trajectory with corrective labels at every visited state. If a
    perturbation strands the expert without a reachable waypoint, the episode
    holds still for that step instead of aborting.
    """
    rng = np.random.default_rng(seed)
    world = tasks.initial_world(task_id, rng)
    proprio = np.zeros((episode_len, D_PROPRIO), dtype=np.float32)
    images = np.zeros((episode_len, env.IMAGE_SIZE, env.IMAGE_SIZE), dtype=np.float32)
    actions = np.zeros((episode_len, D_ACTION), dtype=np.float32)
    succeeded = False
    for t in range(episode_len):
        proprio[t] = world.arm.proprio
        images[t] = env.render(world)
        if policy is not None:
            a = policy(world, t)
        elif action_noise > 0.0:
            try:
                a = scripted_expert(world, a_max)
            except UnreachableWaypointError:
                a = np.zeros(D_ACTION)
            a = np.clip(a + rng.normal(0.0, action_noise, size=D_ACTION),
                        -a_max, a_max)
        else:
            a = scripted_expert(world, a_max)
        actions[t] = a
        world = env.step(world, a, dt, a_max)
        succeeded = succeeded or tasks.success(world)
    return EpisodeRecord(task_id, proprio, images, actions, succeeded, seed)


def _episode_bytes(ep: EpisodeRecord) -> bytes:
    T = ep.proprio.shape[0]
    flat = np.concatenate(
        [
            ep.proprio.astype("<f4"),
            ep.images.reshape(T, IMAGE_PIXELS).astype("<f4"),
            ep.actions.astype("<f4"),
        ],
        axis=1,
    )
    return flat.tobytes() + bytes([1 if ep.success else 0])


def _decode_episode(raw: bytes, episode_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, bool]:
    expected = episode_len * STEP_FLOATS * 4 + 1
    if len(raw) != expected:
        raise DatasetError(f"episode file has {len(raw)} bytes, expected {expected}")
    flat = np.frombuffer(raw[:-1], dtype="<f4").reshape(episode_len, STEP_FLOATS)
    proprio = flat[:, :D_PROPRIO].copy()
    images = flat[:, D_PROPRIO:D_PROPRIO + IMAGE_PIXELS].reshape(
        episode_len, env.IMAGE_SIZE, env.IMAGE_SIZE
    ).copy()
    actions = flat[:, D_PROPRIO + IMAGE_PIXELS:].copy()
    return proprio, images, actions, raw[-1] == 1


def generate_dataset(out_dir: str | Path, task_ids: list[int],
                     episodes_per_task: int | Sequence[int],
                     seed: int, episode_len: int = 120, dt: float = 0.05,
                     a_max: float = 2.0, action_noise: float = 0.0,
                     force: bool = False) -> Path:
    if isinstance(episodes_per_task, int):
        counts = [episodes_per_task] * len(task_ids)
    else:
        counts = list(episodes_per_task)
        if len(counts) != len(task_ids):
            raise DatasetError("episodes_per_task list must match task_ids length")
    out = Path(out_dir)
    if out.exists():
        if not force:
            raise DatasetError(f"refusing to overwrite existing dataset at {out} (use force)")
        shutil.rmtree(out)
    out.mkdir(parents=True)

    entries = []
    successes_per_task = {tid: 0 for tid in task_ids}
    index = 0
    for tid, n_eps in zip(task_ids, counts):
        for _ in range(n_eps):
            ep = run_episode(tid, seed + index, episode_len, dt, a_max,
                             action_noise=action_noise)
            raw = _episode_bytes(ep)
            fname = f"episode_{index:05d}.bin"
            (out / fname).write_bytes(raw)
            entries.append(
                {
                    "file": fname,
                    "task_id": tid,
                    "seed": ep.seed,
                    "success": ep.success,
                    "sha256": hashlib.sha256(raw).hexdigest(),
                }
            )
            successes_per_task[tid] += int(ep.success)
            index += 1

    for tid, n_eps in zip(task_ids, counts):
        rate = successes_per_task[tid] / n_eps
        if rate < MIN_EXPERT_SUCCESS:
            raise DatasetError(
                f"expert success {rate:.2%} on task {tid} below {MIN_EXPERT_SUCCESS:.0%}"
            )

    manifest = {
        "version": FORMAT_VERSION,
        "dtype": "float32 little-endian",
        "episode_len": episode_len,
        "dt": dt,
        "a_max": a_max,
        "action_noise": action_noise,
        "tasks": task_ids,
        "episodes_per_task": counts if len(set(counts)) > 1 else counts[0],
        "seed": seed,
        "step_layout": {"proprio": D_PROPRIO, "image": [env.IMAGE_SIZE, env.IMAGE_SIZE],
                        "action": D_ACTION},
        "episodes": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


@dataclass
class Dataset:
    """In-memory view of a dataset directory."""
    episode_len: int
    dt: float
    a_max: float
    task_ids: np.ndarray  # (E,)
    proprio: np.ndarray   # (E, T, 6)
    images: np.ndarray    # (E, T, 64, 64)
    actions: np.ndarray   # (E, T, 2)
    success: np.ndarray   # (E,) bool
    manifest: dict
    path: Path | None = None

    @property
    def n_episodes(self) -> int:
        return self.proprio.shape[0]


def load_dataset(path: str | Path, verify_checksums: bool = False) -> Dataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    T = manifest["episode_len"]
    eps = manifest["episodes"]
    proprio = np.zeros((len(eps), T, D_PROPRIO), dtype=np.float32)
    images = np.zeros((len(eps), T, env.IMAGE_SIZE, env.IMAGE_SIZE), dtype=np.float32)
    actions = np.zeros((len(eps), T, D_ACTION), dtype=np.float32)
    success = np.zeros(len(eps), dtype=bool)
    task_ids = np.zeros(len(eps), dtype=np.int64)
    for i, entry in enumerate(eps):
        raw = (root / entry["file"]).read_bytes()
        if verify_checksums and hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise DatasetError(f"checksum mismatch for {entry['file']}")
        proprio[i], images[i], actions[i], success[i] = _decode_episode(raw, T)
        task_ids[i] = entry["task_id"]
    return Dataset(
        episode_len=T,
        dt=manifest["dt"],
        a_max=manifest["a_max"],
        task_ids=task_ids,
        proprio=proprio,
        images=images,
        actions=actions,
        success=success,
        manifest=manifest,
        path=root,
    )
