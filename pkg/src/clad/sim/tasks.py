"""Task definitions for the planar-arm environment.

Three task families:
  T0 reach       -- bring the end-effector into a goal zone
  T1 push        -- push one object disc into its goal zone
  T2 sequential  -- push two objects into their zones in order (long-horizon)

Object/goal layouts are fixed per task; episode diversity comes from the
randomized initial arm configuration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import ArmState, WorldState

OBJECT_RADIUS = 0.07
GOAL_RADIUS = 0.10

# initial joint-angle ranges placing the end-effector low-right, clear of the
# object-to-goal push corridors
_INIT_Q1 = (-0.9, -0.3)
_INIT_Q2 = (0.4, 1.0)


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    objects: np.ndarray      # (n, 2) initial positions
    goals: np.ndarray        # (m, 2) centers; for push tasks goal i matches object i
    goal_radii: np.ndarray

    @property
    def n_objects(self) -> int:
        return self.objects.shape[0]


def _spec(task_id, name, objects, goals):
    objects = np.asarray(objects, dtype=np.float64).reshape(-1, 2)
    goals = np.asarray(goals, dtype=np.float64).reshape(-1, 2)
    return TaskSpec(
        task_id=task_id,
        name=name,
        objects=objects,
        goals=goals,
        goal_radii=np.full(goals.shape[0], GOAL_RADIUS),
    )


TASKS: dict[int, TaskSpec] = {
    0: _spec(0, "reach", np.zeros((0, 2)), [[0.45, 0.45]]),
    1: _spec(1, "push", [[0.50, 0.10]], [[0.62, 0.42]]),
    2: _spec(
        2,
        "sequential-push",
        [[0.45, 0.15], [0.05, 0.45]],
        [[0.62, 0.40], [-0.30, 0.55]],
    ),
}

N_TASKS = len(TASKS)


def get_task(task_id: int) -> TaskSpec:
    if task_id not in TASKS:
        raise KeyError(f"unknown task_id {task_id}")
    return TASKS[task_id]


def initial_world(task_id: int, rng: np.random.Generator) -> WorldState:
    spec = get_task(task_id)
    q1 = rng.uniform(*_INIT_Q1)
    q2 = rng.uniform(*_INIT_Q2)
    return WorldState(
        arm=ArmState.make((q1, q2)),
        objects=spec.objects.copy(),
        object_radii=np.full(spec.n_objects, OBJECT_RADIUS),
        goals=spec.goals.copy(),
        goal_radii=spec.goal_radii.copy(),
        task_id=task_id,
    )


def success(world: WorldState) -> bool:
    """Success predicate; no dwell requirement."""
    spec = get_task(world.task_id)
    if spec.n_objects == 0:
        return bool(np.linalg.norm(world.arm.ee - spec.goals[0]) <= spec.goal_radii[0])
    dists = np.linalg.norm(world.objects - world.goals, axis=1)
    return bool(np.all(dists <= spec.goal_radii))
