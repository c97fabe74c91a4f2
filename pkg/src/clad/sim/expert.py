"""Scripted expert: proportional end-effector control through task waypoints.

The controller is stateless -- the current waypoint is derived from the world
(which objects already sit in their goals) so replaying recorded states gives
identical actions.
"""

from __future__ import annotations

import numpy as np

from .env import ARM_REACH, EE_RADIUS, WorldState, arm_jacobian
from .tasks import get_task

KP = 4.0
EE_SPEED_MAX = 1.2
DLS_LAMBDA = 0.1

_APPROACH_MARGIN = 0.04
_PUSH_DEPTH = 0.025
_ALIGN_PERP = 0.035
_GOAL_SLACK = 0.7  # treat object done at 70% of goal radius, inside predicate


class UnreachableWaypointError(RuntimeError):
    """IK target lies outside the reachable annulus."""


def _check_reachable(target: np.ndarray) -> None:
    if np.linalg.norm(target) > ARM_REACH - 0.01:
        raise UnreachableWaypointError(f"waypoint {target} outside reach {ARM_REACH}")


def _waypoint(world: WorldState) -> np.ndarray:
    spec = get_task(world.task_id)
    ee = world.arm.ee
    if spec.n_objects == 0:
        return spec.goals[0]
    for i in range(spec.n_objects):
        obj = world.objects[i]
        goal = spec.goals[i]
        if np.linalg.norm(obj - goal) <= spec.goal_radii[i] * _GOAL_SLACK:
            continue
        d = goal - obj
        dist = np.linalg.norm(d)
        direction = d / dist
        r_sum = EE_RADIUS + float(world.object_radii[i])
        rel = ee - obj
        along = float(rel @ -direction)          # >0 means behind the object
        perp = float(np.linalg.norm(rel + along * direction))
        if along > r_sum - 0.03 and perp < _ALIGN_PERP:
            # in pushing position: drive through the object toward the goal
            return goal - direction * (r_sum - _PUSH_DEPTH)
        return obj - direction * (r_sum + _APPROACH_MARGIN)
    return ee  # everything done: hold


def scripted_expert(world: WorldState, a_max: float = 2.0) -> np.ndarray:
    """Commanded joint velocities toward the current waypoint."""
    target = _waypoint(world)
    _check_reachable(target)
    err = target - world.arm.ee
    v = KP * err
    speed = np.linalg.norm(v)
    if speed > EE_SPEED_MAX:
        v *= EE_SPEED_MAX / speed
    J = arm_jacobian(world.arm.q)
    # damped least squares: robust at the straight-arm singularity
    A = J @ J.T + (DLS_LAMBDA**2) * np.eye(2)
    dq = J.T @ np.linalg.solve(A, v)
    return np.clip(dq, -a_max, a_max)
