"""Deterministic 2-DOF planar-arm pushing simulator.

Kinematics, Euler integration with velocity clipping, a positional-projection
contact model (end-effector disc pushes object discs out of overlap), and an
anti-aliasing-free rasterizer. Everything is a pure function of its inputs so
datasets are byte-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

LINK_1 = 0.5
LINK_2 = 0.5
ARM_REACH = LINK_1 + LINK_2   # workspace half-extent L
EE_RADIUS = 0.06

IMAGE_SIZE = 64

# rasterization intensity levels; distinct so render stays injective on scenes
# that differ only in which element covers a pixel
_GOAL_LEVEL = 0.3
_OBJECT_LEVEL = 0.6
_ARM_LEVEL = 1.0
_ARM_HALF_WIDTH = 0.025


def wrap_angle(x):
    """Wrap to [-pi, pi). Idempotent."""
    return np.mod(np.asarray(x, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi


def forward_kinematics(q: np.ndarray) -> np.ndarray:
    q1, q2 = float(q[0]), float(q[1])
    x = LINK_1 * np.cos(q1) + LINK_2 * np.cos(q1 + q2)
    y = LINK_1 * np.sin(q1) + LINK_2 * np.sin(q1 + q2)
    return np.array([x, y], dtype=np.float64)


def elbow_position(q: np.ndarray) -> np.ndarray:
    q1 = float(q[0])
    return np.array([LINK_1 * np.cos(q1), LINK_1 * np.sin(q1)], dtype=np.float64)


def arm_jacobian(q: np.ndarray) -> np.ndarray:
    """2x2 Jacobian of the end-effector position w.r.t. joint angles."""
    q1, q2 = float(q[0]), float(q[1])
    s1, c1 = np.sin(q1), np.cos(q1)
    s12, c12 = np.sin(q1 + q2), np.cos(q1 + q2)
    return np.array(
        [
            [-LINK_1 * s1 - LINK_2 * s12, -LINK_2 * s12],
            [LINK_1 * c1 + LINK_2 * c12, LINK_2 * c12],
        ],
        dtype=np.float64,
    )


@dataclass(frozen=True)
class ArmState:
    q: np.ndarray   # joint angles, wrapped to [-pi, pi)
    dq: np.ndarray  # joint velocities

    @property
    def ee(self) -> np.ndarray:
        # recomputed on access, never stored stale
        return forward_kinematics(self.q)

    @property
    def proprio(self) -> np.ndarray:
        """(q, dq, ee) as a flat 6-vector."""
        return np.concatenate([self.q, self.dq, self.ee]).astype(np.float64)

    @staticmethod
    def make(q, dq=(0.0, 0.0)) -> "ArmState":
        return ArmState(
            q=wrap_angle(np.asarray(q, dtype=np.float64)),
            dq=np.asarray(dq, dtype=np.float64).copy(),
        )


@dataclass(frozen=True)
class WorldState:
    arm: ArmState
    objects: np.ndarray        # (n_obj, 2) positions
    object_radii: np.ndarray   # (n_obj,)
    goals: np.ndarray          # (n_goal, 2) centers
    goal_radii: np.ndarray     # (n_goal,)
    task_id: int = 0

    def copy_with_arm(self, arm: ArmState) -> "WorldState":
        return replace(self, arm=arm)


def step(world: WorldState, action: np.ndarray, dt: float, a_max: float = 2.0) -> WorldState:
    """One Euler step with clipped joint velocities and positional contact."""
    action = np.asarray(action, dtype=np.float64)
    if not np.all(np.isfinite(action)):
        raise ValueError("action must be finite")
    dq = np.clip(action, -a_max, a_max)
    q = wrap_angle(world.arm.q + dq * dt)
    arm = ArmState(q=q, dq=dq)
    ee = arm.ee

    objects = world.objects.copy()
    for i in range(objects.shape[0]):
        d = objects[i] - ee
        dist = float(np.hypot(d[0], d[1]))
        r_sum = EE_RADIUS + float(world.object_radii[i])
        if dist < r_sum:
            n = d / dist if dist > 1e-12 else np.array([1.0, 0.0])
            objects[i] = ee + n * r_sum
        objects[i] = np.clip(objects[i], -ARM_REACH, ARM_REACH)
    return replace(world, arm=arm, objects=objects)


def _pixel_centers(image_size: int):
    # pixel (row, col) -> world coords; row 0 is y = +L (image "up" is +y)
    half = ARM_REACH
    xs = (np.arange(image_size) + 0.5) / image_size * 2 * half - half
    ys = half - (np.arange(image_size) + 0.5) / image_size * 2 * half
    return np.meshgrid(xs, ys)  # X: (S,S) cols, Y: (S,S) rows


_PX, _PY = _pixel_centers(IMAGE_SIZE)


def _disc_mask(center, radius):
    return (_PX - center[0]) ** 2 + (_PY - center[1]) ** 2 <= radius**2


def _segment_mask(a, b, half_width):
    ab = b - a
    len2 = float(ab @ ab)
    px = _PX - a[0]
    py = _PY - a[1]
    if len2 < 1e-12:
        t = np.zeros_like(_PX)
    else:
        t = np.clip((px * ab[0] + py * ab[1]) / len2, 0.0, 1.0)
    dx = px - t * ab[0]
    dy = py - t * ab[1]
    return dx * dx + dy * dy <= half_width**2


def render(world: WorldState, include_arm: bool = True) -> np.ndarray:
    """Rasterize a WorldState to a 64x64 grayscale image in [0, 1].

    Pure function of the state: no noise, no anti-aliasing. Layer order
    (goals < objects < arm) with max-composition.
    """
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=np.float64)
    for g, r in zip(world.goals, world.goal_radii):
        img = np.maximum(img, _GOAL_LEVEL * _disc_mask(g, float(r)))
    for o, r in zip(world.objects, world.object_radii):
        img = np.maximum(img, _OBJECT_LEVEL * _disc_mask(o, float(r)))
    if include_arm:
        base = np.zeros(2)
        elbow = elbow_position(world.arm.q)
        ee = world.arm.ee
        img = np.maximum(img, _ARM_LEVEL * _segment_mask(base, elbow, _ARM_HALF_WIDTH))
        img = np.maximum(img, _ARM_LEVEL * _segment_mask(elbow, ee, _ARM_HALF_WIDTH))
        img = np.maximum(img, _ARM_LEVEL * _disc_mask(ee, EE_RADIUS))
    return img.astype(np.float32)
