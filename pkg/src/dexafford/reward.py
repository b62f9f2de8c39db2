"""Affordance-aware reward: weighted affordance, task and action-penalty terms."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, quat_angle, quat_dot

EXP_CLAMP = 20.0

STAGES = ("grasp", "lift", "orient")


@dataclass(frozen=True)
class RewardConfig:
    w_a: float = 1.0
    w_t: float = 1.0
    w_p: float = 0.01
    alpha: float = 5.0
    grasp_mode: str = "height"   # or "pose-distance"
    orient_sign_flip: bool = False
    pose_scale_translation: float = 0.05
    pose_scale_rotation: float = 0.5

    def __post_init__(self):
        if min(self.w_a, self.w_t, self.w_p) < 0:
            raise ValueError("reward weights must be non-negative")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.grasp_mode not in ("pose-distance", "height"):
            raise ValueError(f"unknown grasp reward mode {self.grasp_mode!r}")


@dataclass(frozen=True)
class RewardBreakdown:
    affordance: float
    task: float
    penalty: float
    total: float
    stage: str


def _clamped_exp(x: float) -> float:
    return math.exp(min(EXP_CLAMP, max(-EXP_CLAMP, float(x))))


def affordance_reward(fingertips, target, alpha: float) -> float:
    """``exp(-alpha * sum_i |tip_i - target|)``."""
    tips = np.asarray(fingertips, dtype=float).reshape(-1, 3)
    if len(tips) == 0:
        raise ValueError("need at least one fingertip")
    d = tips - np.asarray(target, dtype=float)
    total = float(np.sqrt(np.einsum("ij,ij->i", d, d)).sum())
    return math.exp(-alpha * total)


def grasp_task_reward(z_current: float, z_candidate: float) -> float:
    return _clamped_exp(z_current - z_candidate)


def pose_distance_scaled(a: Pose, b: Pose, config: RewardConfig) -> float:
    dt = float(np.linalg.norm(np.asarray(a.position) - np.asarray(b.position)))
    dr = quat_angle(a.orientation, b.orientation)
    return math.hypot(dt / config.pose_scale_translation, dr / config.pose_scale_rotation)


def grasp_pose_reward(wrist: Pose, candidate: Pose, config: RewardConfig) -> float:
    """Pose-distance grasp reward ``exp(-|x_ee - g*|)`` in scaled units."""
    return _clamped_exp(-pose_distance_scaled(wrist, candidate, config))


def lift_task_reward(z_current: float, z_initial: float) -> float:
    return _clamped_exp(z_current - z_initial)


def orient_task_reward(r_current, r_target, sign_flip: bool = False) -> float:
    """``-2 asin(2<r_cur, r_tgt>^2 - 1)``; equals ``2*theta - pi`` for rotation angle theta."""
    d = quat_dot(r_current, r_target)
    arg = min(1.0, max(-1.0, 2.0 * d * d - 1.0))
    value = -2.0 * math.asin(arg)
    return -value if sign_flip else value


def action_penalty(action) -> float:
    a = np.asarray(action.as_vector() if hasattr(action, "as_vector") else action, dtype=float).ravel()
    return float(a @ a)


def combine(affordance: float, task: float, penalty: float, config: RewardConfig,
            stage: str, zero_weight: bool = False) -> RewardBreakdown:
    if zero_weight:
        total = 0.0
    else:
        total = config.w_a * affordance + config.w_t * task - config.w_p * penalty
    return RewardBreakdown(affordance, task, penalty, total, stage)


def total_reward(state, action, stage: str, config: RewardConfig) -> RewardBreakdown:
    """Stage-selected reward for an environment state.

    ``state`` supplies ``fingertips``, ``wrist_pose``, ``object_pose``,
    ``z_initial``, ``orient_target``, ``zero_weight`` and the guidance hooks
    ``affordance_point()`` / ``grasp_reference()``; only the guided variant
    has a non-zero ``w_a`` and is asked for the affordance point.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    aff = 0.0
    if config.w_a > 0:
        aff = affordance_reward(state.fingertips, state.affordance_point(), config.alpha)
    if stage == "grasp":
        ref = state.grasp_reference()
        if config.grasp_mode == "height":
            task = grasp_task_reward(state.wrist_pose.position[2], ref.position[2])
        else:
            task = grasp_pose_reward(state.wrist_pose, ref, config)
    elif stage == "lift":
        task = lift_task_reward(state.object_pose.position[2], state.z_initial)
    else:
        task = orient_task_reward(state.object_pose.orientation, state.orient_target,
                                  config.orient_sign_flip)
    return combine(aff, task, action_penalty(action), config, stage, state.zero_weight)
