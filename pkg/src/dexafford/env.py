"""Staged manipulation tasks on a quasi-static table-top scene.

The object rests on the table until the grasp predicate holds; it then rides
rigidly with the wrist until the fingers open by more than the release
threshold, at which point it drops back onto the table keeping its heading.

Observation layout v1 (guided, 44 entries)::

    [0:3]   wrist position          [3:7]   wrist quaternion (w >= 0)
    [7:27]  hand joints
    [27:30] object position         [30:34] object quaternion (w >= 0)
    [34:41] nearest feasible candidate pose (zeros when none)
    [41:44] stage one-hot

Without guidance the candidate slot is dropped (37 entries).
"""

from __future__ import annotations

import configparser
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .classifier import VotingConfig, classify_contacts
from .geometry import (
    Pose,
    pose_compose,
    pose_distance,
    pose_inverse,
    quat_angle,
    quat_from_axis_angle,
    quat_mul,
    quat_to_matrix,
)
from .grasp import GraspCandidate, sphere_surface_query
from .reward import RewardBreakdown, RewardConfig, total_reward
from .robot import (
    HOME_WRIST,
    MAX_WRIST_ROTATION,
    MAX_WRIST_TRANSLATION,
    RobotModel,
    RobotState,
    _hand_fk,
    arm_sphere_centers,
    arm_wrist_batch,
    hand_sphere_centers_batch,
    ik_step,
    solve_ik,
)
from .semantic_maps import ObjectAsset

OBS_VERSION = 1
ACTION_DIM = 26


@dataclass(frozen=True)
class Table:
    top: float = 0.0
    thickness: float = 0.05
    x: tuple[float, float] = (-0.4, 0.4)
    y: tuple[float, float] = (-0.5, 0.5)

    def gap(self, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
        """Signed clearance of spheres from the slab (negative inside)."""
        c = np.asarray(centers, dtype=float)
        dx = np.maximum(np.maximum(self.x[0] - c[..., 0], c[..., 0] - self.x[1]), 0.0)
        dy = np.maximum(np.maximum(self.y[0] - c[..., 1], c[..., 1] - self.y[1]), 0.0)
        lo = self.top - self.thickness
        dz_out = np.maximum(np.maximum(lo - c[..., 2], c[..., 2] - self.top), 0.0)
        outside = np.sqrt(dx * dx + dy * dy + dz_out * dz_out)
        inside = -np.minimum(np.minimum(c[..., 2] - lo, self.top - c[..., 2]),
                             np.minimum(np.minimum(c[..., 0] - self.x[0], self.x[1] - c[..., 0]),
                                        np.minimum(c[..., 1] - self.y[0], self.y[1] - c[..., 1])))
        d = np.where(outside > 0, outside, inside)
        return d - radii


TASK_NAMES = {1: "cube-lift", 2: "jug-handle-lift", 3: "hammer-reorient"}


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    object_kind: str
    stages: tuple[str, ...]
    affordance_label: str
    required_grasp_type: str | None = None
    grasp_type_mode: str = "classify"      # or "candidate"
    orient_frame: str | None = None
    horizon: int = 300
    lift_height: float = 0.1
    orient_tolerance: float = 0.2
    contact_threshold: float = 0.005
    release_opening: float = 0.25
    hand_rate: float = 0.15
    x_range: tuple[float, float] = (-0.06, 0.06)
    y_range: tuple[float, float] = (-0.06, 0.06)
    yaw_range: tuple[float, float] = (-0.5, 0.5)
    retry_cap: int = 10
    hover_height: float = 0.09
    approach_offset: float = 0.08
    reward: RewardConfig = field(default_factory=RewardConfig)
    asset_path: str | None = None
    candidate_path: str | None = None

    def __post_init__(self):
        if self.task_id not in TASK_NAMES:
            raise ValueError(f"unknown task id {self.task_id}")
        if not self.stages or self.stages[0] != "grasp":
            raise ValueError("tasks start with the grasp stage")
        for s in self.stages:
            if s not in ("grasp", "lift", "orient"):
                raise ValueError(f"unknown stage {s!r}")
        if len(set(self.stages)) != len(self.stages):
            raise ValueError("stages must not repeat")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.grasp_type_mode not in ("classify", "candidate"):
            raise ValueError(f"unknown grasp type mode {self.grasp_type_mode!r}")
        if "orient" in self.stages and self.orient_frame is None:
            raise ValueError("reorientation tasks need an orient_frame")

    @property
    def name(self) -> str:
        return TASK_NAMES[self.task_id]


def default_task(task_id: int, **overrides) -> TaskSpec:
    base = {
        1: dict(object_kind="cube", stages=("grasp", "lift"), affordance_label="grasp"),
        2: dict(object_kind="jug", stages=("grasp", "lift"), affordance_label="handle",
                required_grasp_type="handle"),
        3: dict(object_kind="hammer", stages=("grasp", "orient"), affordance_label="handle",
                orient_frame="handle"),
    }
    if task_id not in base:
        raise ValueError(f"unknown task id {task_id}")
    return TaskSpec(task_id=task_id, **{**base[task_id], **overrides})


# ---------------------------------------------------------------- actions

@dataclass(frozen=True)
class Action:
    wrist_delta: np.ndarray     # (dx, dy, dz, rx, ry, rz), world frame
    hand_targets: np.ndarray

    def __post_init__(self):
        w = np.array(self.wrist_delta, dtype=float).ravel()
        h = np.array(self.hand_targets, dtype=float).ravel()
        if w.shape != (6,):
            raise ValueError(f"wrist delta must have 6 entries, got {w.size}")
        object.__setattr__(self, "wrist_delta", w)
        object.__setattr__(self, "hand_targets", h)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.wrist_delta, self.hand_targets])

    @classmethod
    def zero(cls, hand_dof: int = 20) -> Action:
        return cls(np.zeros(6), np.zeros(hand_dof))


def clamp_action(action: Action, robot: RobotModel) -> Action:
    w = action.wrist_delta.copy()
    w[:3] = np.clip(w[:3], -MAX_WRIST_TRANSLATION, MAX_WRIST_TRANSLATION)
    w[3:] = np.clip(w[3:], -MAX_WRIST_ROTATION, MAX_WRIST_ROTATION)
    h = np.clip(action.hand_targets, robot.hand.lo, robot.hand.hi)
    return Action(w, h)


def decode_action(u, robot: RobotModel) -> Action:
    """Map a policy output in [-1, 1]^26 onto physical action bounds."""
    u = np.clip(np.asarray(u, dtype=float).ravel(), -1.0, 1.0)
    if u.shape != (6 + robot.hand.dof,):
        raise ValueError(f"policy action must have {6 + robot.hand.dof} entries, got {u.size}")
    w = np.concatenate([u[:3] * MAX_WRIST_TRANSLATION, u[3:6] * MAX_WRIST_ROTATION])
    lo, hi = robot.hand.lo, robot.hand.hi
    h = 0.5 * (lo + hi) + 0.5 * (hi - lo) * u[6:]
    return Action(w, h)


# ---------------------------------------------------------------- state

@dataclass(frozen=True, eq=False)
class EnvState:
    robot: RobotState
    object_pose: Pose
    asset: ObjectAsset
    candidates: tuple[GraspCandidate, ...]
    feasible: tuple[bool, ...]
    stage: int
    step: int
    z_initial: float
    orient_target: np.ndarray
    seed: int
    zero_weight: bool = False
    attached: bool = False
    grip: Pose | None = None     # object pose in the wrist frame while attached
    grip_q: np.ndarray | None = None   # hand joints at the moment of attachment
    successes: tuple[bool, ...] = ()
    done: bool = False

    @property
    def valid_candidates(self) -> tuple[GraspCandidate, ...]:
        return tuple(c for c, ok in zip(self.candidates, self.feasible) if ok)


@dataclass(frozen=True)
class StepResult:
    state: EnvState
    reward: RewardBreakdown
    transition: bool
    done: bool
    info: dict


class _RewardView:
    """Adapter handing reward terms to the reward engine, counting guidance reads."""

    def __init__(self, env: ManipulationEnv, state: EnvState):
        self.env, self.state = env, state
        self.fingertips = state.robot.fingertips
        self.wrist_pose = state.robot.wrist_pose
        self.object_pose = state.object_pose
        self.z_initial = state.z_initial
        self.orient_target = state.orient_target
        self.zero_weight = state.zero_weight

    def affordance_point(self) -> np.ndarray:
        return self.env._affordance_point(self.state)

    def grasp_reference(self) -> Pose:
        if self.env.guided:
            g = self.env.nearest_candidate(self.state)
            if g is not None:
                return g
        return self.env.hover_reference(self.state)


class ManipulationEnv:
    """Value-state environment: ``reset`` and ``step`` never mutate their inputs.

    ``guided=False`` removes the affordance term, the candidate observation
    slot and candidate filtering; ``guidance_reads`` counts every access to
    the affordance map or candidate set for verification.
    """

    def __init__(self, task: TaskSpec, robot: RobotModel, asset: ObjectAsset,
                 candidates=(), guided: bool = True, table: Table | None = None,
                 voting: VotingConfig | None = None):
        self.task = task
        self.robot = robot
        self.asset = asset
        self.guided = guided
        self.table = table or Table()
        self.voting = voting or VotingConfig()
        self.guidance_reads: Counter = Counter()
        self._reset_cache: dict[int, EnvState] = {}
        self._candidates = tuple(c for c in candidates if not c.rejected) if guided else ()
        cfg = task.reward
        if not guided:
            cfg = replace(cfg, w_a=0.0)
        self.reward_config = cfg
        self._obj_center = asset.points.mean(axis=0)
        self._obj_radius = float(np.linalg.norm(asset.points - self._obj_center, axis=1).max())
        self._home = RobotState.home(robot)
        hand = robot.hand
        self._tips = hand.tip_sphere_index
        self._thumb = [f.name for f in hand.fingers].index("thumb")
        nj = len(hand.fingers[0].joints)
        frame = hand.sphere_table[0]
        self._sphere_finger = np.where(frame < 0, -1, frame // nj)
        self._nj = nj
        self._flex_mask = np.arange(hand.dof) % nj != 0
        self._hand_reach = float(np.max(np.linalg.norm(
            hand.sphere_table[1], axis=1))) + 0.15
        self._afford_local = None
        self._cand_key = None
        self._hover_standoff = task.hover_height

    # ------------------------------------------------------------ dims

    @property
    def obs_dim(self) -> int:
        return 7 + self.robot.hand.dof + 7 + (7 if self.guided else 0) + 3

    @property
    def action_dim(self) -> int:
        return 6 + self.robot.hand.dof

    # ------------------------------------------------------------ guidance data

    def _affordance_point(self, state: EnvState) -> np.ndarray:
        self.guidance_reads["affordance"] += 1
        if self._afford_local is None:
            self._afford_local = self.asset.points[self.asset.region(self.task.affordance_label)].mean(axis=0)
        R = quat_to_matrix(state.object_pose.orientation)
        return R @ self._afford_local + np.asarray(state.object_pose.position)

    def _candidate_arrays(self, state: EnvState):
        """World positions (K,3) and quaternions (K,4) of the feasible candidates."""
        self.guidance_reads["candidates"] += 1
        key = self._cand_key
        if key is not None and key[0] is state.object_pose and key[1] is state.feasible:
            return key[2]
        valid = state.valid_candidates
        if valid:
            obj = state.object_pose
            R = quat_to_matrix(obj.orientation)
            P = np.array([c.wrist.position for c in valid]) @ R.T + obj.position
            Q = np.array([quat_mul(obj.orientation, c.wrist.orientation) for c in valid])
            Q /= np.linalg.norm(Q, axis=1)[:, None]
            arrays = (P, Q, valid)
        else:
            arrays = (np.zeros((0, 3)), np.zeros((0, 4)), ())
        self._cand_key = (state.object_pose, state.feasible, arrays)
        return arrays

    def candidate_world_poses(self, state: EnvState) -> list[Pose]:
        return [pose_compose(state.object_pose, c.wrist) for c in self._candidate_arrays(state)[2]]

    def nearest_candidate_index(self, state: EnvState) -> int | None:
        """Index into ``valid_candidates`` of the candidate closest to the wrist."""
        P, Q, valid = self._candidate_arrays(state)
        if not valid:
            return None
        w = state.robot.wrist_pose
        dt = np.linalg.norm(P - w.position, axis=1)
        dots = np.clip(np.abs(Q @ w.orientation), 0.0, 1.0)
        d = dt + 0.1 * (2.0 * np.arccos(dots))
        return int(np.argmin(d))

    def nearest_candidate(self, state: EnvState) -> Pose | None:
        """Feasible candidate closest to the current wrist pose (translation + 0.1 m/rad)."""
        k = self.nearest_candidate_index(state)
        if k is None:
            return None
        P, Q, _ = self._cand_key[2]
        return Pose(P[k], Q[k])

    def hover_reference(self, state: EnvState) -> Pose:
        """Palm-down pose above the object's centre, turned with the object's heading."""
        c = quat_to_matrix(state.object_pose.orientation) @ self._obj_center + np.asarray(state.object_pose.position)
        yaw = _heading(state.object_pose.orientation)
        q = quat_mul(quat_from_axis_angle((0, 0, 1), yaw), HOME_WRIST.orientation)
        return Pose(c + np.array([0.0, 0.0, self._hover_standoff]), q)

    # ------------------------------------------------------------ geometry

    def _local(self, state_obj: Pose, centers: np.ndarray) -> np.ndarray:
        R = quat_to_matrix(state_obj.orientation)
        return (centers - np.asarray(state_obj.position)) @ R

    def _near_object(self, wrist_p: np.ndarray, obj: Pose) -> bool:
        c = quat_to_matrix(obj.orientation) @ self._obj_center + np.asarray(obj.position)
        return float(np.linalg.norm(wrist_p - c)) < self._obj_radius + self._hand_reach

    def sphere_gaps(self, robot_state: RobotState, obj: Pose) -> np.ndarray:
        """Clearance of every hand sphere from the object surface (negative inside)."""
        centers, radii = robot_state.hand_spheres
        local = self._local(obj, centers)
        return sphere_surface_query(self.asset, local, radii).gap

    def _fingertip_gaps(self, robot_state: RobotState, obj: Pose) -> np.ndarray:
        centers, radii = robot_state.hand_spheres
        tips = self._tips
        local = self._local(obj, centers[tips])
        return sphere_surface_query(self.asset, local, radii[tips]).gap

    def _tips_hold(self, gaps: np.ndarray, limit: float) -> bool:
        close = np.maximum(gaps, 0.0) <= limit
        return bool(close[self._thumb] and close.sum() >= 2)

    # ------------------------------------------------------------ predicates

    def contact_classification(self, state: EnvState):
        """Affordance vote over the current hand contacts (None without finger contacts)."""
        centers, radii = state.robot.hand_spheres
        local = self._local(state.object_pose, centers)
        sq = sphere_surface_query(self.asset, local, radii)
        hit = np.flatnonzero(sq.gap <= self.task.contact_threshold)
        labels = self.robot.hand.sphere_table[3]
        parts = [labels[i] for i in hit]
        if not any(p != "palm" for p in parts):
            return None
        pts = self.asset.points[sq.nearest[hit]]
        try:
            return classify_contacts(pts, parts, self.asset, self.voting)
        except ValueError:
            return None

    def _matches_candidate_type(self, state: EnvState) -> bool:
        k = self.nearest_candidate_index(state)
        return k is not None and state.valid_candidates[k].grasp_type == self.task.required_grasp_type

    def grasp_predicate(self, state: EnvState) -> bool:
        gaps = self._fingertip_gaps(state.robot, state.object_pose)
        if not self._tips_hold(gaps, self.task.contact_threshold):
            return False
        if self.task.required_grasp_type is None:
            return True
        if self.task.grasp_type_mode == "candidate":
            return self._matches_candidate_type(state)
        result = self.contact_classification(state)
        return result is not None and result.label == self.task.required_grasp_type

    def lift_predicate(self, state: EnvState) -> bool:
        return state.attached and state.object_pose.position[2] - state.z_initial >= self.task.lift_height

    def orient_predicate(self, state: EnvState) -> bool:
        return state.attached and quat_angle(state.object_pose.orientation, state.orient_target) <= self.task.orient_tolerance

    def _stage_done(self, name: str, state: EnvState) -> bool:
        if name == "grasp":
            return state.attached
        if name == "lift":
            return self.lift_predicate(state)
        return self.orient_predicate(state)

    # ------------------------------------------------------------ feasibility

    def feasibility_flags(self, candidates, state: EnvState, waypoints: int = 50,
                          tolerance: float = 0.005) -> tuple[bool, ...]:
        """Reachability of each object-frame candidate from the current arm configuration."""
        self.guidance_reads["filter"] += 1
        out = []
        for c in candidates:
            out.append(self._reachable(c, state, waypoints, tolerance))
        return tuple(out)

    def _reachable(self, cand: GraspCandidate, state: EnvState, waypoints: int, tolerance: float) -> bool:
        arm = self.robot.arm
        q0 = state.robot.arm_q
        target = pose_compose(state.object_pose, cand.wrist)
        q_goal, ok = solve_ik(arm, q0, target)
        if not ok:
            return False
        if self._path_clear(cand, state, q0, q_goal, waypoints, tolerance):
            return True
        # fall back to a two-segment path through a pose backed off along the approach axis
        R = quat_to_matrix(target.orientation)
        pre = Pose(np.asarray(target.position) - self.task.approach_offset * R[:, 2], target.orientation)
        q_pre, ok = solve_ik(arm, q0, pre)
        if not ok:
            return False
        q_goal, ok = solve_ik(arm, q_pre, target)
        if not ok:
            return False
        return (self._path_clear(cand, state, q0, q_pre, waypoints, tolerance)
                and self._path_clear(cand, state, q_pre, q_goal, waypoints, tolerance))

    def _path_clear(self, cand: GraspCandidate, state: EnvState, qa, qb, waypoints: int,
                    tolerance: float) -> bool:
        arm = self.robot.arm
        s = np.linspace(0.0, 1.0, waypoints)[:, None]
        Q = (1 - s) * qa + s * qb
        # the hand is pre-shaped to the candidate for the whole transit
        H = np.repeat(np.asarray(cand.hand_q, dtype=float)[None], waypoints, axis=0)
        Rw, pw, Rs, ps = arm_wrist_batch(arm, Q)
        obj = state.object_pose
        if arm.spheres:
            ac, ar = arm_sphere_centers(arm, Rs, ps)
            if np.any(self.table.gap(ac, ar) < 0):
                return False
            if np.any(self._object_gap(obj, ac.reshape(-1, 3), np.tile(ar, len(Q))) < 0):
                return False
        radii = self.robot.hand.sphere_table[2]
        allc = hand_sphere_centers_batch(self.robot.hand, Rw, pw, H)
        if np.any(self.table.gap(allc, radii) < -tolerance):
            return False
        gap = self._object_gap(obj, allc.reshape(-1, 3), np.tile(radii, len(Q)))
        return not np.any(gap < -tolerance)

    def _object_gap(self, obj: Pose, centers: np.ndarray, radii: np.ndarray) -> np.ndarray:
        """Object clearance of world spheres; far spheres skip the surface lookup."""
        local = self._local(obj, centers)
        far = np.linalg.norm(local - self._obj_center, axis=1) - radii - self._obj_radius
        out = far.copy()
        near = np.flatnonzero(far < 0.01)
        if len(near):
            out[near] = sphere_surface_query(self.asset, local[near], radii[near]).gap
        return out

    def feasibility_filter(self, candidates, state: EnvState) -> list[GraspCandidate]:
        flags = self.feasibility_flags(candidates, state)
        return [c for c, ok in zip(candidates, flags) if ok]

    # ------------------------------------------------------------ reset / step

    def _sample_object(self, rng: np.random.Generator) -> Pose:
        t = self.task
        x = rng.uniform(*t.x_range)
        y = rng.uniform(*t.y_range)
        yaw = rng.uniform(*t.yaw_range)
        return Pose((x, y, self.table.top + self.asset.rest_height), quat_from_axis_angle((0, 0, 1), yaw))

    def _orient_target(self, obj: Pose) -> np.ndarray:
        if self.task.orient_frame is None:
            return np.asarray(obj.orientation)
        frame = self.asset.frames[self.task.orient_frame]
        return quat_mul(obj.orientation, frame.orientation)

    def reset(self, seed: int) -> EnvState:
        """Initial state for ``seed``; pure in the seed, so results are memoized."""
        seed = int(seed)
        hit = self._reset_cache.get(seed)
        if hit is None:
            hit = self._reset_cache[seed] = self._reset(seed)
            if len(self._reset_cache) > 4096:
                self._reset_cache.pop(next(iter(self._reset_cache)))
        return hit

    def _reset(self, seed: int) -> EnvState:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
        robot_state = self._home
        feasible: tuple[bool, ...] = ()
        for _ in range(self.task.retry_cap + 1):
            obj = self._sample_object(rng)
            state = EnvState(robot_state, obj, self.asset, self._candidates, (), 0, 0,
                             float(obj.position[2]), self._orient_target(obj), int(seed),
                             successes=(False,) * len(self.task.stages))
            if not self.guided:
                return state
            feasible = self.feasibility_flags(self._candidates, state)
            if any(feasible):
                return replace(state, feasible=feasible)
        return replace(state, feasible=feasible, zero_weight=True)

    def _move_hand(self, robot_state: RobotState, targets: np.ndarray, obj: Pose,
                   substeps: int = 3) -> np.ndarray:
        """Rate-limited joint motion; a finger stops where it would push deeper into the object or table."""
        q = np.array(robot_state.hand_q)
        step = np.clip(targets - q, -self.task.hand_rate, self.task.hand_rate)
        if not np.any(step):
            return q
        wrist_R, wrist_p = robot_state._wrist
        if not self._near_object(wrist_p, obj) and wrist_p[2] > self.table.top + self._hand_reach:
            return q + step
        hand = self.robot.hand
        radii = hand.sphere_table[2]
        fidx = self._sphere_finger
        nj = self._nj

        def clearance(qv):
            centers = _hand_fk(hand, wrist_R, wrist_p, qv)[3]
            g = sphere_surface_query(self.asset, self._local(obj, centers), radii).gap
            return np.minimum(g, self.table.gap(centers, radii))

        before = clearance(q)
        frozen = np.zeros(hand.n_fingers, dtype=bool)
        for _ in range(substeps):
            trial = q.copy()
            for f in range(hand.n_fingers):
                if not frozen[f]:
                    trial[f * nj:(f + 1) * nj] += step[f * nj:(f + 1) * nj] / substeps
            after = clearance(trial)
            for f in range(hand.n_fingers):
                if frozen[f]:
                    continue
                m = fidx == f
                if np.min(after[m]) < min(np.min(before[m]), 0.0):
                    frozen[f] = True
                    trial[f * nj:(f + 1) * nj] = q[f * nj:(f + 1) * nj]
            q = trial
            before = clearance(q) if frozen.any() else after
            if frozen.all():
                break
        return q

    def opening(self, grip_q, hand_q) -> float:
        """Mean flexion given up since the grasp closed (radians, positive when opening)."""
        flex = self._flex_mask
        return float(np.mean(np.asarray(grip_q)[flex] - np.asarray(hand_q)[flex]))

    def _drop(self, obj: Pose) -> Pose:
        yaw = _heading(obj.orientation)
        p = np.asarray(obj.position)
        return Pose((p[0], p[1], self.table.top + self.asset.rest_height), quat_from_axis_angle((0, 0, 1), yaw))

    def step(self, state: EnvState, action: Action) -> StepResult:
        if state.done:
            raise RuntimeError("episode is done; call reset")
        if action.hand_targets.shape != (self.robot.hand.dof,):
            raise ValueError(f"hand targets must have {self.robot.hand.dof} entries")
        action = clamp_action(action, self.robot)
        rs = state.robot
        dq = ik_step(rs, action.wrist_delta)
        rs = rs.with_joints(arm_q=rs.arm_q + dq)
        obj, attached, grip = state.object_pose, state.attached, state.grip
        if attached:
            obj = pose_compose(rs.wrist_pose, grip)
        hq = self._move_hand(rs, action.hand_targets, obj)
        rs = rs.with_joints(hand_q=hq)
        grip_q = state.grip_q
        if attached and self.opening(grip_q, hq) > self.task.release_opening:
            attached, grip, grip_q, obj = False, None, None, self._drop(obj)
        nxt = replace(state, robot=rs, object_pose=obj, attached=attached, grip=grip, grip_q=grip_q,
                      step=state.step + 1)
        if not attached and self.grasp_predicate(nxt):
            nxt = replace(nxt, attached=True, grip=pose_compose(pose_inverse(rs.wrist_pose), obj),
                          grip_q=np.array(hq))
        stages = self.task.stages
        successes = list(nxt.successes)
        transition = False
        if self._stage_done(stages[nxt.stage], nxt):
            successes[nxt.stage] = True
            transition = True
        stage = nxt.stage + 1 if transition and nxt.stage + 1 < len(stages) else nxt.stage
        finished = transition and nxt.stage == len(stages) - 1
        done = finished or nxt.step >= self.task.horizon
        nxt = replace(nxt, stage=stage, successes=tuple(successes), done=done)
        reward = total_reward(_RewardView(self, nxt), action, stages[nxt.stage], self.reward_config)
        info = {f"{name}_success": ok for name, ok in zip(stages, successes)}
        info["success"] = finished or all(successes)
        info["zero_weight"] = nxt.zero_weight
        return StepResult(nxt, reward, transition, done, info)

    # ------------------------------------------------------------ observation

    def observe(self, state: EnvState) -> np.ndarray:
        w = state.robot.wrist_pose
        parts = [np.asarray(w.position), _canon(w.orientation), state.robot.hand_q,
                 np.asarray(state.object_pose.position), _canon(state.object_pose.orientation)]
        if self.guided:
            g = self.nearest_candidate(state)
            parts.append(np.zeros(7) if g is None else np.concatenate([g.position, _canon(g.orientation)]))
        onehot = np.zeros(3)
        onehot[state.stage] = 1.0
        parts.append(onehot)
        return np.concatenate(parts)


def _canon(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return -q if q[0] < 0 else q


def _heading(q) -> float:
    """Yaw of the object's local x axis projected onto the table plane."""
    x = quat_to_matrix(q)[:, 0]
    return float(np.arctan2(x[1], x[0]))


# ---------------------------------------------------------------- config files

_TASK_FIELDS = {
    "id": ("task_id", int), "object": ("object_kind", str), "affordance": ("affordance_label", str),
    "required_type": ("required_grasp_type", str), "type_mode": ("grasp_type_mode", str),
    "orient_frame": ("orient_frame", str), "horizon": ("horizon", int),
    "lift_height": ("lift_height", float), "orient_tolerance": ("orient_tolerance", float),
    "contact_threshold": ("contact_threshold", float), "release_opening": ("release_opening", float),
    "hand_rate": ("hand_rate", float), "retry_cap": ("retry_cap", int), "hover_height": ("hover_height", float),
    "approach_offset": ("approach_offset", float),
    "asset": ("asset_path", str), "candidates": ("candidate_path", str),
}
_RANGE_FIELDS = {"x_range": "x_range", "y_range": "y_range", "yaw_range": "yaw_range"}
_REWARD_FIELDS = {"w_a": float, "w_t": float, "w_p": float, "alpha": float, "grasp_mode": str,
                  "orient_sign_flip": bool, "pose_scale_translation": float, "pose_scale_rotation": float}


def task_from_config(cp: configparser.ConfigParser, base_dir: Path | None = None) -> TaskSpec:
    """Build a TaskSpec from the ``[task]`` and ``[reward]`` sections.

    Keys not given fall back to the defaults of the task id; relative
    asset/candidate paths resolve against ``base_dir``.
    """
    if "task" not in cp:
        raise ValueError("config has no [task] section")
    sec = cp["task"]
    if "id" not in sec:
        raise ValueError("[task] needs an id")
    kw: dict = {}
    for key, raw in sec.items():
        if key in _TASK_FIELDS:
            name, typ = _TASK_FIELDS[key]
            kw[name] = None if raw.strip().lower() == "none" else typ(raw)
        elif key in _RANGE_FIELDS:
            lo, hi = (float(v) for v in raw.split(","))
            kw[_RANGE_FIELDS[key]] = (lo, hi)
        elif key == "stages":
            kw["stages"] = tuple(s.strip() for s in raw.split(",") if s.strip())
        else:
            raise ValueError(f"unknown [task] key {key!r}")
    for key in ("asset_path", "candidate_path"):
        if kw.get(key) and base_dir is not None and not Path(kw[key]).is_absolute():
            kw[key] = str(Path(base_dir) / kw[key])
    rkw = {}
    if "reward" in cp:
        for key in cp["reward"]:
            if key not in _REWARD_FIELDS:
                raise ValueError(f"unknown [reward] key {key!r}")
            typ = _REWARD_FIELDS[key]
            rkw[key] = cp["reward"].getboolean(key) if typ is bool else typ(cp["reward"][key])
    task_id = kw.pop("task_id")
    return default_task(task_id, reward=RewardConfig(**rkw), **kw)


def load_task(path) -> TaskSpec:
    cp = configparser.ConfigParser()
    path = Path(path)
    if not cp.read(path, encoding="utf-8"):
        raise FileNotFoundError(f"cannot read task config {path}")
    return task_from_config(cp, path.parent)


def task_to_config(task: TaskSpec) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    inv = {v[0]: k for k, v in _TASK_FIELDS.items()}
    sec = {}
    for name, key in inv.items():
        val = getattr(task, name)
        sec[key] = "none" if val is None else repr(val) if isinstance(val, float) else str(val)
    sec["stages"] = ",".join(task.stages)
    for key in _RANGE_FIELDS:
        sec[key] = ",".join(repr(float(v)) for v in getattr(task, key))
    cp["task"] = sec
    cp["reward"] = {k: repr(getattr(task.reward, k)) if isinstance(getattr(task.reward, k), float)
                    else str(getattr(task.reward, k)) for k in _REWARD_FIELDS}
    return cp


def save_task(task: TaskSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        task_to_config(task).write(fh)
