"""Kinematic arm + hand model built from revolute chains and collision spheres.

Hand frame convention (wrist/palm frame):
    +z  approach direction, out of the palm towards the object
    +x  closing direction; the four fingers sit at +x, the thumb opposes at -x
    +y  finger row

All joint values are radians and all lengths metres.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from . import _kernels
from .geometry import PointCloud, Pose, quat_from_axis_angle, quat_from_matrix

HAND_LABELS = ("no contact", "palm", "thumb", "index", "middle", "ring", "pinky")
FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")

MAX_WRIST_TRANSLATION = 0.05
MAX_WRIST_ROTATION = 0.2
IK_DAMPING = 1e-4


@dataclass(frozen=True)
class Joint:
    axis: tuple[float, float, float]
    offset: tuple[float, float, float]
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError(f"joint limits must satisfy lo < hi, got {self.lo}, {self.hi}")
        a = np.asarray(self.axis, dtype=float)
        n = np.linalg.norm(a)
        if n == 0:
            raise ValueError("joint axis must be non-zero")
        object.__setattr__(self, "axis", tuple(float(v) for v in a / n))
        object.__setattr__(self, "offset", tuple(float(v) for v in self.offset))


@dataclass(frozen=True)
class Sphere:
    link: str          # "palm", "<finger>.<joint>" or "arm.<joint>"
    center: tuple[float, float, float]
    radius: float
    label: str = "palm"


@dataclass(frozen=True)
class Finger:
    name: str
    joints: tuple[Joint, ...]
    tip: tuple[float, float, float]


@dataclass(frozen=True)
class HandModel:
    fingers: tuple[Finger, ...]
    spheres: tuple[Sphere, ...]

    def __post_init__(self):
        links = {"palm"} | {f"{f.name}.{j}" for f in self.fingers for j in range(len(f.joints))}
        for s in self.spheres:
            if s.link not in links:
                raise ValueError(f"sphere attached to unknown link {s.link!r}")
            if s.label not in HAND_LABELS[1:]:
                raise ValueError(f"sphere label {s.label!r} not a hand part")
            if s.radius <= 0:
                raise ValueError("sphere radius must be positive")
        if len({len(f.joints) for f in self.fingers}) != 1:
            raise ValueError("all fingers must have the same joint count")

    @property
    def n_fingers(self) -> int:
        return len(self.fingers)

    @property
    def dof(self) -> int:
        return sum(len(f.joints) for f in self.fingers)

    @cached_property
    def lo(self) -> np.ndarray:
        return np.array([j.lo for f in self.fingers for j in f.joints])

    @cached_property
    def hi(self) -> np.ndarray:
        return np.array([j.hi for f in self.fingers for j in f.joints])

    @cached_property
    def _arrays(self):
        nf, nj = self.n_fingers, len(self.fingers[0].joints)
        axes = np.array([[j.axis for j in f.joints] for f in self.fingers]).reshape(nf, nj, 3)
        offs = np.array([[j.offset for j in f.joints] for f in self.fingers]).reshape(nf, nj, 3)
        tips = np.array([f.tip for f in self.fingers])
        return axes, offs, tips

    @cached_property
    def sphere_table(self):
        """(frame index, centre offsets, radii, labels); frame -1 is the palm."""
        names = [f.name for f in self.fingers]
        nj = len(self.fingers[0].joints)
        frame = []
        for s in self.spheres:
            if s.link == "palm":
                frame.append(-1)
            else:
                fn, j = s.link.split(".")
                frame.append(names.index(fn) * nj + int(j))
        return (np.array(frame, dtype=int),
                np.array([s.center for s in self.spheres], dtype=float).reshape(-1, 3),
                np.array([s.radius for s in self.spheres], dtype=float),
                tuple(s.label for s in self.spheres))

    @cached_property
    def tip_sphere_index(self) -> np.ndarray:
        """Index into ``spheres`` of each finger's fingertip sphere."""
        nj = len(self.fingers[0].joints)
        frame, centers, _, _ = self.sphere_table
        out = []
        for m, f in enumerate(self.fingers):
            last = m * nj + nj - 1
            cand = [i for i in range(len(frame))
                    if frame[i] == last and np.allclose(centers[i], f.tip)]
            if not cand:
                raise ValueError(f"finger {f.name} has no fingertip sphere")
            out.append(cand[0])
        return np.array(out, dtype=int)

    def open_config(self) -> np.ndarray:
        return np.clip(np.zeros(self.dof), self.lo, self.hi)


@dataclass(frozen=True)
class ArmModel:
    base: Pose
    joints: tuple[Joint, ...]
    tool: Pose
    spheres: tuple[Sphere, ...] = ()

    def __post_init__(self):
        if len(self.joints) < 6:
            raise ValueError("arm needs at least 6 joints to control the full wrist pose")

    @property
    def dof(self) -> int:
        return len(self.joints)

    @cached_property
    def lo(self) -> np.ndarray:
        return np.array([j.lo for j in self.joints])

    @cached_property
    def hi(self) -> np.ndarray:
        return np.array([j.hi for j in self.joints])

    @cached_property
    def _arrays(self):
        return (self.base.rotation(), np.array(self.base.position),
                np.array([j.axis for j in self.joints]),
                np.array([j.offset for j in self.joints]),
                self.tool.rotation(), np.array(self.tool.position))


@dataclass(frozen=True)
class RobotModel:
    arm: ArmModel
    hand: HandModel
    home: tuple[float, ...] = ()

    @property
    def home_q(self) -> np.ndarray:
        if self.home:
            return np.array(self.home)
        return np.clip(np.zeros(self.arm.dof), self.arm.lo, self.arm.hi)


# ---------------------------------------------------------------- arm FK

def arm_frames(arm: ArmModel, q) -> tuple[np.ndarray, np.ndarray]:
    """Joint frames after each rotation: rotations (J,3,3), origins (J,3)."""
    R0, p0, axes, offs, _, _ = arm._arrays
    return _kernels.chain_frames(R0, p0, axes, offs, np.asarray(q, dtype=float))


def arm_wrist(arm: ArmModel, q) -> tuple[np.ndarray, np.ndarray]:
    Rw, pw, _ = _kernels.arm_wrist_jac(*arm._arrays, np.asarray(q, dtype=float))
    return Rw, pw


def arm_wrist_batch(arm: ArmModel, Q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Arm FK over configurations ``Q`` (B,J).

    Returns wrist rotations (B,3,3), wrist positions (B,3), joint rotations
    (B,J,3,3) and joint origins (B,J,3).
    """
    R0, p0, axes, offs, tool_R, tool_p = arm._arrays
    Rs, ps = _kernels.chain_frames_batch(R0, p0, axes, offs, np.ascontiguousarray(np.atleast_2d(Q), dtype=float))
    Rw = Rs[:, -1] @ tool_R
    pw = ps[:, -1] + Rs[:, -1] @ tool_p
    return Rw, pw, Rs, ps


def arm_sphere_centers(arm: ArmModel, Rs: np.ndarray, ps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World centres (B,S,3) and radii (S,) of arm collision spheres."""
    idx = np.array([int(s.link.split(".")[1]) for s in arm.spheres], dtype=int)
    off = np.array([s.center for s in arm.spheres], dtype=float).reshape(-1, 3)
    rad = np.array([s.radius for s in arm.spheres], dtype=float)
    centers = ps[:, idx] + np.einsum("bsij,sj->bsi", Rs[:, idx], off)
    return centers, rad


# ---------------------------------------------------------------- hand FK

def _hand_fk(hand: HandModel, wrist_R, wrist_p, hand_q):
    axes, offs, tips = hand._arrays
    frame, off, _, _ = hand.sphere_table
    return _kernels.hand_fk(np.asarray(wrist_R, dtype=float), np.asarray(wrist_p, dtype=float),
                            axes, offs, tips, np.asarray(hand_q, dtype=float), frame, off)


def hand_sphere_centers_batch(hand: HandModel, wrist_R, wrist_p, hand_Q) -> np.ndarray:
    """Sphere centres (B,S,3) for stacks of wrist frames and hand configurations."""
    axes, offs, _ = hand._arrays
    frame, off, _, _ = hand.sphere_table
    return _kernels.hand_spheres_batch(np.ascontiguousarray(wrist_R, dtype=float),
                                       np.ascontiguousarray(wrist_p, dtype=float),
                                       axes, offs, np.ascontiguousarray(np.atleast_2d(hand_Q), dtype=float),
                                       frame, off)


def hand_frames(hand: HandModel, wrist_R, wrist_p, hand_q) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Finger link frames and fingertips in the world.

    Returns rotations (F,J,3,3), origins (F,J,3), fingertips (F,3).
    """
    Rs, ps, tip, _ = _hand_fk(hand, wrist_R, wrist_p, hand_q)
    return Rs, ps, tip


def hand_sphere_centers(hand: HandModel, wrist_R, wrist_p, hand_q) -> tuple[np.ndarray, np.ndarray]:
    """World centres (S,3) and radii (S,) of the hand collision spheres."""
    *_, centers = _hand_fk(hand, wrist_R, wrist_p, hand_q)
    return centers, hand.sphere_table[2]


# ---------------------------------------------------------------- state

@dataclass(frozen=True, eq=False)
class RobotState:
    robot: RobotModel
    arm_q: np.ndarray
    hand_q: np.ndarray
    arm_qd: np.ndarray | None = None
    hand_qd: np.ndarray | None = None

    def __post_init__(self):
        aq = np.array(self.arm_q, dtype=float).ravel()
        hq = np.array(self.hand_q, dtype=float).ravel()
        if aq.shape != (self.robot.arm.dof,):
            raise ValueError(f"arm joint vector must have length {self.robot.arm.dof}, got {aq.size}")
        if hq.shape != (self.robot.hand.dof,):
            raise ValueError(f"hand joint vector must have length {self.robot.hand.dof}, got {hq.size}")
        aq = np.clip(aq, self.robot.arm.lo, self.robot.arm.hi)
        hq = np.clip(hq, self.robot.hand.lo, self.robot.hand.hi)
        aqd = np.zeros_like(aq) if self.arm_qd is None else np.array(self.arm_qd, dtype=float).ravel()
        hqd = np.zeros_like(hq) if self.hand_qd is None else np.array(self.hand_qd, dtype=float).ravel()
        for name, v in (("arm_q", aq), ("hand_q", hq), ("arm_qd", aqd), ("hand_qd", hqd)):
            v.flags.writeable = False
            object.__setattr__(self, name, v)

    @classmethod
    def home(cls, robot: RobotModel) -> RobotState:
        return cls(robot, robot.home_q, robot.hand.open_config())

    def with_joints(self, arm_q=None, hand_q=None, arm_qd=None, hand_qd=None) -> RobotState:
        return replace(self,
                       arm_q=self.arm_q if arm_q is None else arm_q,
                       hand_q=self.hand_q if hand_q is None else hand_q,
                       arm_qd=self.arm_qd if arm_qd is None else arm_qd,
                       hand_qd=self.hand_qd if hand_qd is None else hand_qd)

    @cached_property
    def _wrist(self):
        return arm_wrist(self.robot.arm, self.arm_q)

    @cached_property
    def wrist_pose(self) -> Pose:
        R, p = self._wrist
        return Pose(p, quat_from_matrix(R))

    @cached_property
    def _hand(self):
        R, p = self._wrist
        return _hand_fk(self.robot.hand, R, p, self.hand_q)

    @property
    def fingertips(self) -> np.ndarray:
        return self._hand[2]

    @property
    def hand_spheres(self) -> tuple[np.ndarray, np.ndarray]:
        return self._hand[3], self.robot.hand.sphere_table[2]

    def __eq__(self, other):
        if not isinstance(other, RobotState):
            return NotImplemented
        return (self.robot is other.robot
                and np.array_equal(self.arm_q, other.arm_q)
                and np.array_equal(self.hand_q, other.hand_q)
                and np.array_equal(self.arm_qd, other.arm_qd)
                and np.array_equal(self.hand_qd, other.hand_qd))


@dataclass(frozen=True)
class KinematicResult:
    wrist: Pose
    fingertips: np.ndarray
    arm_rotations: np.ndarray
    arm_origins: np.ndarray
    finger_rotations: np.ndarray
    finger_origins: np.ndarray


def forward_kinematics(state: RobotState) -> KinematicResult:
    arm = state.robot.arm
    Rs, ps = arm_frames(arm, state.arm_q)
    Rw = Rs[-1] @ arm.tool.rotation()
    pw = ps[-1] + Rs[-1] @ arm.tool.position
    fR, fp, tips = hand_frames(state.robot.hand, Rw, pw, state.hand_q)
    wrist = Pose(pw, quat_from_matrix(Rw))
    return KinematicResult(wrist, tips, Rs, ps, fR, fp)


# ---------------------------------------------------------------- Jacobian / IK

def wrist_jacobian_q(arm: ArmModel, q) -> np.ndarray:
    _, _, J = _kernels.arm_wrist_jac(*arm._arrays, np.asarray(q, dtype=float))
    return J


def wrist_jacobian(state: RobotState) -> np.ndarray:
    """Geometric Jacobian: rows (linear velocity; angular velocity)."""
    return wrist_jacobian_q(state.robot.arm, state.arm_q)


def cap_wrist_delta(delta, max_translation: float = MAX_WRIST_TRANSLATION,
                    max_rotation: float = MAX_WRIST_ROTATION) -> np.ndarray:
    d = np.array(delta, dtype=float).reshape(6)
    t, r = np.linalg.norm(d[:3]), np.linalg.norm(d[3:])
    if t > max_translation:
        d[:3] *= max_translation / t
    if r > max_rotation:
        d[3:] *= max_rotation / r
    return d


def damped_pinv_solve(J: np.ndarray, dx: np.ndarray, damping: float = IK_DAMPING) -> np.ndarray:
    JJt = J @ J.T
    if damping > 0:
        JJt = JJt + (damping ** 2) * np.eye(J.shape[0])
        return J.T @ np.linalg.solve(JJt, dx)
    return np.linalg.pinv(J) @ dx


def ik_step_q(arm: ArmModel, q, delta_wrist, damping: float = IK_DAMPING, cap: bool = True) -> np.ndarray:
    dx = cap_wrist_delta(delta_wrist) if cap else np.asarray(delta_wrist, dtype=float)
    J = wrist_jacobian_q(arm, q)
    dq = damped_pinv_solve(J, dx, damping)
    q = np.asarray(q, dtype=float)
    return np.clip(q + dq, arm.lo, arm.hi) - q


def ik_step(state: RobotState, delta_wrist, damping: float = IK_DAMPING) -> np.ndarray:
    """Arm joint increment for a wrist twist, joints kept within limits."""
    return ik_step_q(state.robot.arm, state.arm_q, delta_wrist, damping)


def solve_ik(arm: ArmModel, q0, target: Pose, max_iter: int = 200,
             pos_tol: float = 1e-3, rot_tol: float = 1e-2,
             damping: float = IK_DAMPING) -> tuple[np.ndarray, bool]:
    """Iterated damped least squares towards ``target``; returns (q, converged).

    Each iteration applies one capped ``ik_step`` toward the remaining pose error.
    """
    if damping <= 0:
        return _solve_ik_py(arm, q0, target, max_iter, pos_tol, rot_tol, damping)
    q, ok = _kernels.dls_ik(*arm._arrays, arm.lo, arm.hi, np.asarray(q0, dtype=float),
                            target.rotation(), np.asarray(target.position, dtype=float),
                            int(max_iter), float(pos_tol), float(rot_tol), float(damping),
                            MAX_WRIST_TRANSLATION, MAX_WRIST_ROTATION)
    return q, bool(ok)


def _solve_ik_py(arm, q0, target, max_iter, pos_tol, rot_tol, damping):
    q = np.clip(np.asarray(q0, dtype=float), arm.lo, arm.hi)
    Rt = target.rotation()
    for _ in range(max_iter):
        R, p = arm_wrist(arm, q)
        err = _wrist_error(R, p, Rt, target.position)
        if np.linalg.norm(err[:3]) < pos_tol and np.linalg.norm(err[3:]) < rot_tol:
            return q, True
        q = q + ik_step_q(arm, q, err, damping)
    R, p = arm_wrist(arm, q)
    err = _wrist_error(R, p, Rt, target.position)
    return q, bool(np.linalg.norm(err[:3]) < pos_tol and np.linalg.norm(err[3:]) < rot_tol)


def _wrist_error(R, p, Rt, pt) -> np.ndarray:
    dR = Rt @ R.T
    cos = np.clip((np.trace(dR) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    v = np.array([dR[2, 1] - dR[1, 2], dR[0, 2] - dR[2, 0], dR[1, 0] - dR[0, 1]])
    s = np.sin(theta)
    if s > 1e-9:
        rv = v / (2 * s) * theta
    elif theta < 1e-6:
        rv = 0.5 * v
    else:
        # theta near pi: axis from the symmetric part
        M = (dR + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(M)))
        axis = M[:, k] / np.sqrt(max(M[k, k], 1e-12))
        rv = axis / np.linalg.norm(axis) * theta
    return np.concatenate([pt - p, rv])


# ---------------------------------------------------------------- surface

@dataclass(frozen=True)
class HandSurface:
    cloud: PointCloud
    labels: tuple[str, ...]
    sphere_index: np.ndarray


def _fibonacci_dirs(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1.0 - 2.0 * k / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sample_hand_surface(state: RobotState, density: float) -> HandSurface:
    """Deterministic points on every hand collision sphere.

    Each sphere receives ``max(1, round(density * 2*pi*r))`` points spread by
    a Fibonacci lattice; normals point away from the sphere centre.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    centers, rad = state.hand_spheres
    _, _, _, labels = state.robot.hand.sphere_table
    pts, nrm, lab, idx = [], [], [], []
    for s, (c, r) in enumerate(zip(centers, rad)):
        n = max(1, int(round(density * 2.0 * np.pi * r)))
        d = _fibonacci_dirs(n)
        pts.append(c + r * d)
        nrm.append(d)
        lab.extend([labels[s]] * n)
        idx.extend([s] * n)
    return HandSurface(PointCloud(np.vstack(pts), np.vstack(nrm)), tuple(lab), np.array(idx, dtype=int))


# ---------------------------------------------------------------- defaults

def default_hand() -> HandModel:
    flex = (-0.2, 1.5)
    fingers = []
    spheres = [Sphere("palm", (x, y, 0.0), 0.02, "palm")
               for x in (-0.025, 0.0, 0.025) for y in (-0.02, 0.02)]
    rows = {"index": 0.03, "middle": 0.01, "ring": -0.01, "pinky": -0.03}
    # thumb: opposition twist about z, then flexion towards +x
    thumb_len = (0.045, 0.035, 0.028)
    fingers.append(Finger("thumb", (
        Joint((0, 0, 1), (-0.045, 0.0, 0.02), -0.5, 0.5),
        Joint((0, 1, 0), (0, 0, 0), *flex),
        Joint((0, 1, 0), (0, 0, thumb_len[0]), *flex),
        Joint((0, 1, 0), (0, 0, thumb_len[1]), *flex),
    ), (0.0, 0.0, thumb_len[2])))
    finger_len = (0.045, 0.035, 0.025)
    for name, y in rows.items():
        fingers.append(Finger(name, (
            Joint((1, 0, 0), (0.045, y, 0.02), -0.3, 0.3),
            Joint((0, -1, 0), (0, 0, 0), *flex),
            Joint((0, -1, 0), (0, 0, finger_len[0]), *flex),
            Joint((0, -1, 0), (0, 0, finger_len[1]), *flex),
        ), (0.0, 0.0, finger_len[2])))
    for f in fingers:
        lens = (thumb_len if f.name == "thumb" else finger_len)
        spheres.append(Sphere(f"{f.name}.1", (0.0, 0.0, lens[0] / 2), 0.009, f.name))
        spheres.append(Sphere(f"{f.name}.2", (0.0, 0.0, lens[1] / 2), 0.009, f.name))
        spheres.append(Sphere(f"{f.name}.3", (0.0, 0.0, lens[2]), 0.008, f.name))
    return HandModel(tuple(fingers), tuple(spheres))


def default_arm() -> ArmModel:
    z, y = (0, 0, 1), (0, 1, 0)
    lim_z, lim_y = (-2.9, 2.9), (-2.05, 2.05)
    joints = (
        Joint(z, (0, 0, 0.34), *lim_z),
        Joint(y, (0, 0, 0), *lim_y),
        Joint(z, (0, 0, 0.40), *lim_z),
        Joint(y, (0, 0, 0), *lim_y),
        Joint(z, (0, 0, 0.40), *lim_z),
        Joint(y, (0, 0, 0), *lim_y),
        Joint(z, (0, 0, 0.126), -3.0, 3.0),
    )
    spheres = (
        Sphere("arm.1", (0, 0, 0.2), 0.05),
        Sphere("arm.3", (0, 0, 0.0), 0.05),
        Sphere("arm.3", (0, 0, 0.2), 0.045),
        Sphere("arm.5", (0, 0, 0.0), 0.04),
        Sphere("arm.6", (0, 0, 0.05), 0.035),
    )
    return ArmModel(Pose((-0.55, 0.0, 0.0)), joints, Pose((0, 0, 0.03)), spheres)


HOME_WRIST = Pose((0.0, 0.0, 0.28), quat_from_axis_angle((0, 1, 0), np.pi))


def default_robot() -> RobotModel:
    arm = default_arm()
    seed = np.array([0.0, 0.65, 0.0, 1.6, 0.0, 0.9, 0.0])
    q, _ = solve_ik(arm, seed, HOME_WRIST, max_iter=500, pos_tol=1e-9, rot_tol=1e-9)
    return RobotModel(arm, default_hand(), tuple(float(v) for v in q))


# ---------------------------------------------------------------- file format

def _vec(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def dump_robot(robot: RobotModel) -> str:
    def v(x):
        return ",".join(repr(float(c)) for c in x)
    lines = ["robot v1",
             f"arm base position={v(robot.arm.base.position)} quat={v(robot.arm.base.orientation)}"]
    for i, j in enumerate(robot.arm.joints):
        lines.append(f"arm joint {i} axis={v(j.axis)} offset={v(j.offset)} limits={v((j.lo, j.hi))}")
    lines.append(f"arm tool offset={v(robot.arm.tool.position)} quat={v(robot.arm.tool.orientation)}")
    if robot.home:
        lines.append(f"arm home q={v(robot.home)}")
    for s in robot.arm.spheres:
        lines.append(f"sphere link={s.link} center={v(s.center)} radius={float(s.radius)!r} label={s.label}")
    for m, f in enumerate(robot.hand.fingers):
        lines.append(f"hand finger {m} name={f.name} tip={v(f.tip)}")
        for i, j in enumerate(f.joints):
            lines.append(f"hand finger {m} joint {i} axis={v(j.axis)} offset={v(j.offset)} limits={v((j.lo, j.hi))}")
    for s in robot.hand.spheres:
        lines.append(f"sphere link={s.link} center={v(s.center)} radius={float(s.radius)!r} label={s.label}")
    return "\n".join(lines) + "\n"


def parse_robot(text: str) -> RobotModel:
    base, tool, home = Pose(), Pose(), ()
    arm_joints: dict[int, Joint] = {}
    fingers: dict[int, dict] = {}
    arm_spheres, hand_spheres = [], []
    for k, line in enumerate(text.splitlines(), start=1):
        toks = line.split()
        if not toks or toks[0].startswith("#") or toks == ["robot", "v1"]:
            continue
        try:
            kv = dict(t.split("=", 1) for t in toks if "=" in t)
            if toks[:2] == ["arm", "base"]:
                base = Pose(_vec(kv["position"]), _vec(kv["quat"]))
            elif toks[:2] == ["arm", "joint"]:
                lo, hi = _vec(kv["limits"])
                arm_joints[int(toks[2])] = Joint(_vec(kv["axis"]), _vec(kv["offset"]), lo, hi)
            elif toks[:2] == ["arm", "tool"]:
                tool = Pose(_vec(kv["offset"]), _vec(kv.get("quat", "1,0,0,0")))
            elif toks[:2] == ["arm", "home"]:
                home = _vec(kv["q"])
            elif toks[:2] == ["hand", "finger"] and len(toks) > 3 and toks[3] == "joint":
                lo, hi = _vec(kv["limits"])
                f = fingers.setdefault(int(toks[2]), {"joints": {}})
                f["joints"][int(toks[4])] = Joint(_vec(kv["axis"]), _vec(kv["offset"]), lo, hi)
            elif toks[:2] == ["hand", "finger"]:
                f = fingers.setdefault(int(toks[2]), {"joints": {}})
                f["name"], f["tip"] = kv["name"], _vec(kv["tip"])
            elif toks[0] == "sphere":
                s = Sphere(kv["link"], _vec(kv["center"]), float(kv["radius"]), kv.get("label", "palm"))
                (arm_spheres if s.link.startswith("arm.") else hand_spheres).append(s)
            else:
                raise ValueError("unknown record")
        except (KeyError, ValueError, IndexError) as exc:
            raise ValueError(f"line {k}: {exc}: {line!r}") from None
    arm = ArmModel(base, tuple(arm_joints[i] for i in sorted(arm_joints)), tool, tuple(arm_spheres))
    hand = HandModel(tuple(
        Finger(f["name"], tuple(f["joints"][i] for i in sorted(f["joints"])), f["tip"])
        for _, f in sorted(fingers.items())), tuple(hand_spheres))
    return RobotModel(arm, hand, home)


def save_robot(robot: RobotModel, path) -> None:
    Path(path).write_text(dump_robot(robot), encoding="utf-8")


def load_robot(path) -> RobotModel:
    return parse_robot(Path(path).read_text(encoding="utf-8"))
