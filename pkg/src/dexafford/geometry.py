"""Rigid-body math, point clouds and nearest-neighbour lookup.

Quaternions are scalar-first ``(w, x, y, z)`` numpy arrays. Vectors are plain
length-3 float arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

Vec3 = np.ndarray
Quat = np.ndarray


def skew(psi) -> np.ndarray:
    """Cross-product matrix, ``skew(v) @ w == cross(v, w)``."""
    x, y, z = (float(c) for c in psi)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


# ---------------------------------------------------------------- quaternions

def quat_normalize(q) -> Quat:
    q = np.asarray(q, dtype=float)
    n2 = np.dot(q, q)
    if abs(n2 - 1.0) <= 4e-16:
        return q.copy()
    n = np.sqrt(n2)
    if not np.isfinite(n) or n == 0.0:
        raise ValueError("cannot normalize zero or non-finite quaternion")
    q = q / n
    # one Newton correction keeps |q| within a few ulp of 1
    return q * (1.5 - 0.5 * np.dot(q, q))


def quat_identity() -> Quat:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_dot(a, b) -> float:
    d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
    return float(min(1.0, max(-1.0, d)))


def quat_mul(a, b) -> Quat:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q) -> Quat:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_from_rotvec(v) -> Quat:
    v = np.asarray(v, dtype=float)
    theta = float(np.linalg.norm(v))
    if theta < 1e-12:
        return quat_normalize(np.array([1.0, 0.5 * v[0], 0.5 * v[1], 0.5 * v[2]]))
    axis = v / theta
    s = np.sin(0.5 * theta)
    return quat_normalize(np.array([np.cos(0.5 * theta), *(s * axis)]))


def quat_to_rotvec(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    s = float(np.linalg.norm(q[1:]))
    if s < 1e-12:
        return 2.0 * q[1:]
    theta = 2.0 * np.arctan2(s, q[0])
    return q[1:] / s * theta


def quat_from_axis_angle(axis, angle: float) -> Quat:
    axis = np.asarray(axis, dtype=float)
    return quat_from_rotvec(axis / np.linalg.norm(axis) * angle)


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m) -> Quat:
    m = np.asarray(m, dtype=float)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def quat_angle(a, b) -> float:
    """Rotation angle in [0, pi] between two orientations."""
    d = abs(quat_dot(a, b))
    return 2.0 * float(np.arccos(min(1.0, d)))


def random_quat(rng: np.random.Generator) -> Quat:
    return quat_normalize(rng.normal(size=4))


# ---------------------------------------------------------------------- poses

@dataclass(frozen=True)
class Pose:
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))
    orientation: np.ndarray = field(default_factory=quat_identity)

    def __post_init__(self):
        p = np.array(self.position, dtype=float).reshape(3)
        if not np.all(np.isfinite(p)):
            raise ValueError("pose position must be finite")
        p.flags.writeable = False
        q = quat_normalize(self.orientation)
        q.flags.writeable = False
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", q)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, 3], quat_from_matrix(m[:3, :3]))

    @classmethod
    def from_vector(cls, v) -> Pose:
        return cls(v[:3], v[3:7])

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.orientation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation()
        m[:3, 3] = self.position
        return m

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.orientation])

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (np.array_equal(self.position, other.position)
                and np.array_equal(self.orientation, other.orientation))

    def __hash__(self):
        return hash((self.position.tobytes(), self.orientation.tobytes()))


def pose_compose(a: Pose, b: Pose) -> Pose:
    """``a * b``: apply ``b`` first, then ``a``."""
    p = a.position + quat_to_matrix(a.orientation) @ b.position
    return Pose(p, quat_mul(a.orientation, b.orientation))


def pose_inverse(a: Pose) -> Pose:
    qi = quat_conj(a.orientation)
    return Pose(-(quat_to_matrix(qi) @ a.position), qi)


def pose_apply(a: Pose, p) -> np.ndarray:
    return a.position + quat_to_matrix(a.orientation) @ np.asarray(p, dtype=float)


def pose_apply_many(a: Pose, pts) -> np.ndarray:
    return np.asarray(pts, dtype=float) @ a.rotation().T + a.position


def pose_error(current: Pose, target: Pose) -> np.ndarray:
    """Twist-like 6-vector (translation, rotation vector) taking current to target."""
    dq = quat_mul(target.orientation, quat_conj(current.orientation))
    return np.concatenate([target.position - current.position, quat_to_rotvec(dq)])


def pose_distance(a: Pose, b: Pose, rot_weight: float = 0.1) -> float:
    """Translation distance plus ``rot_weight`` metres per radian of rotation."""
    return float(np.linalg.norm(a.position - b.position)
                 + rot_weight * quat_angle(a.orientation, b.orientation))


# ---------------------------------------------------------------- point cloud

@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.array(self.normals, dtype=float).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise ValueError(f"{len(nrm)} normals for {len(pts)} points")
            if len(nrm) and np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
                raise ValueError("normals must be unit length")
            nrm.flags.writeable = False
            object.__setattr__(self, "normals", nrm)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, pose: Pose) -> PointCloud:
        r = pose.rotation()
        pts = self.points @ r.T + pose.position
        nrm = None if self.normals is None else self.normals @ r.T
        if nrm is not None:
            nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
        return PointCloud(pts, nrm)


def format_real(x: float) -> str:
    return repr(float(x))


def dump_pointcloud(cloud: PointCloud) -> str:
    has_n = cloud.normals is not None
    lines = [f"pointcloud v1 P={len(cloud)} normals={int(has_n)}"]
    for i, p in enumerate(cloud.points):
        vals = list(p) + (list(cloud.normals[i]) if has_n else [])
        lines.append(" ".join(format_real(v) for v in vals))
    return "\n".join(lines) + "\n"


def parse_pointcloud(text: str) -> PointCloud:
    lines = text.splitlines()
    if not lines:
        raise ValueError("line 1: empty point cloud file")
    head = lines[0].split()
    try:
        if head[:2] != ["pointcloud", "v1"]:
            raise ValueError
        kv = dict(tok.split("=", 1) for tok in head[2:])
        count, has_n = int(kv["P"]), int(kv["normals"])
    except (ValueError, KeyError):
        raise ValueError(f"line 1: bad header {lines[0]!r}") from None
    width = 6 if has_n else 3
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise ValueError(f"declared P={count} but found {len(body)} point lines")
    rows = []
    for k, ln in enumerate(body, start=2):
        toks = ln.split()
        if len(toks) != width:
            raise ValueError(f"line {k}: expected {width} values, got {len(toks)}")
        try:
            rows.append([float(t) for t in toks])
        except ValueError:
            raise ValueError(f"line {k}: malformed number") from None
    arr = np.array(rows, dtype=float).reshape(-1, width)
    return PointCloud(arr[:, :3], arr[:, 3:] if has_n else None)


def save_pointcloud(cloud: PointCloud, path) -> None:
    Path(path).write_text(dump_pointcloud(cloud), encoding="utf-8")


def load_pointcloud(path) -> PointCloud:
    return parse_pointcloud(Path(path).read_text(encoding="utf-8"))


# ------------------------------------------------------------ nearest points

class NnIndex:
    """k-d tree over a point cloud with deterministic lowest-index tie-breaking."""

    def __init__(self, cloud: PointCloud | np.ndarray):
        pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
        self.points = np.asarray(pts, dtype=float).reshape(-1, 3)
        self._tree = cKDTree(self.points) if len(self.points) else None

    def __len__(self) -> int:
        return len(self.points)

    def _exact_dist(self, idx: np.ndarray, q: np.ndarray) -> np.ndarray:
        d = self.points[idx] - q
        return np.sqrt(np.einsum("ij,ij->i", d, d))

    def query(self, q, n: int = 1) -> list[tuple[int, float]]:
        if self._tree is None:
            raise ValueError("empty point cloud")
        if n < 1 or n > len(self.points):
            raise ValueError(f"n must be in [1, {len(self.points)}], got {n}")
        q = np.asarray(q, dtype=float)
        dk, _ = self._tree.query(q, k=n)
        radius = float(np.max(np.atleast_1d(dk)))
        # gather everything at the cut distance so ties resolve by index
        cand = np.array(self._tree.query_ball_point(q, radius * (1 + 1e-9) + 1e-12), dtype=int)
        if len(cand) < n:
            cand = np.arange(len(self.points))
        dist = self._exact_dist(cand, q)
        order = np.lexsort((cand, dist))[:n]
        return [(int(cand[i]), float(dist[i])) for i in order]

    def nearest(self, qs) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised single nearest neighbour; (distances, indices)."""
        if self._tree is None:
            raise ValueError("empty point cloud")
        d, i = self._tree.query(np.asarray(qs, dtype=float), k=1)
        return d, i


def nn_query(index: NnIndex, q, n: int = 1) -> list[tuple[int, float]]:
    return index.query(q, n)

