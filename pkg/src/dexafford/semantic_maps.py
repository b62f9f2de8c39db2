"""Object assets with per-point affordance labels and contact semantic maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (
    NnIndex,
    PointCloud,
    Pose,
    format_real,
    quat_from_axis_angle,
)

NO_CONTACT = "no contact"
DEFAULT_CONTACT_THRESHOLD = 0.005


@dataclass(frozen=True, eq=False)
class ObjectAsset:
    name: str
    cloud: PointCloud
    labels: tuple[str, ...]
    classes: tuple[str, ...]
    mass: float = 0.1
    canonical_pose: Pose = field(default_factory=Pose)
    frames: dict[str, Pose] = field(default_factory=dict)

    def __post_init__(self):
        if self.cloud.normals is None:
            raise ValueError("object assets need surface normals")
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(labels) != len(self.cloud):
            raise ValueError(f"{len(labels)} labels for {len(self.cloud)} points")
        for c in self.classes:
            if not c or any(ch in c for ch in " ,\t\n="):
                raise ValueError(f"invalid affordance class name {c!r}")
        unknown = set(labels) - set(self.classes)
        if unknown:
            raise ValueError(f"labels {sorted(unknown)} not in declared classes {list(self.classes)}")
        empty = set(self.classes) - set(labels)
        if empty:
            raise ValueError(f"affordance regions {sorted(empty)} are empty")

    def __len__(self) -> int:
        return len(self.cloud)

    @property
    def points(self) -> np.ndarray:
        return self.cloud.points

    @property
    def normals(self) -> np.ndarray:
        return self.cloud.normals

    @property
    def rest_height(self) -> float:
        """Height of the local origin above the table when resting upright."""
        return float(-self.points[:, 2].min())

    def label_array(self) -> np.ndarray:
        return np.array(self.labels, dtype=object)

    def region(self, label: str) -> np.ndarray:
        return np.flatnonzero(self.label_array() == label)

    def index(self) -> NnIndex:
        return _index_for(self)

    def __eq__(self, other):
        if not isinstance(other, ObjectAsset):
            return NotImplemented
        return (self.name == other.name
                and np.array_equal(self.cloud.points, other.cloud.points)
                and np.array_equal(self.cloud.normals, other.cloud.normals)
                and self.labels == other.labels
                and self.classes == other.classes
                and self.mass == other.mass
                and self.canonical_pose == other.canonical_pose
                and self.frames == other.frames)

    __hash__ = object.__hash__


_INDEX_CACHE: dict[int, tuple[ObjectAsset, NnIndex]] = {}


def _index_for(asset: ObjectAsset) -> NnIndex:
    hit = _INDEX_CACHE.get(id(asset))
    if hit is not None and hit[0] is asset:
        return hit[1]
    idx = NnIndex(asset.cloud)
    _INDEX_CACHE[id(asset)] = (asset, idx)
    return idx


@dataclass(frozen=True)
class ContactSemanticMap:
    labels: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class AffordanceTarget:
    label: str
    centroid: np.ndarray
    indices: np.ndarray


# ---------------------------------------------------------------- maps

def nearest_with_ties(tree: cKDTree, points: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest stored point for every query, equal distances resolved to the lowest index."""
    d, idx = tree.query(queries, k=1)
    d = np.atleast_1d(d)
    idx = np.atleast_1d(idx).astype(int)
    counts = tree.query_ball_point(queries, d * (1 + 1e-9) + 1e-15, return_length=True)
    for i in np.flatnonzero(np.atleast_1d(counts) > 1):
        cand = np.array(tree.query_ball_point(queries[i], d[i] * (1 + 1e-9) + 1e-15), dtype=int)
        diff = points[cand] - queries[i]
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        order = np.lexsort((cand, dist))
        idx[i], d[i] = cand[order[0]], dist[order[0]]
    return d, idx


def build_contact_semantic_map(hand_points, hand_labels, obj: ObjectAsset | PointCloud,
                               contact_threshold: float = DEFAULT_CONTACT_THRESHOLD) -> ContactSemanticMap:
    """Label each object point with the hand part nearest to it, or ``"no contact"``.

    ``hand_points`` may be a :class:`PointCloud` or an (H,3) array in the same
    frame as the object points.
    """
    if contact_threshold <= 0:
        raise ValueError("contact threshold must be positive")
    opts = obj.points if isinstance(obj, (ObjectAsset, PointCloud)) else np.asarray(obj)
    if len(opts) == 0:
        raise ValueError("empty point cloud")
    hp = hand_points.points if isinstance(hand_points, PointCloud) else np.asarray(hand_points, dtype=float)
    if len(hp) == 0:
        return ContactSemanticMap((NO_CONTACT,) * len(opts))
    tree = cKDTree(hp)
    d, idx = nearest_with_ties(tree, hp, opts)
    labels = tuple(hand_labels[i] if di <= contact_threshold else NO_CONTACT
                   for di, i in zip(d, idx))
    return ContactSemanticMap(labels)


def affordance_target(asset: ObjectAsset, label: str, mode: str = "centroid",
                      query=None) -> AffordanceTarget:
    """Target position of an affordance region in the object frame.

    ``mode="nearest"`` returns the region point closest to ``query`` instead of
    the centroid.
    """
    if label not in asset.classes:
        raise ValueError(f"unknown affordance label {label!r}; available: {', '.join(asset.classes)}")
    idx = asset.region(label)
    pts = asset.points[idx]
    if mode == "centroid":
        c = pts.mean(axis=0)
    elif mode == "nearest":
        if query is None:
            raise ValueError("nearest mode needs a query point")
        d = np.linalg.norm(pts - np.asarray(query, dtype=float), axis=1)
        c = pts[int(np.argmin(d))]
    else:
        raise ValueError(f"unknown target mode {mode!r}")
    return AffordanceTarget(label, c, idx)


# ---------------------------------------------------------------- generators

def _r2(n: int) -> np.ndarray:
    """Deterministic low-discrepancy points in the unit square."""
    g = 1.32471795724474602596
    a = np.array([1.0 / g, 1.0 / g ** 2])
    k = np.arange(1, n + 1)[:, None]
    return (0.5 + a * k) % 1.0


def _square(n: int) -> np.ndarray:
    k = int(round(np.sqrt(n)))
    if k * k == n:
        g = (np.arange(k) + 0.5) / k
        u, v = np.meshgrid(g, g, indexing="ij")
        return np.stack([u.ravel(), v.ravel()], axis=1)
    return _r2(n)


def _split(total: int, weights) -> list[int]:
    w = np.asarray(weights, dtype=float)
    raw = w / w.sum() * total
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return [int(c) for c in counts]


def _box(center, half, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Points on the six faces of an axis-aligned box, split by face area."""
    cx, hx = np.asarray(center, dtype=float), np.asarray(half, dtype=float)
    faces = []
    for axis in range(3):
        for sign in (1.0, -1.0):
            faces.append((axis, sign))
    areas = [np.prod([2 * hx[a] for a in range(3) if a != ax]) for ax, _ in faces]
    counts = _split(n, areas)
    pts, nrm = [], []
    for (ax, sign), c in zip(faces, counts):
        if c == 0:
            continue
        uv = _square(c) * 2 - 1
        others = [a for a in range(3) if a != ax]
        p = np.zeros((c, 3))
        p[:, ax] = sign * hx[ax]
        p[:, others[0]] = uv[:, 0] * hx[others[0]]
        p[:, others[1]] = uv[:, 1] * hx[others[1]]
        nn = np.zeros((c, 3))
        nn[:, ax] = sign
        pts.append(p + cx)
        nrm.append(nn)
    return np.vstack(pts), np.vstack(nrm)


def _cylinder(radius: float, z0: float, z1: float, n: int, caps: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Closed cylinder about +z."""
    side = 2 * np.pi * radius * (z1 - z0)
    cap = np.pi * radius ** 2
    n_side, n_bot, n_top = _split(n, [side, cap, cap]) if caps else (n, 0, 0)
    pts, nrm = [], []
    uv = _r2(n_side)
    th = 2 * np.pi * uv[:, 0]
    z = z0 + (z1 - z0) * uv[:, 1]
    pts.append(np.stack([radius * np.cos(th), radius * np.sin(th), z], axis=1))
    nrm.append(np.stack([np.cos(th), np.sin(th), np.zeros_like(th)], axis=1))
    for count, zc, sign in ((n_bot, z0, -1.0), (n_top, z1, 1.0)):
        if count == 0:
            continue
        uv = _r2(count)
        r = radius * np.sqrt(uv[:, 0])
        th = 2 * np.pi * uv[:, 1]
        pts.append(np.stack([r * np.cos(th), r * np.sin(th), np.full(count, zc)], axis=1))
        nrm.append(np.tile([0.0, 0.0, sign], (count, 1)))
    return np.vstack(pts), np.vstack(nrm)


def _torus_segment(center, major: float, minor: float, phi_max: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Tube swept in the x-z plane around ``center`` for |phi| <= phi_max (phi from +x)."""
    uv = _r2(n)
    phi = (2 * uv[:, 0] - 1) * phi_max
    th = 2 * np.pi * uv[:, 1]
    ring = np.stack([np.cos(phi), np.zeros_like(phi), np.sin(phi)], axis=1)
    nrm = np.cos(th)[:, None] * ring + np.sin(th)[:, None] * np.array([0.0, 1.0, 0.0])
    pts = np.asarray(center) + major * ring + minor * nrm
    return pts, nrm


def _unit(n: np.ndarray) -> np.ndarray:
    return n / np.linalg.norm(n, axis=1, keepdims=True)


def make_cube(side: float = 0.05, n_points: int = 2048) -> ObjectAsset:
    if side <= 0 or n_points < 6:
        raise ValueError("cube needs a positive side and at least 6 points")
    pts, nrm = _box((0, 0, 0), (side / 2,) * 3, n_points)
    frames = {"grasp": Pose((0.0, 0.0, 0.0))}
    return ObjectAsset("cube", PointCloud(pts, _unit(nrm)), ("grasp",) * len(pts), ("grasp",),
                       mass=0.1, frames=frames)


def make_jug(radius: float = 0.045, height: float = 0.12, handle_major: float = 0.035,
             handle_minor: float = 0.008, n_points: int = 2048) -> ObjectAsset:
    if min(radius, height, handle_major, handle_minor) <= 0 or n_points < 30:
        raise ValueError("jug dimensions must be positive")
    spout_r, spout_len = 0.012, 0.03
    # areas decide the split but every region keeps a healthy share
    body_area = 2 * np.pi * radius * height + 2 * np.pi * radius ** 2
    handle_area = 2 * np.pi * handle_minor * handle_major * np.deg2rad(210)
    spout_area = 2 * np.pi * spout_r * spout_len
    n_body, n_handle, n_spout = _split(n_points, [body_area, max(handle_area, 0.25 * body_area),
                                                  max(spout_area, 0.08 * body_area)])
    b_pts, b_nrm = _cylinder(radius, 0.0, height, n_body)
    hc = np.array([radius + handle_major * 0.45, 0.0, 0.55 * height])
    # keep only the part of the ring outside the body wall
    phi_max = float(np.arccos(np.clip((radius + handle_minor - hc[0]) / handle_major, -1, 1)))
    h_pts, h_nrm = _torus_segment(hc, handle_major, handle_minor, phi_max, n_handle)
    s_pts, s_nrm = _cylinder(spout_r, 0.0, spout_len, n_spout, caps=False)
    tilt = quat_from_axis_angle((0, 1, 0), -np.pi / 4)
    rot = Pose((0, 0, 0), tilt).rotation()
    s_pts = s_pts @ rot.T + np.array([-radius - 0.004, 0.0, height - 0.01])
    s_nrm = s_nrm @ rot.T
    pts = np.vstack([b_pts, h_pts, s_pts])
    nrm = _unit(np.vstack([b_nrm, h_nrm, s_nrm]))
    labels = ("body",) * n_body + ("handle",) * n_handle + ("spout",) * n_spout
    frames = {
        "body": Pose((0.0, 0.0, height / 2)),
        "handle": Pose(hc + np.array([handle_major, 0, 0])),
        "spout": Pose((-radius - 0.02, 0.0, height + 0.01)),
    }
    return ObjectAsset("jug", PointCloud(pts, nrm), labels, ("body", "handle", "spout"),
                       mass=0.4, frames=frames)


def make_hammer(handle_length: float = 0.22, handle_radius: float = 0.014,
                head_size=(0.035, 0.10, 0.035), n_points: int = 2048) -> ObjectAsset:
    if handle_length <= 0 or handle_radius <= 0 or min(head_size) <= 0 or n_points < 12:
        raise ValueError("hammer dimensions must be positive")
    hx = np.asarray(head_size, dtype=float) / 2
    handle_area = 2 * np.pi * handle_radius * handle_length
    head_area = 8 * (hx[0] * hx[1] + hx[1] * hx[2] + hx[0] * hx[2])
    n_handle, n_head = _split(n_points, [handle_area, head_area])
    c_pts, c_nrm = _cylinder(handle_radius, -handle_length / 2, handle_length / 2, n_handle)
    # cylinder along z -> along x
    swap = np.array([[0, 0, 1], [0, 1, 0], [-1, 0, 0]], dtype=float)
    c_pts, c_nrm = c_pts @ swap.T, c_nrm @ swap.T
    head_c = np.array([handle_length / 2 + hx[0], 0.0, 0.0])
    h_pts, h_nrm = _box(head_c, hx, n_head)
    pts = np.vstack([c_pts, h_pts])
    nrm = _unit(np.vstack([c_nrm, h_nrm]))
    labels = ("handle",) * n_handle + ("head",) * n_head
    # the use pose rolls the hammer a quarter turn about its handle
    frames = {"handle": Pose((0.0, 0.0, 0.0), quat_from_axis_angle((1, 0, 0), np.pi / 2)),
              "head": Pose(head_c)}
    return ObjectAsset("hammer", PointCloud(pts, nrm), labels, ("handle", "head"),
                       mass=0.5, frames=frames)


def make_sphere(radius: float = 0.04, n_points: int = 1024) -> ObjectAsset:
    if radius <= 0 or n_points < 1:
        raise ValueError("sphere radius must be positive")
    k = np.arange(n_points) + 0.5
    z = 1 - 2 * k / n_points
    r = np.sqrt(1 - z * z)
    phi = np.pi * (3 - np.sqrt(5)) * np.arange(n_points)
    nrm = _unit(np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1))
    return ObjectAsset("sphere", PointCloud(radius * nrm, nrm), ("grasp",) * n_points, ("grasp",),
                       mass=0.1, frames={"grasp": Pose()})


def make_object(kind: str, **params) -> ObjectAsset:
    makers = {"cube": make_cube, "jug": make_jug, "hammer": make_hammer, "sphere": make_sphere}
    if kind not in makers:
        raise ValueError(f"unknown object kind {kind!r}; choose from {sorted(makers)}")
    return makers[kind](**params)


# ---------------------------------------------------------------- file I/O

def _v(x) -> str:
    return ",".join(format_real(c) for c in x)


def dump_asset(asset: ObjectAsset) -> str:
    lines = [f"asset v1 name={asset.name} mass={format_real(asset.mass)}",
             f"affordance classes={','.join(asset.classes)}",
             f"canonical position={_v(asset.canonical_pose.position)} quat={_v(asset.canonical_pose.orientation)}"]
    for label, fr in asset.frames.items():
        lines.append(f"frame label={label} position={_v(fr.position)} quat={_v(fr.orientation)}")
    lines.append(f"pointcloud v1 P={len(asset)} normals=1")
    for p, n, lab in zip(asset.points, asset.normals, asset.labels):
        lines.append(" ".join(format_real(v) for v in (*p, *n)) + " " + lab)
    return "\n".join(lines) + "\n"


def parse_asset(text: str) -> ObjectAsset:
    lines = text.splitlines()
    name, mass, classes, canon, frames = None, 0.1, None, Pose(), {}
    k = 0
    declared = None
    while k < len(lines):
        toks = lines[k].split()
        lineno = k + 1
        k += 1
        if not toks:
            continue
        try:
            kv = dict(t.split("=", 1) for t in toks if "=" in t)
            if toks[0] == "asset":
                name, mass = kv["name"], float(kv.get("mass", 0.1))
            elif toks[0] == "affordance":
                classes = tuple(c for c in kv["classes"].split(",") if c)
            elif toks[0] == "canonical":
                canon = Pose(_floats(kv["position"]), _floats(kv["quat"]))
            elif toks[0] == "frame":
                frames[kv["label"]] = Pose(_floats(kv["position"]), _floats(kv["quat"]))
            elif toks[0] == "pointcloud":
                declared = int(kv["P"])
                break
            else:
                raise ValueError("unknown header record")
        except (KeyError, ValueError) as exc:
            raise ValueError(f"line {lineno}: malformed header ({exc})") from None
    if name is None or classes is None or declared is None:
        raise ValueError(f"line {k}: incomplete asset header")
    rows, labels = [], []
    for j in range(k, len(lines)):
        toks = lines[j].split()
        if not toks:
            continue
        if len(toks) != 7:
            raise ValueError(f"line {j + 1}: expected 6 values and a label, got {len(toks)} tokens")
        try:
            rows.append([float(t) for t in toks[:6]])
        except ValueError:
            raise ValueError(f"line {j + 1}: malformed number") from None
        labels.append(toks[6])
    if len(rows) != declared:
        raise ValueError(f"point count mismatch: header declares P={declared}, file has {len(rows)}")
    arr = np.array(rows, dtype=float).reshape(-1, 6)
    return ObjectAsset(name, PointCloud(arr[:, :3], arr[:, 3:]), tuple(labels), classes,
                       mass=mass, canonical_pose=canon, frames=frames)


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(","))


def save_asset(asset: ObjectAsset, path) -> None:
    Path(path).write_text(dump_asset(asset), encoding="utf-8")


def load_asset(path) -> ObjectAsset:
    return parse_asset(Path(path).read_text(encoding="utf-8"))
