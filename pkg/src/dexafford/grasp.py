"""Grasp candidate synthesis by minimising force-closure and penalty energies."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (
    Pose,
    format_real,
    quat_from_matrix,
    quat_from_rotvec,
    quat_mul,
    quat_to_matrix,
    skew,
)
from .robot import HandModel, _hand_fk
from .semantic_maps import DEFAULT_CONTACT_THRESHOLD, ObjectAsset


@dataclass
class GraspCandidate:
    wrist: Pose
    hand_q: np.ndarray
    grasp_type: str = "unknown"
    e_dfc: float = 0.0
    e_ho: float = 0.0
    e_robot: float = 0.0
    contact_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    contact_normals: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    contact_labels: tuple[str, ...] = ()
    feasible: bool = False
    rejected: bool = False

    @property
    def energy(self) -> float:
        return self.e_dfc + self.e_ho + self.e_robot

    def same_as(self, other: GraspCandidate) -> bool:
        return (self.wrist == other.wrist
                and np.array_equal(self.hand_q, other.hand_q)
                and self.grasp_type == other.grasp_type
                and (self.e_dfc, self.e_ho, self.e_robot) == (other.e_dfc, other.e_ho, other.e_robot)
                and np.array_equal(self.contact_points, other.contact_points)
                and np.array_equal(self.contact_normals, other.contact_normals)
                and self.contact_labels == other.contact_labels
                and self.feasible == other.feasible
                and self.rejected == other.rejected)


@dataclass(frozen=True)
class SynthesisConfig:
    iterations: int = 3000
    t0: float = 1.0
    cooling: float = 0.995
    step_translation: float = 0.01
    step_rotation: float = 0.1
    step_joint: float = 0.1
    contact_threshold: float = DEFAULT_CONTACT_THRESHOLD
    w_dfc: float = 1.0
    w_ho: float = 2000.0
    w_robot: float = 2000.0
    standoff: float = 0.03
    energy_cap: float = 1.0
    seed: int = 0
    min_normal_z: float = -1.0
    attract: tuple[str, ...] = ("thumb", "index", "middle")
    support_z: float | None = None   # object-frame height of a supporting plane, if any

    def __post_init__(self):
        for name in ("iterations", "t0", "cooling", "step_translation", "step_rotation",
                     "step_joint", "contact_threshold", "energy_cap"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


# ---------------------------------------------------------------- energies

def grasp_matrix(points) -> np.ndarray:
    """6 x 3n stack of identity blocks over cross-product blocks."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    G = np.zeros((6, 3 * len(pts)))
    for k, p in enumerate(pts):
        G[:3, 3 * k:3 * k + 3] = np.eye(3)
        G[3:, 3 * k:3 * k + 3] = skew(p)
    return G


def dfc_energy(points, normals) -> float:
    """Squared residual wrench ``||G c||^2`` of frictionless unit contact normals."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    nrm = np.asarray(normals, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("need at least one contact")
    if len(pts) != len(nrm):
        raise ValueError("points and normals differ in length")
    if np.max(np.abs(np.linalg.norm(nrm, axis=1) - 1.0)) > 1e-6:
        raise ValueError("contact normals must be unit length")
    w = grasp_matrix(pts) @ nrm.reshape(-1)
    return float(w @ w)


def _fast_dfc(pts: np.ndarray, nrm: np.ndarray) -> float:
    f = nrm.sum(axis=0)
    t = np.cross(pts, nrm).sum(axis=0)
    return float(f @ f + t @ t)


@dataclass(frozen=True)
class SurfaceQuery:
    """Signed distances of hand spheres against an object point surface."""
    gap: np.ndarray        # sphere surface to object surface, negative when penetrating
    nearest: np.ndarray    # index of nearest object point per sphere


def sphere_surface_query(asset: ObjectAsset, centers: np.ndarray, radii: np.ndarray) -> SurfaceQuery:
    idx = asset.index()
    d, k = idx.nearest(centers)
    p = asset.points[k]
    n = asset.normals[k]
    along = np.einsum("ij,ij->i", centers - p, n)
    signed = np.where(along < 0, along, d)
    return SurfaceQuery(signed - radii, k)


def interaction_energy(hand: HandModel, wrist: Pose, hand_q, asset: ObjectAsset,
                       contact_threshold: float = DEFAULT_CONTACT_THRESHOLD,
                       attract: tuple[str, ...] = ("thumb", "index", "middle")) -> tuple[float, float]:
    """Hand-object and robot-constraint penalty energies (both >= 0).

    E_HO sums squared sphere penetration depths plus squared excess gaps of the
    ``attract`` fingertips beyond the contact threshold. E_Robot sums squared
    joint-limit violations and squared overlaps between spheres on different
    fingers.
    """
    q = np.asarray(hand_q, dtype=float)
    _, _, _, centers = _hand_fk(hand, wrist.rotation(), np.array(wrist.position), q)
    return _penalties(hand, centers, q, asset, contact_threshold, attract)[:2]


def _penalties(hand, centers, q, asset, thr, attract, support_z=None):
    frame, _, radii, labels = hand.sphere_table
    sq = sphere_surface_query(asset, centers, radii)
    pen = np.minimum(sq.gap, 0.0)
    e_pen = float(pen @ pen)
    if support_z is not None:
        # the table is stiffer than the point surface: ten times the depth
        below = 10.0 * np.minimum(centers[:, 2] - radii - support_z, 0.0)
        e_pen += float(below @ below)
    names = [f.name for f in hand.fingers]
    tips = hand.tip_sphere_index
    att = np.array([tips[names.index(n)] for n in attract if n in names], dtype=int)
    excess = np.maximum(sq.gap[att] - thr, 0.0)
    e_att = float(excess @ excess)
    viol = np.maximum(q - hand.hi, 0.0) + np.maximum(hand.lo - q, 0.0)
    e_lim = float(viol @ viol)
    e_self = _self_overlap(hand, centers)
    return e_pen + e_att, e_lim + e_self, sq


def _pair_mask(hand: HandModel) -> tuple[np.ndarray, np.ndarray]:
    cached = getattr(hand, "_pair_cache", None)
    if cached is not None:
        return cached
    frame, _, radii, labels = hand.sphere_table
    nj = len(hand.fingers[0].joints)
    ii, jj = [], []
    for a in range(len(labels)):
        for b in range(a + 1, len(labels)):
            if labels[a] == labels[b]:
                continue
            # palm spheres touch every proximal link by construction
            if "palm" in (labels[a], labels[b]):
                other = frame[b] if labels[a] == "palm" else frame[a]
                if other % nj <= 1:
                    continue
            ii.append(a)
            jj.append(b)
    out = (np.array(ii, dtype=int), np.array(jj, dtype=int))
    object.__setattr__(hand, "_pair_cache", out)
    return out


def _self_overlap(hand: HandModel, centers: np.ndarray) -> float:
    ii, jj = _pair_mask(hand)
    radii = hand.sphere_table[2]
    d = np.linalg.norm(centers[ii] - centers[jj], axis=1)
    ov = np.maximum(radii[ii] + radii[jj] - d, 0.0)
    return float(ov @ ov)


def extract_contacts(asset: ObjectAsset, centers: np.ndarray, hand: HandModel, sq: SurfaceQuery,
                     contact_threshold: float):
    """Contact points (object frame), inward surface normals and hand-part labels."""
    _, _, _, labels = hand.sphere_table
    hit = np.flatnonzero(sq.gap <= contact_threshold)
    pts = asset.points[sq.nearest[hit]]
    nrm = -asset.normals[sq.nearest[hit]]
    return pts, nrm, tuple(labels[i] for i in hit)


def _origin(asset: ObjectAsset) -> np.ndarray:
    return asset.points.mean(axis=0)


# ---------------------------------------------------------------- annealing

def _seed_pose(asset: ObjectAsset, rng: np.random.Generator, cfg: SynthesisConfig,
               classes) -> Pose:
    labels = asset.label_array()
    ok = asset.normals[:, 2] >= cfg.min_normal_z
    if classes:
        ok &= np.isin(labels, list(classes))
    pool = np.flatnonzero(ok)
    if len(pool) == 0:
        pool = np.arange(len(asset))
    k = int(pool[rng.integers(len(pool))])
    p, n = asset.points[k], asset.normals[k]
    z = -n
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    roll = rng.uniform(0, 2 * np.pi)
    y = np.cross(z, x)
    x, y = np.cos(roll) * x + np.sin(roll) * y, -np.sin(roll) * x + np.cos(roll) * y
    R = np.stack([x, y, z], axis=1)
    return Pose(p + n * cfg.standoff, quat_from_matrix(R))


class _Annealer:
    def __init__(self, asset, hand, cfg):
        self.asset, self.hand, self.cfg = asset, hand, cfg
        self.origin = _origin(asset)

    def energy(self, pos, quat, q):
        cfg = self.cfg
        _, _, _, centers = _hand_fk(self.hand, quat_to_matrix(quat), pos, q)
        e_ho, e_robot, sq = _penalties(self.hand, centers, q, self.asset, cfg.contact_threshold,
                                       cfg.attract, cfg.support_z)
        pts, nrm, _ = extract_contacts(self.asset, centers, self.hand, sq, cfg.contact_threshold)
        e_dfc = _fast_dfc(pts - self.origin, nrm) if len(pts) else 1.0
        total = cfg.w_dfc * e_dfc + cfg.w_ho * e_ho + cfg.w_robot * e_robot
        return total, (e_dfc, e_ho, e_robot), centers, sq

    def run(self, rng, classes) -> GraspCandidate:
        cfg, hand = self.cfg, self.hand
        seed = _seed_pose(self.asset, rng, cfg, classes)
        pos = np.array(seed.position)
        quat = np.array(seed.orientation)
        q = np.clip(np.where(hand.lo < 0, 0.3, hand.lo), hand.lo, hand.hi)
        # abduction joints start centred
        nj = len(hand.fingers[0].joints)
        q[0::nj] = 0.0
        e, parts, centers, sq = self.energy(pos, quat, q)
        best = (e, pos, quat, q, parts, centers, sq)
        T = cfg.t0
        for _ in range(cfg.iterations):
            scale = max(T / cfg.t0, 0.05) ** 0.5
            move = rng.integers(3)
            npos, nquat, nq = pos, quat, q
            if move == 0:
                npos = pos + rng.normal(0.0, cfg.step_translation * scale, 3)
            elif move == 1:
                nquat = quat_mul(quat_from_rotvec(rng.normal(0.0, cfg.step_rotation * scale, 3)), quat)
            else:
                mask = rng.random(len(q)) < 0.3
                nq = np.clip(q + mask * rng.normal(0.0, cfg.step_joint * scale, len(q)), hand.lo, hand.hi)
            ne, nparts, ncent, nsq = self.energy(npos, nquat, nq)
            if ne <= e or rng.random() < np.exp(-(ne - e) / T):
                pos, quat, q, e = npos, nquat, nq, ne
                if e < best[0]:
                    best = (e, pos, quat, q, nparts, ncent, nsq)
            T *= cfg.cooling
        e, pos, quat, q, parts, centers, sq = best
        pts, nrm, labs = extract_contacts(self.asset, centers, hand, sq, cfg.contact_threshold)
        e_dfc, e_ho, e_robot = parts
        cand = GraspCandidate(Pose(pos, quat), q.copy(), e_dfc=float(e_dfc),
                              e_ho=float(cfg.w_ho * e_ho), e_robot=float(cfg.w_robot * e_robot),
                              contact_points=pts, contact_normals=nrm, contact_labels=labs)
        cand.rejected = bool(len(pts) == 0 or cand.energy > cfg.energy_cap)
        return cand


def candidate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def synthesize(asset: ObjectAsset, hand: HandModel, config: SynthesisConfig, count: int,
               classes=None) -> list[GraspCandidate]:
    """Anneal ``count`` independent restarts; results sorted by total energy.

    ``classes`` restricts wrist seeds to the listed affordance regions.
    Energies on the candidates are the weighted terms, so their sum is the
    annealed objective.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    ann = _Annealer(asset, hand, config)
    cands = [ann.run(candidate_rng(config.seed, i), classes) for i in range(count)]
    order = sorted(range(count), key=lambda i: (cands[i].energy, i))
    return [cands[i] for i in order]


# ---------------------------------------------------------------- file I/O

def dump_candidates(cands: list[GraspCandidate]) -> str:
    lines = [f"grasps v1 n={len(cands)}"]
    for c in cands:
        vals = [*c.wrist.as_vector(), *c.hand_q]
        nums = " ".join(format_real(v) for v in vals)
        lines.append(f"{nums} type={c.grasp_type.replace(' ', '_')} "
                     f"e_dfc={format_real(c.e_dfc)} e_ho={format_real(c.e_ho)} "
                     f"e_robot={format_real(c.e_robot)} feasible={int(c.feasible)} "
                     f"rejected={int(c.rejected)} contacts={_dump_contacts(c)}")
    return "\n".join(lines) + "\n"


def _dump_contacts(c: GraspCandidate) -> str:
    if len(c.contact_points) == 0:
        return "-"
    rows = []
    for p, n, lab in zip(c.contact_points, c.contact_normals, c.contact_labels):
        rows.append(":".join([lab, *(format_real(v) for v in (*p, *n))]))
    return ";".join(rows)


def parse_candidates(text: str, hand_dof: int = 20) -> list[GraspCandidate]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("grasps v1"):
        raise ValueError("line 1: expected 'grasps v1 n=<count>' header")
    try:
        n = int(lines[0].split("n=")[1])
    except (IndexError, ValueError):
        raise ValueError("line 1: bad candidate count") from None
    out = []
    body = [(k, ln) for k, ln in enumerate(lines[1:], start=2) if ln.strip()]
    if len(body) != n:
        raise ValueError(f"header declares n={n} but file has {len(body)} records")
    for k, ln in body:
        toks = ln.split()
        try:
            nums = [float(t) for t in toks[:7 + hand_dof]]
            kv = dict(t.split("=", 1) for t in toks[7 + hand_dof:])
            pts, nrm, labs = [], [], []
            if kv.get("contacts", "-") != "-":
                for rec in kv["contacts"].split(";"):
                    parts = rec.split(":")
                    labs.append(parts[0])
                    v = [float(x) for x in parts[1:]]
                    pts.append(v[:3])
                    nrm.append(v[3:])
            c = GraspCandidate(Pose.from_vector(np.array(nums[:7])), np.array(nums[7:]),
                               grasp_type=kv["type"], e_dfc=float(kv["e_dfc"]),
                               e_ho=float(kv["e_ho"]), e_robot=float(kv["e_robot"]),
                               contact_points=np.array(pts, dtype=float).reshape(-1, 3),
                               contact_normals=np.array(nrm, dtype=float).reshape(-1, 3),
                               contact_labels=tuple(labs),
                               feasible=kv["feasible"] == "1", rejected=kv.get("rejected", "0") == "1")
        except (KeyError, ValueError, IndexError) as exc:
            raise ValueError(f"line {k}: malformed candidate record ({exc})") from None
        if len(c.hand_q) != hand_dof:
            raise ValueError(f"line {k}: expected {hand_dof} joint values")
        out.append(c)
    return out


def save_candidates(cands, path) -> None:
    Path(path).write_text(dump_candidates(cands), encoding="utf-8")


def load_candidates(path, hand_dof: int = 20) -> list[GraspCandidate]:
    return parse_candidates(Path(path).read_text(encoding="utf-8"), hand_dof)


def with_type(c: GraspCandidate, grasp_type: str) -> GraspCandidate:
    return replace(c, grasp_type=grasp_type)
