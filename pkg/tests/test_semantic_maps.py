import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dexafford.geometry import PointCloud, Pose, random_quat
from dexafford.semantic_maps import (
    NO_CONTACT,
    ObjectAsset,
    affordance_target,
    build_contact_semantic_map,
    dump_asset,
    load_asset,
    make_cube,
    make_hammer,
    make_jug,
    make_object,
    make_sphere,
    parse_asset,
    save_asset,
)

HAND_LABELS = ("thumb", "index", "middle", "ring", "little", "palm")


def brute_map(hand_pts, hand_labels, obj_pts, thr):
    out = []
    for p in obj_pts:
        d = np.sqrt(((hand_pts - p) ** 2).sum(axis=1))
        j = min(range(len(d)), key=lambda i: (d[i], i))
        out.append(hand_labels[j] if d[j] <= thr else NO_CONTACT)
    return tuple(out)


def test_far_hand_no_contact():
    cube = make_cube(n_points=96)
    hand = np.full((10, 3), 1e6)
    m = build_contact_semantic_map(hand, ["thumb"] * 10, cube)
    assert set(m.labels) == {NO_CONTACT} and len(m) == 96


def test_single_thumb_point_on_object():
    cube = make_cube(n_points=96)
    i = 17
    hand = np.vstack([cube.points[i], [1.0, 1.0, 1.0]])
    m = build_contact_semantic_map(hand, ["thumb", "index"], cube)
    assert m.labels[i] == "thumb"


def test_empty_object_cloud_rejected():
    with pytest.raises(ValueError):
        build_contact_semantic_map(np.zeros((1, 3)), ["thumb"], PointCloud(np.zeros((0, 3))))


def test_contact_map_matches_all_pairs_oracle():
    rng = np.random.default_rng(0)
    for trial in range(30):
        obj = rng.uniform(-0.05, 0.05, size=(rng.integers(20, 200), 3))
        if trial % 3 == 0:  # quantized coordinates force exact ties
            obj = np.round(obj * 100) / 100
        hand = rng.uniform(-0.06, 0.06, size=(rng.integers(1, 60), 3))
        if trial % 3 == 0:
            hand = np.round(hand * 100) / 100
        labels = [HAND_LABELS[k] for k in rng.integers(0, 6, len(hand))]
        thr = float(rng.choice([0.005, 0.01, 0.02]))
        got = build_contact_semantic_map(hand, labels, PointCloud(obj), thr)
        assert got.labels == brute_map(hand, labels, obj, thr)


def test_contact_map_frame_covariant():
    rng = np.random.default_rng(1)
    obj = rng.uniform(-0.05, 0.05, size=(150, 3))
    hand = rng.uniform(-0.06, 0.06, size=(40, 3))
    labels = [HAND_LABELS[k] for k in rng.integers(0, 6, 40)]
    base = build_contact_semantic_map(hand, labels, PointCloud(obj), 0.015)
    for _ in range(10):
        T = Pose(rng.normal(size=3), random_quat(rng))
        R, t = T.rotation(), T.position
        moved = build_contact_semantic_map(hand @ R.T + t, labels, PointCloud(obj @ R.T + t), 0.015)
        assert moved.labels == base.labels


def test_cube_600_points_100_per_face():
    cube = make_cube(side=1.0, n_points=600)
    assert len(cube) == 600 and set(cube.labels) == {"grasp"}
    p = cube.points
    for ax in range(3):
        for sign in (1, -1):
            on = np.isclose(p[:, ax], 0.5 * sign, atol=1e-12)
            assert on.sum() == 100


def test_jug_handle_disjoint_from_body():
    jug = make_jug()
    assert set(jug.classes) == {"handle", "body", "spout"}
    h = jug.points[jug.region("handle")]
    b = jug.points[jug.region("body")]
    assert len(h) and len(b)
    d = np.sqrt(((h[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    assert d.min() > 0
    # handle points sit outside the body cylinder
    assert np.all(np.hypot(h[:, 0], h[:, 1]) > 0.045)


def test_cube_normals_outward():
    cube = make_cube()
    c = cube.points.mean(axis=0)
    assert np.all(np.einsum("ij,ij->i", cube.normals, cube.points - c) > 0)


@pytest.mark.parametrize("kind", ["cube", "jug", "hammer"])
def test_generated_normals_unit(kind):
    a = make_object(kind)
    assert len(a) == 2048
    assert np.allclose(np.linalg.norm(a.normals, axis=1), 1.0, atol=1e-12)


def test_hammer_classes():
    assert set(make_hammer().classes) == {"handle", "head"}


@pytest.mark.parametrize("bad", [dict(side=0.0), dict(side=-1.0)])
def test_bad_dimensions(bad):
    with pytest.raises(ValueError):
        make_cube(**bad)
    with pytest.raises(ValueError):
        make_jug(radius=-0.01)
    with pytest.raises(ValueError):
        make_object("teapot")


def test_cube_target_at_center():
    # square counts per face give a symmetric grid; other counts use a low-discrepancy fill
    t = affordance_target(make_cube(n_points=600), "grasp")
    assert np.linalg.norm(t.centroid) < 1e-12
    t = affordance_target(make_cube(), "grasp")
    assert np.linalg.norm(t.centroid) < 0.01 * 0.05


def test_jug_handle_target_inside_handle_bbox():
    jug = make_jug()
    t = affordance_target(jug, "handle")
    h = jug.points[jug.region("handle")]
    assert np.all(t.centroid >= h.min(axis=0)) and np.all(t.centroid <= h.max(axis=0))


@pytest.mark.parametrize("kind", ["cube", "jug", "hammer"])
def test_target_centroid_mean_oracle(kind):
    a = make_object(kind, n_points=300)
    for lab in a.classes:
        t = affordance_target(a, lab)
        pts = [a.points[i] for i in range(len(a)) if a.labels[i] == lab]
        oracle = np.array([sum(p[k] for p in pts) / len(pts) for k in range(3)])
        assert np.allclose(t.centroid, oracle, atol=1e-12)
        assert len(t.indices) == len(pts)


def test_target_unknown_label_lists_choices():
    with pytest.raises(ValueError, match="handle"):
        affordance_target(make_jug(), "blade")


def test_target_nearest_mode():
    cube = make_cube(n_points=96)
    t = affordance_target(cube, "grasp", mode="nearest", query=(1.0, 0, 0))
    assert t.centroid[0] == pytest.approx(0.025)


def _random_asset(rng, n):
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    labels = ("a", "b") * (n // 2) + ("a",) * (n % 2)
    return ObjectAsset("blob", PointCloud(rng.normal(size=(n, 3)), nrm), labels, ("a", "b"),
                       mass=float(rng.uniform(0.1, 1)), frames={"a": Pose(rng.normal(size=3), random_quat(rng))})


def test_asset_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    for n in (2, 7, 64):
        a = _random_asset(rng, n)
        save_asset(a, tmp_path / "a.txt")
        assert load_asset(tmp_path / "a.txt") == a
    j = make_jug(n_points=200)
    assert parse_asset(dump_asset(j)) == j


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2 ** 32 - 1))
def test_asset_round_trip_property(n, seed):
    a = _random_asset(np.random.default_rng(seed), n)
    assert parse_asset(dump_asset(a)) == a


def test_truncated_file_names_line():
    text = dump_asset(make_sphere(n_points=5))
    lines = text.splitlines()
    lines[-1] = lines[-1].rsplit(" ", 3)[0]
    with pytest.raises(ValueError, match=rf"line {len(lines)}"):
        parse_asset("\n".join(lines))


def test_count_mismatch():
    text = dump_asset(make_sphere(n_points=3))
    lines = text.splitlines()[:-1]
    with pytest.raises(ValueError, match="count mismatch"):
        parse_asset("\n".join(lines))


def test_label_count_mismatch():
    with pytest.raises(ValueError):
        ObjectAsset("x", PointCloud(np.zeros((3, 3)), np.tile([0, 0, 1.0], (3, 1))), ("a", "a"), ("a",))


def test_declared_region_must_be_nonempty():
    with pytest.raises(ValueError, match="empty"):
        ObjectAsset("x", PointCloud(np.zeros((2, 3)), np.tile([0, 0, 1.0], (2, 1))), ("a", "a"), ("a", "b"))
