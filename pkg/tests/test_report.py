import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dexafford.cli import overall_sr
from dexafford.report import (
    RunManifest,
    SeedCurve,
    compare_report,
    curve_svg,
    epochs_to_reach,
    final_value,
    format_table,
    format_timing,
    gaussian_kernel,
    metrics_table,
    read_metrics_csv,
    smooth_curve,
    write_metrics_csv,
)


def oracle_smooth(v, sigma):
    """Direct O(n*k) truncated Gaussian average, renormalized at the edges."""
    half = int(math.ceil(4 * sigma))
    out = []
    for i in range(len(v)):
        num = den = 0.0
        for j in range(max(0, i - half), min(len(v), i + half + 1)):
            w = math.exp(-0.5 * ((j - i) / sigma) ** 2)
            num += w * v[j]
            den += w
        out.append(num / den)
    return np.array(out)


def test_smooth_constant_unchanged():
    assert np.allclose(smooth_curve(np.full(40, 37.5), 3.0), 37.5, rtol=0, atol=1e-12)


def test_kernel_sums_to_one():
    for s in (0.5, 2.0, 7.3):
        k = gaussian_kernel(s)
        assert k.sum() == pytest.approx(1.0, abs=1e-15) and np.array_equal(k, k[::-1])


def test_impulse_response_interior_sums_to_one():
    v = np.zeros(101)
    v[50] = 1.0
    out = smooth_curve(v, 4.0)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("n,sigma", [(80, 2.0), (10, 3.0), (3, 5.0), (1, 1.0), (200, 4.0)])
def test_smooth_vs_direct_oracle(n, sigma):
    v = np.random.default_rng(n).uniform(0, 100, n)
    assert np.allclose(smooth_curve(v, sigma), oracle_smooth(v, sigma), rtol=0, atol=1e-12 * 100)


@settings(max_examples=100)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=60), st.floats(0.3, 10))
def test_smooth_within_input_range(values, sigma):
    out = smooth_curve(values, sigma)
    assert out.min() >= min(values) and out.max() <= max(values)


def test_smooth_rejects_bad_input():
    with pytest.raises(ValueError):
        smooth_curve([], 2.0)
    with pytest.raises(ValueError):
        smooth_curve([1.0], 0.0)


def test_success_rate_example():
    assert overall_sr([1, 0, 1, 1]) == 75.0
    with pytest.raises(ValueError):
        overall_sr([])


def test_final_value_and_reach():
    s = list(range(1, 21))        # last 10% = last two points
    assert final_value(s) == 19.5
    assert final_value([4.0]) == 4.0
    assert math.isnan(final_value([]))
    assert epochs_to_reach([0, 10, 49.9, 50, 80]) == 4
    assert epochs_to_reach([0, 10]) is None


def _curve(task, variant, seed, overall, minutes=None):
    rows = tuple({"epoch": i + 1, "grasp_sr": v, "lift_sr": v, "orient_sr": float("nan"), "overall_sr": v}
                 for i, v in enumerate(overall))
    return SeedCurve(task, variant, seed, rows, minutes)


def test_compare_report_example_delta():
    g = [_curve(2, "guided", 0, [65.6] * 10)]
    u = [_curve(2, "unguided", 0, [37.9] * 10)]
    rep = compare_report(g, u)
    assert rep["rows"][0].delta == pytest.approx(27.7, abs=1e-9)
    assert rep["mean_improvement"] == pytest.approx(27.7, abs=1e-9) and rep["guided_not_worse"]


def test_compare_identical_runs_zero():
    runs = [_curve(1, "guided", s, np.linspace(0, 90, 20) + s) for s in range(3)]
    unguided = [SeedCurve(1, "unguided", r.seed, r.rows) for r in runs]
    rep = compare_report(runs, unguided)
    assert rep["mean_improvement"] == 0.0
    r = rep["rows"][0]
    assert r.guided_reach50 == r.unguided_reach50 and r.guided_reaches_no_later


def test_compare_task_mismatch():
    with pytest.raises(ValueError, match="task mismatch"):
        compare_report([_curve(1, "guided", 0, [1.0])], [_curve(2, "unguided", 0, [1.0])])
    with pytest.raises(ValueError):
        compare_report([], [_curve(2, "unguided", 0, [1.0])])


def test_compare_permutation_invariant():
    rng = np.random.default_rng(0)
    g = [_curve(t, "guided", s, rng.uniform(0, 100, 15)) for t in (1, 2) for s in range(3)]
    u = [_curve(t, "unguided", s, rng.uniform(0, 100, 15)) for t in (1, 2) for s in range(3)]
    a = compare_report(g, u)
    b = compare_report([g[i] for i in rng.permutation(6)], [u[i] for i in rng.permutation(6)])
    assert a == b


def test_metrics_table_groups_and_formats():
    runs = [_curve(1, v, s, [10.0 * s, 60.0], minutes=1.5) for v in ("guided", "unguided") for s in range(2)]
    table = metrics_table(runs)
    assert [(s.task, s.variant, s.n_seeds) for s in table] == [(1, "guided", 2), (1, "unguided", 2)]
    text = format_table(table)
    assert text.splitlines()[1].startswith("1,guided,2,60.0 ± 0.0")
    assert ",n/a," in text    # NaN orient column
    assert "minutes" not in text
    assert format_timing(table).splitlines()[1:] == ["1,guided,2,1.50", "1,unguided,2,1.50"]


def test_metrics_csv_round_trip(tmp_path):
    rows = [{"epoch": 1, "overall_sr": 12.5, "steps": 30}, {"epoch": 2, "overall_sr": 0.1 + 0.2, "steps": 31}]
    p = tmp_path / "m.csv"
    write_metrics_csv(rows, p, ["epoch", "overall_sr", "steps"])
    assert read_metrics_csv(p) == rows


def test_manifest_detects_changed_input(tmp_path):
    f = tmp_path / "in.txt"
    f.write_text("a")
    m = RunManifest("train", {"x": 1}, [0])
    m.add_input(f)
    m.save(tmp_path)
    back = RunManifest.load(tmp_path)
    assert back.verify_inputs() == []
    f.write_text("b")
    assert back.verify_inputs() == [str(f)]


def test_svg_well_formed():
    import xml.etree.ElementTree as ET

    root = ET.fromstring(curve_svg({"guided": [0, 50, 100], "a<b": [10, 20]}, "t & u"))
    assert root.tag.endswith("svg") and len([e for e in root if e.tag.endswith("polyline")]) == 2
