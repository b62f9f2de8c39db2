"""Run aggregation: smoothed curves, metrics tables, guided/unguided comparison, manifests."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

SR_COLUMNS = ("grasp_sr", "lift_sr", "orient_sr", "overall_sr")


# ---------------------------------------------------------------- smoothing

def gaussian_kernel(sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    half = int(math.ceil(4.0 * sigma))
    x = np.arange(-half, half + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_curve(values, sigma: float) -> np.ndarray:
    """Gaussian smoothing truncated at 4 sigma; edges renormalized over in-range kernel mass."""
    v = np.asarray(values, dtype=float).ravel()
    if len(v) == 0:
        raise ValueError("cannot smooth an empty series")
    k = gaussian_kernel(sigma)
    num = np.convolve(v, k, mode="same") if len(v) >= len(k) else _conv_same(v, k)
    den = np.convolve(np.ones_like(v), k, mode="same") if len(v) >= len(k) else _conv_same(np.ones_like(v), k)
    out = num / den
    # guard against rounding drift past the input range
    return np.clip(out, v.min(), v.max())


def _conv_same(v: np.ndarray, k: np.ndarray) -> np.ndarray:
    half = len(k) // 2
    full = np.convolve(v, k, mode="full")
    return full[half:half + len(v)]


def default_sigma(epochs: int) -> float:
    return max(2.0, epochs / 50.0)


# ---------------------------------------------------------------- metrics files

def write_metrics_csv(rows, path, columns) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k in ("epoch", "zero_weight_episodes", "steps") else float(v))
                    for k, v in r.items()})
    return out


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timestamps: dict = field(default_factory=dict)
    notes: dict = field(default_factory=dict)
    complete: bool = False
    version: str = __version__

    def add_input(self, path) -> None:
        self.inputs[str(path)] = file_digest(path)

    def add_output(self, path) -> None:
        self.outputs[str(path)] = file_digest(path)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"

    def save(self, directory) -> Path:
        p = Path(directory) / "manifest.json"
        p.write_text(self.to_json(), encoding="utf-8")
        return p

    @classmethod
    def load(cls, directory) -> RunManifest:
        data = json.loads((Path(directory) / "manifest.json").read_text(encoding="utf-8"))
        return cls(**data)

    def verify_inputs(self) -> list[str]:
        """Paths whose current digest differs from the recorded one."""
        bad = []
        for p, d in self.inputs.items():
            if not Path(p).exists() or file_digest(p) != d:
                bad.append(p)
        return bad


# ---------------------------------------------------------------- aggregation

@dataclass(frozen=True)
class SeedCurve:
    task: int
    variant: str
    seed: int
    rows: tuple
    minutes: float | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)


def final_value(series, frac: float = 0.1) -> float:
    """Mean over the last ``frac`` of the series (at least one point)."""
    s = np.asarray(series, dtype=float)
    if len(s) == 0:
        return float("nan")
    n = max(1, int(math.ceil(frac * len(s))))
    return float(s[-n:].mean())


def mean_curve(curves, column: str = "overall_sr") -> np.ndarray:
    cols = [c.column(column) for c in curves]
    n = min(len(c) for c in cols)
    return np.mean([c[:n] for c in cols], axis=0)


def epochs_to_reach(curve, threshold: float = 50.0) -> int | None:
    """First 1-based epoch whose value is >= threshold, or None."""
    hit = np.flatnonzero(np.asarray(curve, dtype=float) >= threshold)
    return int(hit[0]) + 1 if len(hit) else None


@dataclass(frozen=True)
class VariantSummary:
    task: int
    variant: str
    n_seeds: int
    overall_mean: float
    overall_std: float | None
    sub_means: dict
    minutes: float | None
    reach50: int | None


def _std(xs) -> float | None:
    return float(np.std(xs, ddof=1)) if len(xs) >= 2 else None


def summarize(curves) -> VariantSummary:
    curves = sorted(curves, key=lambda c: c.seed)
    if not curves:
        raise ValueError("no runs to summarize")
    tasks = {c.task for c in curves}
    variants = {c.variant for c in curves}
    if len(tasks) != 1 or len(variants) != 1:
        raise ValueError(f"cannot aggregate runs across tasks {sorted(tasks)} / variants {sorted(variants)}")
    finals = [final_value(c.column("overall_sr")) for c in curves]
    subs = {k: float(np.mean([final_value(c.column(k)) for c in curves])) for k in SR_COLUMNS}
    mins = [c.minutes for c in curves if c.minutes is not None]
    return VariantSummary(
        task=curves[0].task, variant=curves[0].variant, n_seeds=len(curves),
        overall_mean=float(np.mean(finals)), overall_std=_std(finals), sub_means=subs,
        minutes=float(np.mean(mins)) if mins else None,
        reach50=epochs_to_reach(mean_curve(curves)))


@dataclass(frozen=True)
class Comparison:
    task: int
    guided: float
    unguided: float
    delta: float
    guided_reach50: int | None
    unguided_reach50: int | None

    @property
    def guided_not_worse(self) -> bool:
        return self.delta >= 0

    @property
    def guided_reaches_no_later(self) -> bool:
        if self.guided_reach50 is None:
            return False
        return self.unguided_reach50 is None or self.guided_reach50 <= self.unguided_reach50


def compare(guided: VariantSummary, unguided: VariantSummary) -> Comparison:
    if guided.task != unguided.task:
        raise ValueError(f"task mismatch: guided task {guided.task} vs unguided task {unguided.task}")
    return Comparison(guided.task, guided.overall_mean, unguided.overall_mean,
                      guided.overall_mean - unguided.overall_mean,
                      guided.reach50, unguided.reach50)


def compare_report(guided_runs, unguided_runs) -> dict:
    """Per-task deltas plus the cross-task mean improvement.

    Inputs are iterables of SeedCurve; grouping is by task id and order does not matter.
    """
    g = _group(guided_runs)
    u = _group(unguided_runs)
    if not g or not u:
        raise ValueError("both run sets must be non-empty")
    if set(g) != set(u):
        raise ValueError(f"task mismatch: guided {sorted(g)} vs unguided {sorted(u)}")
    rows = [compare(summarize(g[t]), summarize(u[t])) for t in sorted(g)]
    mean_delta = float(np.mean([r.delta for r in rows]))
    return {"rows": rows, "mean_improvement": mean_delta,
            "guided_not_worse": all(r.guided_not_worse for r in rows)}


def _group(runs) -> dict:
    out: dict = {}
    for r in runs:
        out.setdefault(r.task, []).append(r)
    return out


def metrics_table(runs) -> list[VariantSummary]:
    groups: dict = {}
    for r in runs:
        groups.setdefault((r.task, r.variant), []).append(r)
    return [summarize(groups[k]) for k in sorted(groups)]


def _pct(x: float) -> str:
    return "n/a" if x != x else f"{x:.1f}"


def _pm(mean: float, std: float | None) -> str:
    return f"{_pct(mean)} ± {'n/a' if std is None else f'{std:.1f}'}"


def format_table(summaries, comparison: dict | None = None) -> str:
    """Deterministic metrics only; wall-clock minutes go through :func:`format_timing`."""
    lines = ["task,variant,seeds,overall_sr,grasp_sr,lift_sr,orient_sr,reach50_epoch"]
    for s in summaries:
        lines.append(",".join([
            str(s.task), s.variant, str(s.n_seeds), _pm(s.overall_mean, s.overall_std),
            _pct(s.sub_means["grasp_sr"]), _pct(s.sub_means["lift_sr"]),
            _pct(s.sub_means["orient_sr"]),
            "never" if s.reach50 is None else str(s.reach50)]))
    if comparison:
        lines.append("")
        lines.append("task,guided,unguided,delta,guided_reach50,unguided_reach50")
        for r in comparison["rows"]:
            reach = ["never" if x is None else str(x) for x in (r.guided_reach50, r.unguided_reach50)]
            lines.append(f"{r.task},{r.guided:.1f},{r.unguided:.1f},{r.delta:+.1f},{reach[0]},{reach[1]}")
        lines.append(f"mean_improvement,{comparison['mean_improvement']:+.1f}")
        lines.append(f"guided_not_worse,{int(comparison['guided_not_worse'])}")
    return "\n".join(lines) + "\n"


def format_timing(summaries) -> str:
    lines = ["task,variant,seeds,train_minutes"]
    for s in summaries:
        lines.append(f"{s.task},{s.variant},{s.n_seeds},{'n/a' if s.minutes is None else f'{s.minutes:.2f}'}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- curves

def curve_svg(series: dict, title: str, width: int = 480, height: int = 300,
              y_range=(0.0, 100.0)) -> str:
    """Minimal self-contained line chart; ``series`` maps label -> y values."""
    pad = 40
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
    n = max((len(v) for v in series.values()), default=1)
    lo, hi = y_range
    span = (hi - lo) or 1.0

    def xy(i, y):
        x = pad + (width - 2 * pad) * (i / max(1, n - 1))
        yy = height - pad - (height - 2 * pad) * ((y - lo) / span)
        return f"{x:.2f},{yy:.2f}"

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2:.0f}" y="20" text-anchor="middle" font-size="13">{_esc(title)}</text>',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
             'fill="none" stroke="#888"/>',
             f'<text x="{pad - 4}" y="{pad + 4}" text-anchor="end" font-size="10">{hi:g}</text>',
             f'<text x="{pad - 4}" y="{height - pad}" text-anchor="end" font-size="10">{lo:g}</text>',
             f'<text x="{width - pad}" y="{height - pad + 14}" text-anchor="end" font-size="10">epoch {n}</text>']
    for j, (label, ys) in enumerate(sorted(series.items())):
        c = colors[j % len(colors)]
        pts = " ".join(xy(i, y) for i, y in enumerate(ys))
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{pad + 6}" y="{pad + 14 + 13 * j}" font-size="11" fill="{c}">{_esc(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
