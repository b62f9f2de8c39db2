"""Command-line harness: ``dexafford <command> --config <path> [--seed N] [--out DIR]``.

Every command writes into its own directory under ``--out`` together with a
``manifest.json``. The manifest is written first with ``complete: false`` and
rewritten at the end, so an interrupted command never leaves unmarked output.

Layout::

    assets/<kind>.txt                    gen-assets
    synth/<kind>/candidates.txt          synth
    classify/<kind>/candidates.txt       classify (plus labels.txt)
    filter/task<k>/candidates.txt        filter
    runs/task<k>/<variant>/<seed>/       train (metrics.csv, timing.csv, checkpoints)
    eval/task<k>/<variant>/<seed>/       evaluate
    report/                              report
"""

from __future__ import annotations

import argparse
import configparser
import datetime as _dt
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import classify_grasp, format_classification
from .env import ManipulationEnv, TaskSpec, decode_action, task_from_config
from .grasp import SynthesisConfig, load_candidates, save_candidates, synthesize
from .policy import (
    METRIC_COLUMNS,
    TrainConfig,
    episode_seed,
    format_normalizer,
    load_checkpoint,
    parse_normalizer,
    rollout,
    save_checkpoint,
    train_seed,
)
from .report import (
    RunManifest,
    SeedCurve,
    compare_report,
    final_value,
    curve_svg,
    default_sigma,
    format_table,
    format_timing,
    metrics_table,
    read_metrics_csv,
    smooth_curve,
    write_metrics_csv,
)
from .robot import default_hand, default_robot
from .semantic_maps import load_asset, make_object, save_asset

ASSET_KINDS = ("cube", "jug", "hammer")
EVAL_KEY = 2_000_003


class CliError(Exception):
    """Bad input; reported as a one-line diagnostic with a nonzero exit."""


# ---------------------------------------------------------------- config helpers

def read_config(path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"config not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise CliError(f"invalid config {path}: {exc.message.splitlines()[0]}") from None
    return cp


def _list(raw: str) -> list[str]:
    return [s.strip() for s in raw.split(",") if s.strip()]


def _ints(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in _list(raw))
    except ValueError:
        raise CliError(f"expected a comma-separated integer list, got {raw!r}") from None


def _section(cp, name: str):
    if name not in cp:
        raise CliError(f"config has no [{name}] section")
    return cp[name]


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _snapshot(cp) -> dict:
    return {s: dict(cp[s]) for s in cp.sections()}


class _Manifested:
    """Write an incomplete manifest on entry and the final one on success."""

    def __init__(self, directory: Path, manifest: RunManifest):
        self.dir = directory
        self.m = manifest

    def __enter__(self) -> RunManifest:
        self.dir.mkdir(parents=True, exist_ok=True)
        self.m.timestamps["start"] = _now()
        self.m.save(self.dir)
        return self.m

    def __exit__(self, exc_type, exc, tb):
        self.m.timestamps["end"] = _now()
        self.m.complete = exc_type is None
        self.m.save(self.dir)
        return False


def load_task(cp) -> TaskSpec:
    try:
        return task_from_config(cp)
    except (ValueError, TypeError) as exc:
        raise CliError(f"invalid [task]/[reward]: {exc}") from None


def train_config(cp, guided: bool, seeds=None) -> TrainConfig:
    sec = _section(cp, "train")
    kw: dict = {}
    casts = {"algorithm": str, "gamma": float, "epochs": int, "episodes_per_epoch": int,
             "eval_episodes": int, "batch_size": int, "clip": float, "learning_rate": float,
             "update_passes": int, "init_log_std": float, "cem_population": int,
             "cem_elite_frac": float, "cem_init_std": float, "checkpoint_every": int}
    for key, raw in sec.items():
        if key in casts:
            try:
                kw[key] = casts[key](raw)
            except ValueError:
                raise CliError(f"[train] {key}: cannot parse {raw!r}") from None
        elif key == "hidden":
            kw["hidden"] = _ints(raw)
        elif key == "seeds":
            kw["seeds"] = _ints(raw)
        elif key != "variants":
            raise CliError(f"unknown [train] key {key!r}")
    if seeds is not None:
        kw["seeds"] = tuple(seeds)
    try:
        return TrainConfig(guided=guided, **kw)
    except ValueError as exc:
        raise CliError(f"invalid [train]: {exc}") from None


def variants(cp) -> list[str]:
    names = _list(_section(cp, "train").get("variants", "guided, unguided"))
    for v in names:
        if v not in ("guided", "unguided"):
            raise CliError(f"unknown variant {v!r} (use guided or unguided)")
    return names


def variant_dir(name: str, algorithm: str) -> str:
    return f"{name}-{algorithm}"


# ---------------------------------------------------------------- scene helpers

def asset_path(out: Path, task: TaskSpec) -> Path:
    return Path(task.asset_path) if task.asset_path else out / "assets" / f"{task.object_kind}.txt"


def candidate_path(out: Path, task: TaskSpec) -> Path:
    return Path(task.candidate_path) if task.candidate_path else out / "classify" / task.object_kind / "candidates.txt"


def _need(path: Path, producer: str) -> Path:
    if not path.is_file():
        raise CliError(f"missing input {path} (run `dexafford {producer}` first)")
    return path


def task_candidates(cands, task: TaskSpec) -> list:
    """Candidates usable for a task: not rejected and, when a grasp type is required, of that type."""
    keep = [c for c in cands if not c.rejected]
    if task.required_grasp_type is not None:
        keep = [c for c in keep if c.grasp_type == task.required_grasp_type]
    return keep


def build_env(out: Path, task: TaskSpec, guided: bool, manifest: RunManifest | None = None):
    a_path = _need(asset_path(out, task), "gen-assets")
    asset = load_asset(a_path)
    cands = []
    if guided:
        c_path = _need(candidate_path(out, task), "classify")
        cands = task_candidates(load_candidates(c_path), task)
        if not cands:
            raise CliError(f"{c_path}: no usable candidates for task {task.task_id}")
        if manifest is not None:
            manifest.add_input(c_path)
    if manifest is not None:
        manifest.add_input(a_path)
    robot = default_robot()
    return ManipulationEnv(task, robot, asset, cands, guided=guided), robot


# ---------------------------------------------------------------- commands

def cmd_gen_assets(cp, out: Path, seed):
    kinds = _list(cp["assets"].get("objects", ",".join(ASSET_KINDS))) if "assets" in cp else list(ASSET_KINDS)
    d = out / "assets"
    with _Manifested(d, RunManifest("gen-assets", _snapshot(cp), [])) as m:
        for kind in kinds:
            try:
                asset = make_object(kind)
            except ValueError as exc:
                raise CliError(str(exc)) from None
            p = d / f"{kind}.txt"
            save_asset(asset, p)
            m.add_output(p)
    print(f"wrote {len(kinds)} assets to {d}")


def synthesis_config(cp, kind: str, seed) -> tuple[SynthesisConfig, tuple | None]:
    sec = _section(cp, "synth")
    kw: dict = {}
    for key in ("iterations",):
        if key in sec:
            kw[key] = int(sec[key])
    for key in ("energy_cap", "contact_threshold", "cooling", "t0"):
        if key in sec:
            kw[key] = float(sec[key])
    kw["seed"] = int(sec.get("seed", "0")) if seed is None else int(seed)
    classes = None
    sub = f"synth.{kind}"
    if sub in cp:
        if "min_normal_z" in cp[sub]:
            kw["min_normal_z"] = float(cp[sub]["min_normal_z"])
        if "classes" in cp[sub]:
            classes = tuple(_list(cp[sub]["classes"]))
    return SynthesisConfig(**kw), classes


def cmd_synth(cp, out: Path, seed):
    sec = _section(cp, "synth")
    kinds = _list(sec.get("objects", ""))
    if not kinds:
        raise CliError("[synth] objects is empty")
    count = int(sec.get("count", "16"))
    for kind in kinds:
        d = out / "synth" / kind
        with _Manifested(d, RunManifest("synth", _snapshot(cp), [seed])) as m:
            a_path = _need(out / "assets" / f"{kind}.txt", "gen-assets")
            asset = load_asset(a_path)
            m.add_input(a_path)
            try:
                cfg, classes = synthesis_config(cp, kind, seed)
            except ValueError as exc:
                raise CliError(f"[synth] {kind}: {exc}") from None
            cfg = replace(cfg, support_z=-asset.rest_height)
            t0 = time.perf_counter()
            cands = synthesize(asset, default_hand(), cfg, count, classes=classes)
            m.notes[f"{kind}_seconds"] = round(time.perf_counter() - t0, 3)
            p = d / "candidates.txt"
            save_candidates(cands, p)
            m.add_output(p)
            ok = sum(not c.rejected for c in cands)
            print(f"{kind}: {ok}/{len(cands)} candidates accepted")


def cmd_classify(cp, out: Path, seed):
    kinds = _list(_section(cp, "synth").get("objects", ""))
    for kind in kinds:
        d = out / "classify" / kind
        with _Manifested(d, RunManifest("classify", _snapshot(cp), [])) as m:
            a_path = _need(out / "assets" / f"{kind}.txt", "gen-assets")
            c_path = _need(out / "synth" / kind / "candidates.txt", "synth")
            asset = load_asset(a_path)
            cands = load_candidates(c_path)
            m.add_input(a_path)
            m.add_input(c_path)
            lines = []
            for i, c in enumerate(cands):
                if c.rejected or len(c.contact_points) == 0:
                    lines.append(f"{i} unknown finger=")
                    continue
                try:
                    lines.append(format_classification(i, classify_grasp(c, asset)))
                except ValueError:
                    # palm-only contact sets have no finger votes
                    c.grasp_type = "unknown"
                    lines.append(f"{i} unknown finger=")
            p = d / "candidates.txt"
            save_candidates(cands, p)
            lab = d / "labels.txt"
            lab.write_text("\n".join(lines) + "\n", encoding="utf-8")
            m.add_output(p)
            m.add_output(lab)
            print(f"{kind}: " + ", ".join(f"{t}={n}" for t, n in _counts(c.grasp_type for c in cands)))


def _counts(items) -> list:
    out: dict = {}
    for x in items:
        out[x] = out.get(x, 0) + 1
    return sorted(out.items())


def cmd_filter(cp, out: Path, seed):
    task = load_task(cp)
    scenes = int(cp["filter"].get("scenes", "10")) if "filter" in cp else 10
    base = 0 if seed is None else int(seed)
    d = out / "filter" / f"task{task.task_id}"
    with _Manifested(d, RunManifest("filter", _snapshot(cp), [base])) as m:
        env, _ = build_env(out, task, True, m)
        cands = list(env._candidates)
        counts = np.zeros(len(cands), dtype=int)
        rows = ["scene_seed,feasible,zero_weight"]
        for k in range(scenes):
            st = env.reset(base + k)
            counts += np.array(st.feasible, dtype=int)
            rows.append(f"{base + k},{sum(st.feasible)},{int(st.zero_weight)}")
        first = env.reset(base)
        marked = [replace(c, feasible=bool(f)) for c, f in zip(cands, first.feasible)]
        p = d / "candidates.txt"
        save_candidates(marked, p)
        s = d / "scenes.csv"
        s.write_text("\n".join(rows) + "\n", encoding="utf-8")
        r = d / "rates.csv"
        r.write_text("candidate,feasible_fraction\n" + "".join(
            f"{i},{counts[i] / scenes!r}\n" for i in range(len(cands))), encoding="utf-8")
        for f in (p, s, r):
            m.add_output(f)
    print(f"task {task.task_id}: {sum(first.feasible)}/{len(cands)} candidates feasible in scene {base}")


def _threads() -> int:
    raw = os.environ.get("DEXAFFORD_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(f"DEXAFFORD_THREADS must be an integer, got {raw!r}") from None


def train_job(config_path: str, out: str, variant: str, seed: int) -> str:
    """One (variant, seed) training run; top level so worker processes can import it."""
    cp = read_config(config_path)
    task = load_task(cp)
    guided = variant == "guided"
    cfg = train_config(cp, guided, (seed,))
    out_p = Path(out)
    d = out_p / "runs" / f"task{task.task_id}" / variant_dir(variant, cfg.algorithm) / str(seed)
    snap = _snapshot(cp)
    snap["resolved_train"] = {k: str(v) for k, v in asdict(cfg).items()}
    with _Manifested(d, RunManifest("train", snap, [seed])) as m:
        env, robot = build_env(out_p, task, guided, m)
        m.notes["metrics_columns"] = list(METRIC_COLUMNS)
        m.notes["accounting"] = (f"{cfg.episodes_per_epoch} training episodes + {cfg.eval_episodes} "
                                 f"deterministic evaluation episodes per epoch, horizon {task.horizon}; "
                                 "success rates are over the evaluation episodes")
        run = train_seed(env, cfg, seed, lambda u: decode_action(u, robot))
        metrics = d / "metrics.csv"
        write_metrics_csv(run.metrics, metrics, METRIC_COLUMNS)
        timing = d / "timing.csv"
        timing.write_text("epoch,seconds\n" + "".join(
            f"{i + 1},{s:.4f}\n" for i, s in enumerate(run.epoch_seconds)), encoding="utf-8")
        for ep, params in sorted(run.checkpoints.items()):
            p = d / f"checkpoint_{ep:05d}.txt"
            save_checkpoint(params, p)
            m.add_output(p)
        norm = d / "normalizer.txt"
        norm.write_text(format_normalizer(run.normalizer), encoding="utf-8")
        m.add_output(metrics)
        m.add_output(norm)
        m.notes["guidance_reads"] = dict(env.guidance_reads)
    final = final_value([r["overall_sr"] for r in run.metrics])
    return f"task {task.task_id} {variant} seed {seed}: {len(run.metrics)} epochs, final overall SR {final:.1f}"


def cmd_train(cp, out: Path, seed, config_path: str):
    task = load_task(cp)
    names = variants(cp)
    seeds = train_config(cp, True).seeds if seed is None else (int(seed),)
    jobs = [(config_path, str(out), v, s) for v in names for s in seeds]
    for v in names:
        build_env(out, task, v == "guided")   # validate inputs before any work starts
    n = min(_threads(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as pool:
            lines = list(pool.map(train_job, *zip(*jobs)))
    else:
        lines = [train_job(*j) for j in jobs]
    for ln in lines:
        print(ln)


def overall_sr(flags) -> float:
    flags = list(flags)
    if not flags:
        raise ValueError("no episodes")
    return 100.0 * sum(bool(f) for f in flags) / len(flags)


def cmd_evaluate(cp, out: Path, seed):
    task = load_task(cp)
    episodes = int(cp["evaluate"].get("episodes", "20")) if "evaluate" in cp else 20
    algorithm = train_config(cp, True).algorithm
    seeds = train_config(cp, True).seeds if seed is None else (int(seed),)
    for v in variants(cp):
        for s in seeds:
            run = out / "runs" / f"task{task.task_id}" / variant_dir(v, algorithm) / str(s)
            ckpts = sorted(run.glob("checkpoint_*.txt"))
            if not ckpts:
                raise CliError(f"no checkpoint in {run} (run `dexafford train` first)")
            d = out / "eval" / f"task{task.task_id}" / variant_dir(v, algorithm) / str(s)
            with _Manifested(d, RunManifest("evaluate", _snapshot(cp), [s])) as m:
                params = load_checkpoint(ckpts[-1])
                norm = parse_normalizer(_need(run / "normalizer.txt", "train").read_text(encoding="utf-8"))
                m.add_input(ckpts[-1])
                env, robot = build_env(out, task, v == "guided", m)
                if params.obs_dim != env.obs_dim:
                    raise CliError(f"{ckpts[-1]}: observation size {params.obs_dim} != {env.obs_dim}")
                rows = ["episode,seed," + ",".join(f"{st}_success" for st in task.stages) + ",success"]
                flags = []
                for k in range(episodes):
                    es = episode_seed(s, EVAL_KEY, k)
                    e = rollout(env, params, norm, es, None, lambda u: decode_action(u, robot))
                    sub = ",".join(str(int(x)) for x in e["successes"][:len(task.stages)])
                    rows.append(f"{k},{es},{sub},{int(e['success'])}")
                    flags.append(e["success"])
                p = d / "episodes.csv"
                p.write_text("\n".join(rows) + "\n", encoding="utf-8")
                m.add_output(p)
                m.notes["overall_sr"] = overall_sr(flags)
            print(f"task {task.task_id} {v} seed {s}: overall SR {overall_sr(flags):.1f}% over {episodes} episodes")


def collect_runs(out: Path) -> list[SeedCurve]:
    runs = []
    for metrics in sorted((out / "runs").glob("task*/*/*/metrics.csv")):
        seed_dir = metrics.parent
        try:
            task = int(seed_dir.parent.parent.name[4:])
            seed = int(seed_dir.name)
        except ValueError:
            raise CliError(f"unexpected run directory {seed_dir}") from None
        m = RunManifest.load(seed_dir)
        if not m.complete:
            raise CliError(f"run {seed_dir} is incomplete")
        rows = tuple(read_metrics_csv(metrics))
        minutes = None
        timing = seed_dir / "timing.csv"
        if timing.is_file():
            secs = [float(ln.split(",")[1]) for ln in timing.read_text(encoding="utf-8").splitlines()[1:] if ln]
            minutes = sum(secs) / 60.0
        runs.append(SeedCurve(task, seed_dir.parent.name, seed, rows, minutes))
    return runs


def cmd_report(cp, out: Path, seed):
    runs = collect_runs(out)
    if not runs:
        raise CliError(f"no completed runs under {out / 'runs'}")
    sigma_raw = cp["report"].get("sigma", "auto") if "report" in cp else "auto"
    d = out / "report"
    with _Manifested(d, RunManifest("report", _snapshot(cp), sorted({r.seed for r in runs}))) as m:
        try:
            table = metrics_table(runs)
        except ValueError as exc:
            raise CliError(str(exc)) from None
        comparison = None
        guided = [r for r in runs if r.variant.startswith("guided-")]
        unguided = [r for r in runs if r.variant.startswith("unguided-")]
        if guided and unguided:
            try:
                comparison = compare_report(guided, unguided)
            except ValueError as exc:
                raise CliError(str(exc)) from None
        p = d / "metrics_table.csv"
        p.write_text(format_table(table, comparison), encoding="utf-8")
        m.add_output(p)
        timing = d / "timing_table.csv"
        timing.write_text(format_timing(table), encoding="utf-8")
        for task in sorted({r.task for r in runs}):
            for col in ("overall_sr", "grasp_sr", "lift_sr", "orient_sr", "mean_return"):
                series = {}
                for v in sorted({r.variant for r in runs if r.task == task}):
                    curves = [r for r in runs if r.task == task and r.variant == v]
                    n = min(len(c.rows) for c in curves)
                    if n == 0:
                        continue
                    vals = np.mean([c.column(col)[:n] for c in curves], axis=0)
                    if np.all(np.isnan(vals)):
                        continue
                    sigma = default_sigma(n) if sigma_raw == "auto" else float(sigma_raw)
                    series[v] = smooth_curve(vals, sigma)
                if not series:
                    continue
                stem = d / f"task{task}_{col}"
                n = max(len(v) for v in series.values())
                lines = ["epoch," + ",".join(sorted(series))]
                for i in range(n):
                    lines.append(f"{i + 1}," + ",".join(
                        repr(float(series[k][i])) if i < len(series[k]) else "" for k in sorted(series)))
                stem.with_suffix(".csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
                yr = (0.0, 100.0) if col.endswith("_sr") else (
                    min(float(v.min()) for v in series.values()), max(float(v.max()) for v in series.values()))
                stem.with_suffix(".svg").write_text(curve_svg(series, f"task {task} {col}", y_range=yr),
                                                    encoding="utf-8")
                m.add_output(stem.with_suffix(".csv"))
    print(p.read_text(encoding="utf-8"), end="")
    print()
    print(timing.read_text(encoding="utf-8"), end="")


COMMANDS = {
    "gen-assets": cmd_gen_assets,
    "synth": cmd_synth,
    "classify": cmd_classify,
    "filter": cmd_filter,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dexafford", description="Affordance-guided grasping pipeline.")
    ap.add_argument("--version", action="version", version=f"dexafford {__version__}")
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="experiment config (INI)")
    ap.add_argument("--seed", type=int, default=None, help="override the configured seed(s)")
    ap.add_argument("--out", default="out", help="output root directory (default: ./out)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cp = read_config(args.config)
        out = Path(args.out)
        fn = COMMANDS[args.command]
        if args.command == "train":
            fn(cp, out, args.seed, str(Path(args.config).resolve()))
        else:
            fn(cp, out, args.seed)
    except CliError as exc:
        print(f"dexafford: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"dexafford: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
