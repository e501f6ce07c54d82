"""Command-line entry point: simulate, replay, train, compare, sweep, plot."""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import datetime as _dt
import json
import math
import os
import re
import shutil
import statistics
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Iterator, Sequence

import yaml

from zclipkit import __version__
from zclipkit.config import ConfigError, RunConfig, build_policy, load_config, packaged_config, parse_config
from zclipkit.metrics import (
    COMPARISON_COLUMNS,
    RunSummary,
    _jsonable,
    mean_abs_diff,
    read_records,
    run_summary,
    write_comparison,
    write_records,
)
from zclipkit.policies import ClipPolicy, PolicyError, ZClip
from zclipkit.synth import TraceError, generate, replay, write_trace
from zclipkit.trainer import TrainReport, train

OUT_ENV = "ZCLIPKIT_OUT"
SWEEP_PARAMS = ("z_thres", "alpha")

# zclipkit.plots is imported lazily: matplotlib adds noticeable start-up time


# -- output helpers ----------------------------------------------------------


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._=-]+", "_", text)


def _out_dir(args: argparse.Namespace) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / args.command


@contextlib.contextmanager
def staged(out: Path) -> Iterator[Path]:
    """Build outputs in a sibling temp dir and move them into place on success."""
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    tmp.rename(out)


def _write_metadata(dest: Path, argv: Sequence[str]) -> None:
    # the only file that varies between identical invocations
    write_json(
        dest / "metadata.json",
        {
            "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            "version": __version__,
            "argv": list(argv),
        },
    )


def _policies(args: argparse.Namespace, cfg: RunConfig) -> list[ClipPolicy]:
    if args.policy:
        return [build_policy(p, "--policy") for p in args.policy]
    return cfg.policies or [ZClip()]


def _seed(args: argparse.Namespace, cfg: RunConfig) -> int:
    return cfg.seed if args.seed is None else args.seed


# -- stream runs -------------------------------------------------------------


def stream_outputs(
    dest: Path,
    stream: Sequence[float],
    policies: Sequence[ClipPolicy],
    window: int,
    normality_window: int | None,
    plot: bool,
) -> list[RunSummary]:
    write_trace(dest / "stream.csv", stream)
    summaries = []
    for i, pol in enumerate(policies):
        records, summary = run_summary(pol, stream, window, normality_window)
        run_dir = dest / "runs" / f"{i:02d}-{_slug(pol.label)}"
        run_dir.mkdir(parents=True)
        write_records(run_dir / "records.csv", records)
        if plot:
            from zclipkit.plots import plot_run

            plot_run(run_dir / "plot.svg", records, pol.label, window=window)
        summaries.append(summary)
    write_json(dest / "summary.json", [s.to_dict() for s in summaries])
    write_comparison(dest / "comparison.csv", summaries)
    return summaries


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    seed = _seed(args, cfg)
    cfg.seed = seed
    spec = cfg.stream_spec()
    policies = _policies(args, cfg)
    stream = generate(spec)
    with staged(_out_dir(args)) as dest:
        write_json(dest / "config.json", {"stream": spec.to_dict(), "policies": [p.label for p in policies],
                                          "window": cfg.window, "normality_window": cfg.normality_window})
        stream_outputs(dest, stream, policies, cfg.window, cfg.normality_window, args.plot or cfg.plot)
        _write_metadata(dest, args.argv)
    return 0


def cmd_replay(args: argparse.Namespace) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    norms = replay(args.trace)
    policies = _policies(args, cfg)
    with staged(_out_dir(args)) as dest:
        write_json(dest / "config.json", {"trace": str(args.trace), "policies": [p.label for p in policies],
                                          "window": cfg.window, "normality_window": cfg.normality_window})
        stream_outputs(dest, norms, policies, cfg.window, cfg.normality_window, args.plot or cfg.plot)
        _write_metadata(dest, args.argv)
    return 0


# -- training runs -----------------------------------------------------------


def _train_cfg(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config or packaged_config("unstable"))
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg.train[key] = yaml.safe_load(value)
    if args.set:
        parse_config({"train": cfg.train})
    return cfg


def train_outputs(dest: Path, report: TrainReport, plot: bool) -> None:
    write_json(dest / "report.json", report.to_dict())
    write_records(dest / "records.csv", report.records)
    losses = list(report.loss_curve) + [math.nan] * (len(report.records) - len(report.loss_curve))
    write_trace(dest / "trace.csv", report.pre_clip_norms, losses, steps=[r.step for r in report.records])
    if plot:
        from zclipkit.plots import plot_run

        plot_run(dest / "plot.svg", report.records, report.policy, report.loss_curve)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _train_cfg(args)
    policy = _policies(args, cfg)[0]
    tc = cfg.train_config(policy, _seed(args, cfg))
    report = train(tc)
    with staged(_out_dir(args)) as dest:
        write_json(dest / "config.json", tc.to_dict())
        train_outputs(dest, report, args.plot or cfg.plot)
        _write_metadata(dest, args.argv)
    print(
        f"{report.policy}: final_loss={report.final_loss:.4g} spikes={report.spike_count} "
        f"diverged={report.diverged} clip_fraction={report.clip_fraction:.4f}"
    )
    return 0


def _train_job(job):
    cfg, policy, seed = job
    tc = cfg.train_config(policy, seed)
    return tc, train(tc)


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _train_cfg(args)
    policies = _policies(args, cfg)
    if not args.policy and not cfg.policies:
        policies = [build_policy(p) for p in ("none", "fixed:1.0", "autoclip:0.99", "zclip:reciprocal:2.5:0.97")]
    base = _seed(args, cfg)
    seeds = list(range(base, base + args.seeds))
    jobs = [(cfg, p, s) for p in policies for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_train_job, jobs))
    else:
        results = [_train_job(j) for j in jobs]

    with staged(_out_dir(args)) as dest:
        rows = []
        by_policy: dict[str, list[TrainReport]] = {}
        for (tc, report), (_, pol, seed) in zip(results, jobs):
            run_dir = dest / "runs" / _slug(pol.label) / f"seed-{seed}"
            run_dir.mkdir(parents=True)
            write_json(run_dir / "config.json", tc.to_dict())
            train_outputs(run_dir, report, args.plot or cfg.plot)
            by_policy.setdefault(pol.label, []).append(report)
            rows.append([pol.label, seed, report.spike_count, report.loss_spikes, int(report.diverged),
                         repr(report.final_loss), repr(report.clip_fraction)])
        with open(dest / "runs.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["policy", "seed", "spike_count", "loss_spikes", "diverged", "final_loss", "clip_fraction"])
            w.writerows(rows)
        with open(dest / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*COMPARISON_COLUMNS, "diverged", "seeds"])
            for label, reps in by_policy.items():
                w.writerow([
                    label,
                    sum(r.spike_count for r in reps),
                    repr(statistics.median(r.final_loss for r in reps)),
                    repr(statistics.fmean(r.clip_fraction for r in reps)),
                    sum(r.diverged for r in reps),
                    len(reps),
                ])
        _write_metadata(dest, args.argv)
    for label, reps in by_policy.items():
        print(f"{label}: spikes={sum(r.spike_count for r in reps)} diverged={sum(r.diverged for r in reps)}/{len(reps)}")
    return 0


# -- sweeps ------------------------------------------------------------------


def _parse_values(text: str | None, cfg: RunConfig) -> list[float]:
    raw = text if text is not None else cfg.sweep.get("values")
    if raw is None:
        raise ConfigError("sweep needs --values or sweep.values")
    if isinstance(raw, str):
        raw = [v for v in raw.split(",") if v.strip()]
    try:
        values = [float(v) for v in raw]
    except (TypeError, ValueError):
        raise ConfigError(f"sweep.values: expected numbers, got {raw!r}") from None
    if not values:
        raise ConfigError("sweep.values must be non-empty")
    return values


def swept_policy(base: ZClip, param: str, value: float) -> ZClip:
    if param == "z_thres":
        return dataclasses.replace(base, z_thres=value, percentile=None)
    return dataclasses.replace(base, alpha=value)


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    cfg.seed = _seed(args, cfg)
    param = args.param or cfg.sweep.get("param")
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep.param must be one of {SWEEP_PARAMS}, got {param!r}")
    values = _parse_values(args.values, cfg)
    target = args.target or cfg.sweep.get("target", "stream")
    if target not in ("stream", "train"):
        raise ConfigError(f"sweep.target must be 'stream' or 'train', got {target!r}")
    if args.policy:
        base = build_policy(args.policy[0], "--policy")
    elif "policy" in cfg.sweep:
        base = build_policy(cfg.sweep["policy"], "sweep.policy")
    else:
        base = next((p for p in cfg.policies if isinstance(p, ZClip)), ZClip())
    if not isinstance(base, ZClip):
        raise ConfigError("sweep base policy must be a zclip policy")
    stream = generate(cfg.stream_spec()) if target == "stream" else None

    failures = 0
    mu_curves: dict[str, list[float]] = {}
    sigma_curves: dict[str, list[float]] = {}
    with staged(_out_dir(args)) as dest:
        rows = []
        for value in values:
            row = {"value": repr(value), "spike_count": "", "final_loss": "", "clip_fraction": "",
                   "mu_mean_abs_diff": "", "error": ""}
            try:
                pol = swept_policy(base, param, value)
                vdir = dest / "values" / _slug(f"{param}={value!r}")
                vdir.mkdir(parents=True)
                if target == "stream":
                    summary = stream_outputs(vdir, stream, [pol], cfg.window, cfg.normality_window,
                                             args.plot or cfg.plot)[0]
                    mu, sigma = summary.mu_curve, summary.sigma_curve
                    row.update(spike_count=summary.spike_count, clip_fraction=repr(summary.clip_fraction))
                else:
                    tc = cfg.train_config(pol)
                    report = train(tc)
                    write_json(vdir / "config.json", tc.to_dict())
                    train_outputs(vdir, report, args.plot or cfg.plot)
                    mu = [r.mu for r in report.records]
                    sigma = [r.sigma for r in report.records]
                    row.update(spike_count=report.spike_count, final_loss=repr(report.final_loss),
                               clip_fraction=repr(report.clip_fraction))
                row["mu_mean_abs_diff"] = repr(mean_abs_diff(mu))
                mu_curves[f"{param}={value:g}"] = mu
                sigma_curves[f"{param}={value:g}"] = sigma
            except (ValueError, ArithmeticError) as exc:
                failures += 1
                row["error"] = str(exc)
                print(f"zclipkit: sweep value {value!r} failed: {exc}", file=sys.stderr)
            rows.append(row)
        with open(dest / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
        if (args.plot or cfg.plot) and mu_curves:
            from zclipkit.plots import plot_curves

            plot_curves(dest / "mu_curves.svg", mu_curves, "EMA mean of gradient norm", "mu")
            plot_curves(dest / "sigma_curves.svg", sigma_curves, "EMA std of gradient norm", "sigma")
        _write_metadata(dest, args.argv)
    return 1 if failures else 0


# -- plotting ----------------------------------------------------------------


def cmd_plot(args: argparse.Namespace) -> int:
    from zclipkit.plots import plot_run

    root = Path(args.run_dir)
    found = sorted(root.rglob("records.csv"))
    if not found:
        raise ConfigError(f"{root}: no records.csv found")
    for rec_path in found:
        records = read_records(rec_path)
        losses = None
        report = rec_path.parent / "report.json"
        if report.exists():
            losses = [v for v in json.loads(report.read_text("utf-8"))["loss_curve"] if v is not None]
        rel = rec_path.parent.relative_to(root)
        target = (Path(args.out) / rel if args.out else rec_path.parent) / "plot.svg"
        target.parent.mkdir(parents=True, exist_ok=True)
        plot_run(target, records, str(rel) if str(rel) != "." else root.name, losses, window=args.window)
        print(target)
    return 0


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--seed", type=int, default=None, help="override the config seed")
    shared.add_argument("--out", default=None, help=f"output directory (default: ${OUT_ENV}/<command> or runs/<command>)")
    shared.add_argument(
        "--policy",
        action="append",
        default=[],
        metavar="SPEC",
        help="none | fixed:<c> | autoclip:<p>[:cap] | zclip:<mode>:<z_thres|p%%>:<alpha>[:warmup][:eps]; repeatable",
    )
    shared.add_argument("--plot", action="store_true", help="also write SVG plots")

    parser = argparse.ArgumentParser(prog="zclipkit", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[shared], help="run policies over a synthetic norm stream")
    p.add_argument("config", nargs="?", default=None, help="YAML config (default: packaged default)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", parents=[shared], help="run policies over a recorded trace CSV")
    p.add_argument("trace")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_replay)

    for name, func, helptext in (
        ("train", cmd_train, "train the toy model under one policy"),
        ("compare", cmd_compare, "train the toy model under several policies and seeds"),
    ):
        p = sub.add_parser(name, parents=[shared], help=helptext)
        p.add_argument("config", nargs="?", default=None, help="YAML config (default: packaged 'unstable')")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a train.* key")
        if name == "compare":
            p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", parents=[shared], help="sweep z_thres or alpha of a zclip policy")
    p.add_argument("config", nargs="?", default=None)
    p.add_argument("--param", choices=SWEEP_PARAMS, default=None)
    p.add_argument("--values", default=None, help="comma-separated values")
    p.add_argument("--target", choices=("stream", "train"), default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="render SVG plots for every records.csv under a run directory")
    p.add_argument("run_dir")
    p.add_argument("--out", default=None)
    p.add_argument("--window", type=int, default=1000)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    if getattr(args, "seeds", 1) < 1 or getattr(args, "jobs", 1) < 1:
        print("zclipkit: error: --seeds and --jobs must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, PolicyError) as exc:
        print(f"zclipkit: error: {exc}", file=sys.stderr)
        return 2
    except (TraceError, ValueError, OSError) as exc:
        print(f"zclipkit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
