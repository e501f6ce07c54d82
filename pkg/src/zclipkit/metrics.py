"""Offline analysis of clipping traces: clip fractions, statistics curves,
spike excursions, sliding-window normality and cross-policy comparison."""

from __future__ import annotations

import csv
import math
import os
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

from zclipkit.policies import (
    DEFAULT_ALPHA,
    DEFAULT_Z_THRES,
    FIELDS,
    ClipPolicy,
    Mode,
    StepRecord,
    ZClip,
    make_clipper,
    parse_policy,
)
from zclipkit.stats import normality_diagnostic

DEFAULT_CLIP_WINDOW = 1000
DEFAULT_NORMALITY_WINDOW = 135


class CompareError(RuntimeError):
    """A policy failed during a comparison; the message names the policy."""


class NormalityWindow(NamedTuple):
    start: int
    end: int  # exclusive
    statistic: float
    p_like: float
    error: str | None = None


def clip_fraction_curve(
    records: Sequence[StepRecord], window: int = DEFAULT_CLIP_WINDOW
) -> list[tuple[int, float]]:
    """Trailing-window share of clipped steps, one entry per record.

    Before ``window`` records exist the denominator is the number seen so far.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window!r}")
    if not records:
        raise ValueError("clip_fraction_curve needs at least one record")
    flags: deque[bool] = deque()
    count = 0
    out = []
    for rec in records:
        flags.append(rec.was_clipped)
        count += rec.was_clipped
        if len(flags) > window:
            count -= flags.popleft()
        out.append((rec.step, count / len(flags)))
    return out


def reference_policy(policy: ClipPolicy) -> ZClip:
    """ZClip statistics configuration used to count excursions for ``policy``."""
    if isinstance(policy, ZClip):
        return policy
    return ZClip(Mode.RECIPROCAL, DEFAULT_Z_THRES, alpha=DEFAULT_ALPHA)


def reference_pass(norms: Sequence[float], ref: ZClip) -> list[StepRecord]:
    """Run ZClip statistics over ``norms`` (non-finite entries are skipped)."""
    clipper = make_clipper(ref)
    return [clipper.step(g, i + 1) for i, g in enumerate(norms) if math.isfinite(g)]


def excursion_count(norms: Sequence[float], ref: ZClip) -> int:
    """Steps whose z-score exceeds the reference threshold."""
    return sum(r.was_clipped for r in reference_pass(norms, ref))


@dataclass
class RunSummary:
    label: str
    steps: int
    spike_count: int
    clip_fraction: float
    clip_fraction_curve: list[tuple[int, float]]
    mu_curve: list[float]
    sigma_curve: list[float]
    final_loss: float | None = None
    normality_windows: list[NormalityWindow] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clip_fraction_curve"] = [list(p) for p in self.clip_fraction_curve]
        d["normality_windows"] = [w._asdict() for w in self.normality_windows]
        return _jsonable(d)


def _jsonable(obj):
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def summarize(
    records: Sequence[StepRecord],
    policy: ClipPolicy,
    window: int = DEFAULT_CLIP_WINDOW,
    final_loss: float | None = None,
    normality_window: int | None = None,
) -> RunSummary:
    """Summary of one run. Spikes are z-excursions of the post-clip norms
    against a reference statistics pass using the run's own alpha and threshold."""
    ref = reference_policy(policy)
    post = [r.clipped_norm for r in records if r.valid]
    ref_records = reference_pass(post, ref)
    stat_source = records if isinstance(policy, ZClip) else ref_records
    windows: list[NormalityWindow] = []
    if normality_window and len(post) >= normality_window:
        windows = sliding_normality([r.raw_norm for r in records if r.valid], normality_window)
    return RunSummary(
        label=policy.label,
        steps=len(records),
        spike_count=sum(r.was_clipped for r in ref_records),
        clip_fraction=sum(r.was_clipped for r in records) / len(records),
        clip_fraction_curve=clip_fraction_curve(records, window),
        mu_curve=[r.mu for r in stat_source],
        sigma_curve=[r.sigma for r in stat_source],
        final_loss=final_loss,
        normality_windows=windows,
    )


def run_summary(
    policy: ClipPolicy | str,
    stream: Sequence[float],
    window: int = DEFAULT_CLIP_WINDOW,
    normality_window: int | None = None,
) -> tuple[list[StepRecord], RunSummary]:
    policy = parse_policy(policy) if isinstance(policy, str) else policy
    records = make_clipper(policy).run(stream)
    return records, summarize(records, policy, window, normality_window=normality_window)


def compare(
    policies: Sequence[ClipPolicy | str],
    stream: Sequence[float],
    window: int = DEFAULT_CLIP_WINDOW,
    normality_window: int | None = None,
) -> list[RunSummary]:
    """Run every policy over the same stream; summaries keep the input order."""
    if not stream:
        raise ValueError("compare needs a non-empty stream")
    out = []
    for pol in policies:
        label = pol if isinstance(pol, str) else pol.label
        try:
            out.append(run_summary(pol, stream, window, normality_window)[1])
        except (ValueError, ArithmeticError) as exc:
            raise CompareError(f"policy {label}: {exc}") from exc
    return out


def sliding_normality(
    stream: Sequence[float], window: int = DEFAULT_NORMALITY_WINDOW, stride: int | None = None
) -> list[NormalityWindow]:
    """Jarque-Bera diagnostic per window; windows that cannot be tested carry ``error``."""
    stride = window if stride is None else stride
    if window < 8:
        raise ValueError(f"normality window must be >= 8, got {window!r}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride!r}")
    if window > len(stream):
        raise ValueError(f"window {window} exceeds stream length {len(stream)}")
    out = []
    for start in range(0, len(stream) - window + 1, stride):
        chunk = stream[start : start + window]
        try:
            res = normality_diagnostic(chunk)
            out.append(NormalityWindow(start, start + window, res.statistic, res.p_like))
        except ValueError as exc:
            out.append(NormalityWindow(start, start + window, math.nan, math.nan, str(exc)))
    return out


def mean_abs_diff(curve: Sequence[float]) -> float:
    """Mean absolute first difference over the finite part of ``curve``."""
    vals = [v for v in curve if math.isfinite(v)]
    if len(vals) < 2:
        return 0.0
    return math.fsum(abs(b - a) for a, b in zip(vals, vals[1:])) / (len(vals) - 1)


# -- files -------------------------------------------------------------------


def write_records(path: str | os.PathLike, records: Sequence[StepRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELDS)
        for r in records:
            w.writerow(
                [r.step, *(repr(float(getattr(r, f))) for f in FIELDS[1:6]),
                 int(r.was_clipped), repr(float(r.update_value)), repr(float(r.threshold)), int(r.valid)]
            )


def read_records(path: str | os.PathLike) -> list[StepRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != FIELDS:
            raise ValueError(f"{path}: expected record columns {','.join(FIELDS)}")
        return [
            StepRecord(
                int(row["step"]), float(row["raw_norm"]), float(row["clipped_norm"]),
                float(row["mu"]), float(row["sigma"]), float(row["z"]),
                bool(int(row["was_clipped"])), float(row["update_value"]),
                float(row["threshold"]), bool(int(row["valid"])),
            )
            for row in reader
        ]


COMPARISON_COLUMNS = ("policy", "spike_count", "final_loss", "clip_fraction")


def write_comparison(path: str | os.PathLike, summaries: Sequence[RunSummary]) -> None:
    """One row per policy: policy, spike_count, final_loss, clip_fraction."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for s in summaries:
            loss = "" if s.final_loss is None else repr(float(s.final_loss))
            w.writerow([s.label, s.spike_count, loss, repr(s.clip_fraction)])
