"""Synthetic gradient-norm streams and CSV trace files.

Trace format: UTF-8 CSV with header ``step,grad_norm[,loss]``, one row per
step, ``#`` comment lines allowed.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

REGIMES = ("stationary", "drifting", "spiky", "saturated")
DECAYS = ("none", "exponential", "linear")
NOISES = ("gaussian", "lognormal")
SPIKE_KINDS = ("sigma", "multiplier", "absolute")


class TraceError(ValueError):
    """Unreadable or malformed trace file."""


@dataclass(frozen=True)
class Spike:
    """A scheduled (``at``, 0-based) or random (``rate`` per step) spike.

    ``kind`` sets how ``magnitude`` is read: ``sigma`` puts the norm at
    ``mean + magnitude * noise_sd``, ``multiplier`` at ``mean * magnitude`` and
    ``absolute`` at ``magnitude`` itself.
    """

    at: int | None = None
    rate: float | None = None
    magnitude: float = 6.0
    kind: str = "sigma"

    def __post_init__(self) -> None:
        if (self.at is None) == (self.rate is None):
            raise ValueError("spike needs exactly one of 'at' or 'rate'")
        if self.at is not None and self.at < 0:
            raise ValueError(f"spike.at must be >= 0, got {self.at!r}")
        if self.rate is not None and not (0.0 < self.rate <= 1.0):
            raise ValueError(f"spike.rate must lie in (0, 1], got {self.rate!r}")
        if self.kind not in SPIKE_KINDS:
            raise ValueError(f"spike.kind must be one of {SPIKE_KINDS}, got {self.kind!r}")
        if self.kind == "multiplier" and not self.magnitude > 1.0:
            raise ValueError(f"multiplier spikes need magnitude > 1, got {self.magnitude!r}")
        if self.kind != "multiplier" and not (math.isfinite(self.magnitude) and self.magnitude >= 0):
            raise ValueError(f"spike.magnitude must be finite and >= 0, got {self.magnitude!r}")


@dataclass(frozen=True)
class StreamSpec:
    """Description of a synthetic gradient-norm stream.

    The base mean starts at ``mean0`` and follows ``mean_decay``:
    ``exponential`` multiplies by ``exp(-decay * t)``, ``linear`` adds
    ``decay * t`` (``decay`` is then a signed slope). The ``saturated`` regime
    multiplies the base mean by ``saturate_factor`` from ``saturate_at`` on.
    ``heavy_tail_until`` limits lognormal noise to the first steps of the stream.
    """

    length: int
    seed: int = 0
    regime: str = "stationary"
    mean0: float = 1.0
    mean_decay: str = "none"
    decay: float = 0.0
    noise_sd: float = 0.05
    noise: str = "gaussian"
    lognormal_shape: float = 0.75
    heavy_tail_until: int | None = None
    spikes: tuple[Spike, ...] = ()
    saturate_at: int | None = None
    saturate_factor: float = 4.0

    def __post_init__(self) -> None:
        if self.length < 1:
            raise ValueError(f"stream length must be >= 1, got {self.length!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.mean_decay not in DECAYS:
            raise ValueError(f"mean_decay must be one of {DECAYS}, got {self.mean_decay!r}")
        if self.noise not in NOISES:
            raise ValueError(f"noise must be one of {NOISES}, got {self.noise!r}")
        if not self.mean0 > 0:
            raise ValueError(f"mean0 must be > 0, got {self.mean0!r}")
        if not self.noise_sd >= 0:
            raise ValueError(f"noise_sd must be >= 0, got {self.noise_sd!r}")
        if not self.lognormal_shape > 0:
            raise ValueError(f"lognormal_shape must be > 0, got {self.lognormal_shape!r}")
        spikes = tuple(s if isinstance(s, Spike) else Spike(**s) for s in self.spikes)
        object.__setattr__(self, "spikes", spikes)
        if self.regime == "stationary" and self.mean_decay != "none":
            raise ValueError("stationary regime cannot have a mean_decay")
        if self.regime == "drifting" and self.mean_decay == "none":
            raise ValueError("drifting regime needs mean_decay 'exponential' or 'linear'")
        if self.regime == "spiky" and not spikes:
            raise ValueError("spiky regime needs at least one spike entry")
        if self.regime == "saturated" and not self.saturate_factor > 1.0:
            raise ValueError(f"saturate_factor must be > 1, got {self.saturate_factor!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spikes"] = [
            {k: v for k, v in s.items() if v is not None} for s in d["spikes"]
        ]
        return d


class Stream(NamedTuple):
    norms: list[float]
    spike_steps: list[int]
    clamped: int


def base_mean(spec: StreamSpec) -> np.ndarray:
    t = np.arange(spec.length, dtype=np.float64)
    if spec.mean_decay == "exponential":
        mean = spec.mean0 * np.exp(-spec.decay * t)
    elif spec.mean_decay == "linear":
        mean = spec.mean0 + spec.decay * t
    else:
        mean = np.full(spec.length, spec.mean0)
    if spec.regime == "saturated":
        at = spec.length // 2 if spec.saturate_at is None else spec.saturate_at
        mean[at:] *= spec.saturate_factor
    return mean


def generate_detailed(spec: StreamSpec) -> Stream:
    rng = np.random.default_rng(spec.seed)
    n = spec.length
    mean = base_mean(spec)
    z = rng.standard_normal(n)
    if spec.noise == "lognormal":
        s = spec.lognormal_shape
        ln = (np.exp(s * z) - math.exp(s * s / 2)) / math.sqrt(math.expm1(s * s) * math.exp(s * s))
        cut = n if spec.heavy_tail_until is None else min(spec.heavy_tail_until, n)
        z = np.concatenate([ln[:cut], z[cut:]])
    values = mean + spec.noise_sd * z

    spike_steps: set[int] = set()
    for spike in spec.spikes:
        if spike.rate is not None:
            where = np.flatnonzero(rng.random(n) < spike.rate)
        else:
            where = np.array([spike.at] if spike.at < n else [], dtype=np.int64)
        if spike.kind == "sigma":
            values[where] = mean[where] + spike.magnitude * spec.noise_sd
        elif spike.kind == "multiplier":
            values[where] = mean[where] * spike.magnitude
        else:
            values[where] = spike.magnitude
        spike_steps.update(int(i) for i in where)

    negative = values < 0
    values[negative] = 0.0
    return Stream(values.tolist(), sorted(spike_steps), int(negative.sum()))


def generate(spec: StreamSpec) -> list[float]:
    """Deterministic norm stream for ``spec`` (pure function of spec and seed)."""
    return generate_detailed(spec).norms


def drifting_example(length: int = 2000, seed: int = 0, noise_sd: float = 0.02) -> StreamSpec:
    """Mean drifting linearly 0.8 -> 0.2 with an early 1.2 norm and a late 0.9 norm."""
    return StreamSpec(
        length=length,
        seed=seed,
        regime="drifting",
        mean0=0.8,
        mean_decay="linear",
        decay=-0.6 / (length - 1),
        noise_sd=noise_sd,
        spikes=(
            Spike(at=length // 20, magnitude=1.2, kind="absolute"),
            Spike(at=length - length // 20, magnitude=0.9, kind="absolute"),
        ),
    )


# -- trace files -------------------------------------------------------------


class Trace(NamedTuple):
    steps: list[int]
    norms: list[float]
    losses: list[float] | None


def write_trace(
    path: str | os.PathLike,
    norms: Sequence[float],
    losses: Sequence[float] | None = None,
    steps: Iterable[int] | None = None,
    comment: str | None = None,
) -> None:
    """Write a trace CSV. Floats are written with ``repr`` so replay is lossless."""
    steps = list(range(len(norms))) if steps is None else list(steps)
    if len(steps) != len(norms) or (losses is not None and len(losses) != len(norms)):
        raise ValueError("steps, norms and losses must have equal lengths")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "grad_norm"] + (["loss"] if losses is not None else []))
        for i, s in enumerate(steps):
            row = [s, repr(float(norms[i]))]
            if losses is not None:
                row.append(repr(float(losses[i])))
            w.writerow(row)


def read_trace(path: str | os.PathLike) -> Trace:
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise TraceError(f"{path}: no such trace file") from None
    except OSError as exc:
        raise TraceError(f"{path}: cannot open trace file ({exc.strerror})") from None

    with fh:
        rows = [
            (lineno, row)
            for lineno, row in enumerate(csv.reader(fh), start=1)
            if row and not row[0].lstrip().startswith("#")
        ]
    if not rows:
        raise TraceError(f"{path}: no data rows (empty file)")
    header_line, header = rows[0]
    header = [h.strip() for h in header]
    if header not in (["step", "grad_norm"], ["step", "grad_norm", "loss"]):
        raise TraceError(
            f"{path}:{header_line}: expected header 'step,grad_norm[,loss]', got {','.join(header)!r}"
        )
    has_loss = len(header) == 3
    if len(rows) == 1:
        raise TraceError(f"{path}: no data rows")

    steps: list[int] = []
    norms: list[float] = []
    losses: list[float] = []
    for lineno, row in rows[1:]:
        if len(row) != len(header):
            raise TraceError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            step = int(row[0])
            norm = float(row[1])
            loss = float(row[2]) if has_loss else 0.0
        except ValueError:
            raise TraceError(f"{path}:{lineno}: malformed row {','.join(row)!r}") from None
        if not math.isfinite(norm) or norm < 0:
            raise TraceError(f"{path}:{lineno}: grad_norm must be finite and >= 0, got {row[1]!r}")
        steps.append(step)
        norms.append(norm)
        losses.append(loss)
    return Trace(steps, norms, losses if has_loss else None)


def replay(path: str | os.PathLike) -> list[float]:
    """Gradient norms of a trace file, in file order."""
    return read_trace(path).norms
