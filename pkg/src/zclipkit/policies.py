"""Gradient-norm clipping policies behind a single ``step`` interface.

Four policies are available: no clipping, a fixed norm threshold, AutoClip
(percentile of the pre-clipping norm history) and ZClip (EMA z-score spike
detection with a choice of adjustment function).
"""

from __future__ import annotations

import bisect
import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from zclipkit.stats import (
    DEFAULT_EPSILON,
    DEFAULT_WARMUP,
    EmaState,
    WarmupBuffer,
    normal_quantile,
    warmup_finalize,
)


DEFAULT_Z_THRES = 2.5
DEFAULT_ALPHA = 0.97


class PolicyError(ValueError):
    """Invalid policy configuration or policy spec string."""


class Mode(str, enum.Enum):
    TO_MEAN = "to_mean"
    TO_MAX = "to_max"
    RECIPROCAL = "reciprocal"


def _fmt(x: float) -> str:
    return repr(float(x))


def _check_probability(p: float, key: str) -> float:
    p = float(p)
    if not (0.0 < p < 1.0):
        raise PolicyError(f"{key} must lie strictly inside (0, 1), got {p!r}")
    return p


@dataclass(frozen=True)
class NoClip:
    kind = "none"

    @property
    def label(self) -> str:
        return "none"


@dataclass(frozen=True)
class FixedClip:
    c: float = 1.0
    kind = "fixed"

    def __post_init__(self) -> None:
        if not (math.isfinite(self.c) and self.c > 0):
            raise PolicyError(f"fixed.c must be a finite positive number, got {self.c!r}")

    @property
    def label(self) -> str:
        return f"fixed:{_fmt(self.c)}"


@dataclass(frozen=True)
class AutoClip:
    p: float = 0.9
    history_cap: int | None = None
    kind = "autoclip"

    def __post_init__(self) -> None:
        _check_probability(self.p, "autoclip.p")
        if self.history_cap is not None and self.history_cap < 1:
            raise PolicyError(f"autoclip.history_cap must be >= 1, got {self.history_cap!r}")

    @property
    def label(self) -> str:
        base = f"autoclip:{_fmt(self.p)}"
        return base if self.history_cap is None else f"{base}:{self.history_cap}"


@dataclass(frozen=True)
class ZClip:
    """ZClip configuration.

    Exactly one of ``z_thres`` or ``percentile`` sets the spike threshold; a
    percentile ``p`` is converted once to ``z_thres = Phi^-1(p)`` and stored in
    ``threshold``. With neither given the threshold defaults to 2.5.
    """

    mode: Mode = Mode.RECIPROCAL
    z_thres: float | None = None
    percentile: float | None = None
    alpha: float = DEFAULT_ALPHA
    warmup: int = DEFAULT_WARMUP
    epsilon: float = DEFAULT_EPSILON
    threshold: float = field(init=False, repr=False, compare=False)
    kind = "zclip"

    def __post_init__(self) -> None:
        try:
            object.__setattr__(self, "mode", Mode(self.mode))
        except ValueError:
            raise PolicyError(
                f"zclip.mode must be one of {[m.value for m in Mode]}, got {self.mode!r}"
            ) from None
        if self.percentile is not None:
            if self.z_thres is not None:
                raise PolicyError("zclip takes either z_thres or percentile, not both")
            p = _check_probability(self.percentile, "zclip.percentile")
            thr = normal_quantile(p)
        elif self.z_thres is not None:
            thr = float(self.z_thres)
        else:
            thr = DEFAULT_Z_THRES
        if not (math.isfinite(thr) and thr > 0):
            raise PolicyError(f"zclip.z_thres must be a finite positive number, got {thr!r}")
        object.__setattr__(self, "threshold", thr)
        if not (0.0 < self.alpha < 1.0):
            raise PolicyError(f"zclip.alpha must lie strictly inside (0, 1), got {self.alpha!r}")
        if int(self.warmup) != self.warmup or self.warmup < 1:
            raise PolicyError(f"zclip.warmup must be a positive integer, got {self.warmup!r}")
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise PolicyError(f"zclip.epsilon must be finite and >= 0, got {self.epsilon!r}")

    @property
    def label(self) -> str:
        if self.percentile is not None:
            thr = f"{_fmt(self.percentile * 100)}%"
        else:
            thr = _fmt(self.threshold)
        out = f"zclip:{self.mode.value}:{thr}:{_fmt(self.alpha)}"
        if self.warmup != DEFAULT_WARMUP or self.epsilon != DEFAULT_EPSILON:
            out += f":{self.warmup}"
        if self.epsilon != DEFAULT_EPSILON:
            out += f":{_fmt(self.epsilon)}"
        return out


ClipPolicy = Union[NoClip, FixedClip, AutoClip, ZClip]


def parse_policy(text: str) -> ClipPolicy:
    """Parse ``none | fixed:<c> | autoclip:<p>[:cap] | zclip:<mode>:<z|p%>:<alpha>[:warmup][:eps]``.

    Probabilities may be written as fractions (``0.99``) or percentages (``99%``).
    """
    parts = text.strip().split(":")
    kind, args = parts[0].lower(), parts[1:]

    def num(s: str, key: str) -> float:
        try:
            return float(s)
        except ValueError:
            raise PolicyError(f"{key}: expected a number, got {s!r} in {text!r}") from None

    def prob(s: str, key: str) -> float:
        if s.endswith("%"):
            return num(s[:-1], key) / 100.0
        return num(s, key)

    if kind == "none":
        if args:
            raise PolicyError(f"'none' takes no arguments: {text!r}")
        return NoClip()
    if kind == "fixed":
        if len(args) != 1:
            raise PolicyError(f"expected fixed:<c>, got {text!r}")
        return FixedClip(num(args[0], "fixed.c"))
    if kind == "autoclip":
        if len(args) not in (1, 2):
            raise PolicyError(f"expected autoclip:<p>[:cap], got {text!r}")
        cap = None
        if len(args) == 2:
            try:
                cap = int(args[1])
            except ValueError:
                raise PolicyError(f"autoclip.history_cap: expected an integer in {text!r}") from None
        return AutoClip(prob(args[0], "autoclip.p"), cap)
    if kind == "zclip":
        if not 3 <= len(args) <= 5:
            raise PolicyError(f"expected zclip:<mode>:<z_thres|p%>:<alpha>[:warmup][:eps], got {text!r}")
        kwargs: dict = {"mode": args[0], "alpha": num(args[2], "zclip.alpha")}
        if args[1].endswith("%"):
            kwargs.update(z_thres=None, percentile=prob(args[1], "zclip.percentile"))
        else:
            kwargs["z_thres"] = num(args[1], "zclip.z_thres")
        if len(args) >= 4:
            try:
                kwargs["warmup"] = int(args[3])
            except ValueError:
                raise PolicyError(f"zclip.warmup: expected an integer in {text!r}") from None
        if len(args) == 5:
            kwargs["epsilon"] = num(args[4], "zclip.epsilon")
        return ZClip(**kwargs)
    raise PolicyError(f"unknown policy kind {kind!r} in {text!r}")


@dataclass(slots=True)
class StepRecord:
    """One row of a clipping trace.

    ``mu``/``sigma``/``z`` are the statistics the decision was made with
    (NaN where a policy has none, or during warm-up). ``update_value`` is the
    value fed to the running statistics. ``valid`` is False for a non-finite
    raw norm; such rows carry ``clipped_norm == 0``.
    """

    step: int
    raw_norm: float
    clipped_norm: float
    mu: float
    sigma: float
    z: float
    was_clipped: bool
    update_value: float
    threshold: float = math.nan
    valid: bool = True

    @property
    def scale(self) -> float:
        """Factor to multiply the gradient by (``clipped / raw``)."""
        if not self.valid:
            return 0.0
        if not self.was_clipped or self.raw_norm == 0.0:
            return 1.0
        return self.clipped_norm / self.raw_norm


FIELDS = tuple(StepRecord.__dataclass_fields__)

_NAN = math.nan


def xi(z: float, z_thres: float, mode: Mode | str) -> float:
    """Adjusted z-score for a detected spike (``z > z_thres``)."""
    mode = Mode(mode)
    if mode is Mode.TO_MEAN:
        return 0.0
    if mode is Mode.TO_MAX:
        return z_thres
    return z_thres * z_thres / z


def zclip_target(mu: float, sigma: float, z: float, z_thres: float, mode: Mode | str) -> float:
    """Norm a spike is rescaled to: ``mu + xi(z) * sigma``."""
    return mu + xi(z, z_thres, mode) * sigma


def autoclip_threshold(history: Sequence[float], p: float) -> float:
    """Percentile of ``history`` by linear interpolation between closest ranks."""
    if len(history) == 0:
        raise ValueError("autoclip_threshold needs a non-empty history")
    return _sorted_percentile(sorted(history), p)


def _sorted_percentile(xs: Sequence[float], p: float) -> float:
    h = (len(xs) - 1) * p
    lo = math.floor(h)
    hi = min(lo + 1, len(xs) - 1)
    return xs[lo] + (h - lo) * (xs[hi] - xs[lo])


class Clipper:
    """Stateful policy instance; one per training stream."""

    policy: ClipPolicy

    def step(self, raw_norm: float, step: int) -> StepRecord:
        raw_norm = float(raw_norm)
        if not math.isfinite(raw_norm):
            return StepRecord(step, raw_norm, 0.0, _NAN, _NAN, _NAN, False, _NAN, _NAN, False)
        if raw_norm < 0.0:
            raise ValueError(f"gradient norm must be >= 0, got {raw_norm!r}")
        return self._step(raw_norm, step)

    def _step(self, raw_norm: float, step: int) -> StepRecord:
        raise NotImplementedError

    def run(self, norms: Sequence[float], start: int = 1) -> list[StepRecord]:
        return [self.step(g, start + i) for i, g in enumerate(norms)]


class NoClipper(Clipper):
    def __init__(self, policy: NoClip | None = None):
        self.policy = policy or NoClip()

    def _step(self, raw_norm: float, step: int) -> StepRecord:
        return StepRecord(step, raw_norm, raw_norm, _NAN, _NAN, _NAN, False, raw_norm, math.inf)


class FixedClipper(Clipper):
    def __init__(self, policy: FixedClip):
        self.policy = policy

    def _step(self, raw_norm: float, step: int) -> StepRecord:
        c = self.policy.c
        clipped = raw_norm > c
        return StepRecord(
            step, raw_norm, c if clipped else raw_norm, _NAN, _NAN, _NAN, clipped, raw_norm, c
        )


class AutoClipper(Clipper):
    """Percentile of every pre-clipping norm seen so far, current step included."""

    def __init__(self, policy: AutoClip):
        self.policy = policy
        self._order: deque[float] = deque()
        self._sorted: list[float] = []

    @property
    def history(self) -> list[float]:
        return list(self._order)

    def _step(self, raw_norm: float, step: int) -> StepRecord:
        cap = self.policy.history_cap
        if cap is not None and len(self._order) == cap:
            old = self._order.popleft()
            del self._sorted[bisect.bisect_left(self._sorted, old)]
        self._order.append(raw_norm)
        bisect.insort(self._sorted, raw_norm)
        thr = _sorted_percentile(self._sorted, self.policy.p)
        clipped = raw_norm > thr
        return StepRecord(
            step, raw_norm, thr if clipped else raw_norm, _NAN, _NAN, _NAN, clipped, raw_norm, thr
        )


class ZClipper(Clipper):
    """EMA z-score clipping with warm-up and clipped-value statistics updates."""

    def __init__(self, policy: ZClip):
        self.policy = policy
        self.buffer = WarmupBuffer(policy.warmup)
        self.state: EmaState | None = None

    def _step(self, raw_norm: float, step: int) -> StepRecord:
        pol = self.policy
        state = self.state
        if state is None:
            self.buffer.push(raw_norm)
            mu = sigma = _NAN
            if self.buffer.full:
                state = self.state = warmup_finalize(self.buffer, pol.alpha, pol.epsilon)
                mu, sigma = state.mu, state.sigma
            return StepRecord(step, raw_norm, raw_norm, mu, sigma, _NAN, False, raw_norm)

        mu = state.mu
        sigma = math.sqrt(state.var)
        z = state.z(raw_norm)
        thr = pol.threshold
        boundary = mu + thr * (sigma + state.epsilon)
        if z > thr:
            target = mu + xi(z, thr, pol.mode) * sigma
            state.update(target)
            return StepRecord(step, raw_norm, target, mu, sigma, z, True, target, boundary)
        state.update(raw_norm)
        return StepRecord(step, raw_norm, raw_norm, mu, sigma, z, False, raw_norm, boundary)


def make_clipper(policy: ClipPolicy | str) -> Clipper:
    if isinstance(policy, str):
        policy = parse_policy(policy)
    if isinstance(policy, NoClip):
        return NoClipper(policy)
    if isinstance(policy, FixedClip):
        return FixedClipper(policy)
    if isinstance(policy, AutoClip):
        return AutoClipper(policy)
    if isinstance(policy, ZClip):
        return ZClipper(policy)
    raise PolicyError(f"not a clip policy: {policy!r}")


def policy_step(clipper: Clipper, raw_norm: float, step: int) -> StepRecord:
    return clipper.step(raw_norm, step)


def run_policy(policy: ClipPolicy | str, norms: Sequence[float]) -> list[StepRecord]:
    """Fresh clipper over a whole norm stream, steps numbered from 1."""
    return make_clipper(policy).run(norms)


def apply_clip(grad: np.ndarray, record: StepRecord) -> np.ndarray:
    """Rescale a gradient vector according to ``record`` (direction preserved)."""
    return grad * record.scale
