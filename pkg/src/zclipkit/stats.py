"""Streaming statistics for gradient norms.

EMA mean/variance tracking, the warm-up bootstrap, z-scores, an inverse
normal CDF and a Jarque-Bera window diagnostic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

DEFAULT_EPSILON = 1e-6
DEFAULT_WARMUP = 25


def _check_finite(value: float, what: str = "value") -> float:
    value = float(value)
    if not math.isfinite(value):
        raise ValueError(f"{what} must be finite, got {value!r}")
    return value


@dataclass(slots=True)
class EmaState:
    """Running EMA estimate of the gradient-norm mean and variance.

    ``epsilon`` is added to the standard deviation (not the variance) when
    forming z-scores. ``epsilon=0`` is accepted so scale-invariance can be
    checked exactly.
    """

    mu: float
    var: float
    alpha: float = 0.97
    epsilon: float = DEFAULT_EPSILON
    steps_seen: int = 0

    def __post_init__(self) -> None:
        if not (0.0 < self.alpha < 1.0):
            raise ValueError(f"alpha must lie strictly inside (0, 1), got {self.alpha!r}")
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0.0):
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon!r}")
        _check_finite(self.mu, "mu")
        if not (math.isfinite(self.var) and self.var >= 0.0):
            raise ValueError(f"var must be finite and >= 0, got {self.var!r}")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.var)

    def update(self, value: float) -> None:
        """In-place EMA step: mean first, then variance around the new mean."""
        value = _check_finite(value)
        a = self.alpha
        mu = a * self.mu + (1.0 - a) * value
        self.var = a * self.var + (1.0 - a) * (value - mu) ** 2
        self.mu = mu
        self.steps_seen += 1

    def z(self, value: float) -> float:
        value = _check_finite(value)
        denom = math.sqrt(self.var) + self.epsilon
        diff = value - self.mu
        if denom == 0.0:
            # only reachable with epsilon == 0 and a degenerate variance
            if diff == 0.0:
                return 0.0
            return math.copysign(math.inf, diff)
        return diff / denom

    def copy(self) -> "EmaState":
        return EmaState(self.mu, self.var, self.alpha, self.epsilon, self.steps_seen)


def ema_update(state: EmaState, value: float) -> EmaState:
    """Return a new state advanced by one observation; ``state`` is untouched."""
    new = state.copy()
    new.update(value)
    return new


def z_score(state: EmaState, value: float) -> float:
    """``(value - mu) / (sqrt(var) + epsilon)``."""
    return state.z(value)


@dataclass(slots=True)
class WarmupBuffer:
    """Collects the first ``capacity`` raw norms before EMA tracking starts."""

    capacity: int = DEFAULT_WARMUP
    norms: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError(f"warm-up capacity must be >= 1, got {self.capacity!r}")
        if len(self.norms) > self.capacity:
            raise ValueError("warm-up buffer holds more norms than its capacity")
        for v in self.norms:
            if not (math.isfinite(v) and v >= 0.0):
                raise ValueError(f"warm-up norms must be finite and >= 0, got {v!r}")

    @property
    def full(self) -> bool:
        return len(self.norms) == self.capacity

    def push(self, norm: float) -> None:
        norm = _check_finite(norm, "norm")
        if norm < 0.0:
            raise ValueError(f"norm must be >= 0, got {norm!r}")
        if self.full:
            raise ValueError("warm-up buffer is already full")
        self.norms.append(norm)


def warmup_finalize(
    buffer: WarmupBuffer, alpha: float = 0.97, epsilon: float = DEFAULT_EPSILON
) -> EmaState:
    """Mean and population variance (divide by N) of a full warm-up buffer."""
    if not buffer.full:
        raise ValueError(
            f"warm-up needs exactly {buffer.capacity} norms, have {len(buffer.norms)}"
        )
    n = len(buffer.norms)
    mu = sum(buffer.norms) / n
    var = sum((g - mu) ** 2 for g in buffer.norms) / n
    return EmaState(mu=mu, var=var, alpha=alpha, epsilon=epsilon, steps_seen=n)


# Acklam's rational approximation to the inverse normal CDF, |rel err| < 1.15e-9.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def _tail(q: float) -> float:
    c, d = _C, _D
    num = ((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]
    den = (((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0
    return num / den


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF."""
    p = float(p)
    if not (0.0 < p < 1.0):
        raise ValueError(f"probability must lie strictly inside (0, 1), got {p!r}")
    if p < _P_LOW:
        return _tail(math.sqrt(-2.0 * math.log(p)))
    if p > 1.0 - _P_LOW:
        return -_tail(math.sqrt(-2.0 * math.log1p(-p)))
    q = p - 0.5
    r = q * q
    a, b = _A, _B
    num = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q
    den = ((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0
    return num / den


class NormalityResult(NamedTuple):
    statistic: float
    p_like: float


def normality_diagnostic(window: Sequence[float]) -> NormalityResult:
    """Jarque-Bera statistic of ``window`` with its chi-square(2) tail probability.

    Skewness and kurtosis use the biased (1/n) central moments.
    """
    n = len(window)
    if n < 8:
        raise ValueError(f"normality window needs at least 8 values, got {n}")
    xs = [_check_finite(v) for v in window]
    mean = math.fsum(xs) / n
    dev = [x - mean for x in xs]
    m2 = math.fsum(d * d for d in dev) / n
    if m2 <= 0.0 or max(xs) == min(xs):
        raise ValueError("normality diagnostic undefined for a zero-variance window")
    m3 = math.fsum(d ** 3 for d in dev) / n
    m4 = math.fsum(d ** 4 for d in dev) / n
    skew = m3 / m2 ** 1.5
    kurt = m4 / (m2 * m2)
    jb = n / 6.0 * (skew * skew + (kurt - 3.0) ** 2 / 4.0)
    # chi-square with 2 dof has survival function exp(-x/2)
    return NormalityResult(jb, math.exp(-jb / 2.0))
