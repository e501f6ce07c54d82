"""Adaptive gradient-norm clipping from EMA z-score statistics."""

from zclipkit.policies import (
    AutoClip,
    ClipPolicy,
    FixedClip,
    Mode,
    NoClip,
    StepRecord,
    ZClip,
    make_clipper,
    parse_policy,
    run_policy,
)
from zclipkit.stats import EmaState, WarmupBuffer, ema_update, normal_quantile, z_score

__all__ = [
    "AutoClip",
    "ClipPolicy",
    "EmaState",
    "FixedClip",
    "Mode",
    "NoClip",
    "StepRecord",
    "WarmupBuffer",
    "ZClip",
    "ema_update",
    "make_clipper",
    "normal_quantile",
    "parse_policy",
    "run_policy",
    "z_score",
]

__version__ = "0.1.0"
