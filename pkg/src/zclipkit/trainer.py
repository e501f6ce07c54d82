"""Toy end-to-end training loop for comparing clipping policies.

A small MLP classifier on a two-class Gaussian mixture, trained with
momentum SGD on the globally clipped gradient. Instability is injected with
label-corrupted batches and a high learning rate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from zclipkit.policies import ClipPolicy, NoClip, StepRecord, make_clipper, parse_policy

ACTIVATIONS = ("softplus", "tanh")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class ToyModel:
    """Fully connected network with a smooth activation and softmax output."""

    def __init__(
        self,
        sizes: Sequence[int] = (8, 64, 64, 2),
        activation: str = "softplus",
        seed: int = 0,
    ):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {sizes!r}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        self.sizes = tuple(int(s) for s in sizes)
        self.activation = activation
        rng = np.random.default_rng(seed)
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.params.append(rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), (fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def _act(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.activation == "softplus":
            return _softplus(z), _sigmoid(z)
        a = np.tanh(z)
        return a, 1.0 - a * a

    def loss(self, x: np.ndarray, y: np.ndarray, params: Sequence[np.ndarray] | None = None) -> float:
        return self.loss_and_grad(x, y, params, need_grad=False)[0]

    def loss_and_grad(
        self,
        x: np.ndarray,
        y: np.ndarray,
        params: Sequence[np.ndarray] | None = None,
        need_grad: bool = True,
    ) -> tuple[float, list[np.ndarray]]:
        """Mean cross-entropy over the batch and its gradient for every parameter."""
        params = self.params if params is None else params
        h = x
        cache = []
        L = len(params) // 2
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(L):
                W, b = params[2 * i], params[2 * i + 1]
                z = h @ W + b
                if i < L - 1:
                    a, da = self._act(z)
                    cache.append((h, da))
                    h = a
                else:
                    cache.append((h, None))
                    logits = z
            shift = logits - logits.max(axis=1, keepdims=True)
            logp = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))
            n = x.shape[0]
            loss = float(-logp[np.arange(n), y].mean())
            if not need_grad:
                return loss, []

            delta = np.exp(logp)
            delta[np.arange(n), y] -= 1.0
            delta /= n
            grads: list[np.ndarray] = [None] * len(params)  # type: ignore[list-item]
            for i in reversed(range(L)):
                h_in, da = cache[i]
                if da is not None:
                    delta = delta * da
                grads[2 * i] = h_in.T @ delta
                grads[2 * i + 1] = delta.sum(axis=0)
                if i > 0:
                    delta = delta @ params[2 * i].T
        return loss, grads


def global_norm(grads: Sequence[np.ndarray]) -> float:
    """L2 norm of all gradients concatenated."""
    return math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads))


def make_dataset(n: int, dim: int, rng: np.random.Generator, separation: float = 2.0):
    """Two Gaussian blobs at +/- ``separation/2`` along a random unit direction."""
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    y = rng.integers(0, 2, n)
    x = rng.standard_normal((n, dim)) + np.outer(np.where(y == 1, 0.5, -0.5) * separation, direction)
    return x, y


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    schedule: str = "constant"
    warmup_steps: int = 0
    end_fraction: float = 0.10
    steps: int = 1500
    batch_size: int = 32
    momentum: float = 0.9
    policy: ClipPolicy = field(default_factory=NoClip)
    corruption_rate: float = 0.0
    corruption_fraction: float = 1.0
    corruption_start: int = 0
    feature_scale: float = 1.0
    hidden: tuple[int, ...] = (64, 64)
    input_dim: int = 8
    activation: str = "softplus"
    n_train: int = 4096
    n_eval: int = 256
    separation: float = 2.0
    divergence_factor: float = 10.0
    spike_window: int = 100
    spike_k: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.policy, str):
            self.policy = parse_policy(self.policy)
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.learning_rate > 0:
            raise ValueError(f"train.learning_rate must be > 0, got {self.learning_rate!r}")
        if self.schedule not in ("constant", "warmup_cosine"):
            raise ValueError(f"train.schedule must be 'constant' or 'warmup_cosine', got {self.schedule!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("train.steps and train.batch_size must be >= 1")
        if not 0 <= self.warmup_steps <= self.steps:
            raise ValueError(f"train.warmup_steps must lie in [0, steps], got {self.warmup_steps!r}")
        if not 0.0 <= self.end_fraction <= 1.0:
            raise ValueError(f"train.end_fraction must lie in [0, 1], got {self.end_fraction!r}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"train.momentum must lie in [0, 1), got {self.momentum!r}")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ValueError(f"train.corruption_rate must lie in [0, 1], got {self.corruption_rate!r}")
        if not 0.0 <= self.corruption_fraction <= 1.0:
            raise ValueError(f"train.corruption_fraction must lie in [0, 1], got {self.corruption_fraction!r}")
        if not self.feature_scale > 0:
            raise ValueError(f"train.feature_scale must be > 0, got {self.feature_scale!r}")
        if self.corruption_start < 0:
            raise ValueError(f"train.corruption_start must be >= 0, got {self.corruption_start!r}")
        if not self.divergence_factor > 1:
            raise ValueError(f"train.divergence_factor must be > 1, got {self.divergence_factor!r}")
        if self.spike_window < 2 or not self.spike_k > 0:
            raise ValueError("train.spike_window must be >= 2 and train.spike_k > 0")

    def lr_at(self, step: int) -> float:
        """Learning rate for 1-based ``step``."""
        lr = self.learning_rate
        if self.schedule == "constant":
            return lr
        if self.warmup_steps and step <= self.warmup_steps:
            return lr * step / self.warmup_steps
        span = max(self.steps - self.warmup_steps, 1)
        progress = min((step - self.warmup_steps) / span, 1.0)
        return lr * (self.end_fraction + (1.0 - self.end_fraction) * 0.5 * (1.0 + math.cos(math.pi * progress)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["policy"] = self.policy.label
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainReport:
    policy: str
    seed: int
    loss_curve: list[float]
    batch_loss_curve: list[float]
    pre_clip_norms: list[float]
    post_clip_norms: list[float]
    records: list[StepRecord]
    corrupted_steps: list[int]
    initial_loss: float
    final_loss: float
    loss_spikes: int
    spike_count: int
    diverged: bool
    clip_fraction: float
    steps_completed: int

    def to_dict(self, with_records: bool = False) -> dict:
        d = {
            "policy": self.policy,
            "seed": self.seed,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
            "loss_spikes": self.loss_spikes,
            "spike_count": self.spike_count,
            "diverged": self.diverged,
            "clip_fraction": self.clip_fraction,
            "steps_completed": self.steps_completed,
            "corrupted_steps": self.corrupted_steps,
            "loss_curve": self.loss_curve,
            "batch_loss_curve": self.batch_loss_curve,
            "pre_clip_norms": self.pre_clip_norms,
            "post_clip_norms": self.post_clip_norms,
        }
        if with_records:
            d["records"] = [asdict(r) for r in self.records]
        return d


def detect_loss_spikes(loss_curve: Sequence[float], window: int = 100, k: float = 10.0) -> int:
    """Count loss excursions above the trailing median by more than ``k`` trailing MADs.

    Each step ``t >= window`` is compared with the ``window`` values before it;
    runs of consecutive flagged steps count as one spike.
    """
    if window < 2:
        raise ValueError(f"window must be >= 2, got {window!r}")
    if not k > 0:
        raise ValueError(f"k must be > 0, got {k!r}")
    y = np.asarray(loss_curve, dtype=np.float64)
    if y.size < window:
        raise ValueError(f"loss curve of length {y.size} is shorter than window {window}")
    if y.size == window:
        return 0
    trailing = np.lib.stride_tricks.sliding_window_view(y[:-1], window)
    med = np.median(trailing, axis=1)
    mad = np.median(np.abs(trailing - med[:, None]), axis=1)
    flagged = y[window:] > med + k * mad
    starts = flagged & ~np.concatenate([[False], flagged[:-1]])
    return int(starts.sum())


def train(config: TrainConfig) -> TrainReport:
    """Run the training loop; divergence halts it and returns a partial report."""
    rng = np.random.default_rng(config.seed)
    x_all, y_all = make_dataset(config.n_train + config.n_eval, config.input_dim, rng, config.separation)
    x_train, y_train = x_all[: config.n_train], y_all[: config.n_train]
    x_eval, y_eval = x_all[config.n_train :], y_all[config.n_train :]

    model = ToyModel((config.input_dim, *config.hidden, 2), config.activation, seed=config.seed + 1)
    clipper = make_clipper(config.policy)
    velocity = [np.zeros_like(p) for p in model.params]

    initial = model.loss(x_eval, y_eval)
    losses: list[float] = []
    batch_losses: list[float] = []
    pre: list[float] = []
    post: list[float] = []
    records: list[StepRecord] = []
    corrupted: list[int] = []
    diverged = False

    for step in range(1, config.steps + 1):
        idx = rng.integers(0, config.n_train, config.batch_size)
        xb, yb = x_train[idx], y_train[idx].copy()
        if rng.random() < config.corruption_rate and step > config.corruption_start:
            flip = rng.random(config.batch_size) < config.corruption_fraction
            yb[flip] = 1 - yb[flip]
            xb = xb * config.feature_scale
            corrupted.append(step)

        batch_loss, grads = model.loss_and_grad(xb, yb)
        norm = global_norm(grads)
        rec = clipper.step(norm, step)
        records.append(rec)
        batch_losses.append(batch_loss)
        pre.append(norm)
        post.append(rec.clipped_norm)
        if not (rec.valid and math.isfinite(batch_loss)):
            diverged = True
            break

        lr = config.lr_at(step)
        scale = rec.scale
        for p, v, g in zip(model.params, velocity, grads):
            v *= config.momentum
            v += scale * g
            p -= lr * v

        with np.errstate(over="ignore", invalid="ignore"):
            eval_loss = model.loss(x_eval, y_eval)
        if not (math.isfinite(eval_loss) and all(np.isfinite(p).all() for p in model.params)):
            diverged = True
            break
        losses.append(eval_loss)

    # a halted run has no meaningful final loss
    final = math.inf if diverged else losses[-1]
    if final > config.divergence_factor * min(losses, default=initial):
        diverged = True

    detected = 0
    if len(losses) >= config.spike_window:
        detected = detect_loss_spikes(losses, config.spike_window, config.spike_k)
    clipped = sum(r.was_clipped for r in records)
    return TrainReport(
        policy=config.policy.label,
        seed=config.seed,
        loss_curve=losses,
        batch_loss_curve=batch_losses,
        pre_clip_norms=pre,
        post_clip_norms=post,
        records=records,
        corrupted_steps=corrupted,
        initial_loss=initial,
        final_loss=final,
        loss_spikes=detected,
        spike_count=detected + int(diverged),
        diverged=diverged,
        clip_fraction=clipped / len(records) if records else 0.0,
        steps_completed=len(losses),
    )
