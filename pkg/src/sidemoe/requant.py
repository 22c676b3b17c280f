"""Iterative re-quantization with Gaussian noise perturbation.

Every ``M`` epochs a random fraction ``p`` of all backbone elements is drawn,
noise fitted to the drift observed since the previous event is added to the
drawn elements, and each group that received a draw is recalibrated and
re-quantized. Scale and zero-point are per group, so a draw refreshes the
whole group it lands in.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from sidemoe.errors import ConfigError
from sidemoe import quantizer as qz

EVENT_FIELDS = ("epoch", "group", "pre_error", "post_error", "mu", "sigma", "scale", "zero_point")


@dataclass(frozen=True)
class RequantSchedule:
    p: float = 0.10
    interval: int = 10
    epochs: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.p <= 1:
            raise ConfigError(f"re-quantization fraction p must be in (0, 1], got {self.p}")
        if int(self.interval) != self.interval or self.interval < 1:
            raise ConfigError(f"re-quantization interval M must be an integer >= 1, got {self.interval}")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError(f"epoch count must be an integer >= 0, got {self.epochs}")

    @property
    def events(self) -> int:
        """T = N_epoch / M (whole events only)."""
        return self.epochs // self.interval

    def fires(self, epoch: int) -> bool:
        if epoch < 1:
            raise ConfigError(f"epochs are numbered from 1, got {epoch}")
        return epoch % self.interval == 0

    def event_index(self, epoch: int) -> int:
        return epoch // self.interval


@dataclass(frozen=True)
class NoiseParams:
    mu: float = 0.0
    sigma: float = 0.0
    t: int = 0

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma)):
            raise ConfigError(f"noise parameters must be finite, got mu={self.mu}, sigma={self.sigma}")
        if self.sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.sigma}")


@dataclass
class DriftRecord:
    """Float weights as of the last (re-)quantization and what has moved since."""

    snapshot: np.ndarray
    live: np.ndarray

    def __post_init__(self):
        if np.shape(self.snapshot) != np.shape(self.live):
            raise ConfigError(f"snapshot shape {np.shape(self.snapshot)} != live shape {np.shape(self.live)}")

    @property
    def deltas(self) -> np.ndarray:
        d = (np.asarray(self.live) - np.asarray(self.snapshot)).ravel()
        return d[d != 0]


def sample_subset(weight_groups: Sequence[np.ndarray], p: float, rng: np.random.Generator) -> list[np.ndarray]:
    """Draw ceil(p·U) flat element indices uniformly without replacement across all groups.

    Returns one sorted index array per group (indices local to that group).
    """
    if not weight_groups:
        raise ConfigError("no weight groups to sample from")
    if not 0 < p <= 1:
        raise ConfigError(f"sampling fraction must be in (0, 1], got {p}")
    sizes = np.array([np.size(g) for g in weight_groups], dtype=np.int64)
    total = int(sizes.sum())
    if total == 0:
        raise ConfigError("weight groups are all empty")
    count = min(total, math.ceil(round(p * total, 9)))
    picked = np.sort(rng.choice(total, size=count, replace=False))
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return [picked[(picked >= lo) & (picked < hi)] - lo for lo, hi in zip(bounds[:-1], bounds[1:])]


def fit_noise(drift, t: int = 0) -> NoiseParams:
    """Gaussian maximum-likelihood fit (mean, population std) of observed deltas.

    Accepts a :class:`DriftRecord` or a plain array of deltas. Fewer than two
    deltas give zero noise.
    """
    d = drift.deltas if isinstance(drift, DriftRecord) else np.asarray(drift, dtype=np.float64).ravel()
    if d.size < 2:
        return NoiseParams(0.0, 0.0, t)
    return NoiseParams(float(d.mean()), float(d.std()), t)


def perturb(weights, noise: NoiseParams, rng: np.random.Generator) -> np.ndarray:
    """Return ``weights + eps`` with eps ~ N(mu, sigma²) drawn independently per element."""
    w = np.asarray(weights, dtype=np.float64)
    return w + rng.normal(noise.mu, noise.sigma, size=w.shape)


@dataclass
class QuantGroup:
    """One per-tensor quantization group: live float weights plus their codes."""

    name: str
    live: np.ndarray
    q: qz.QuantizedTensor
    snapshot: np.ndarray = field(default=None)

    def __post_init__(self):
        self.live = np.array(self.live, dtype=np.float64)
        if self.snapshot is None:
            self.snapshot = self.live.copy()

    @classmethod
    def quantized(cls, name: str, weights, n: int = 8, rounding: str = "floor") -> "QuantGroup":
        return cls(name, weights, qz.quantize_tensor(weights, n, rounding))

    @property
    def size(self) -> int:
        return self.live.size

    def drift(self) -> DriftRecord:
        return DriftRecord(self.snapshot, self.live)

    def squared_error(self) -> float:
        r = self.live - qz.dequantize(self.q)
        return float(np.sum(r * r))

    def error(self) -> float:
        return qz.quantization_error(self.live, self.q)


@dataclass(frozen=True)
class RequantEvent:
    epoch: int
    group: str
    pre_error: float
    post_error: float
    mu: float
    sigma: float
    scale: float
    zero_point: int

    def row(self) -> list:
        return [self.epoch, self.group, self.pre_error, self.post_error, self.mu, self.sigma, self.scale, self.zero_point]


def requantize_step(
    group: QuantGroup,
    schedule: RequantSchedule,
    noise: NoiseParams,
    epoch: int,
    rng: np.random.Generator,
    selected: np.ndarray | None = None,
    rounding: str = "floor",
) -> qz.QuantizedTensor:
    """Re-quantize ``group`` in place if ``epoch`` is an event epoch.

    ``selected`` holds the group-local flat indices drawn by
    :func:`sample_subset`; ``None`` means every element. An empty selection
    or a non-event epoch leaves the group untouched.
    """
    if not schedule.fires(epoch):
        return group.q
    if selected is None:
        selected = np.arange(group.size)
    if len(selected) == 0:
        return group.q
    w = group.live.copy()
    flat = w.reshape(-1)
    flat[selected] = perturb(flat[selected], noise, rng)
    params = qz.calibrate(w, group.q.params.bits)
    group.q = qz.quantize(w, params, rounding)
    group.snapshot = group.live.copy()
    return group.q


def apply_drift(
    groups: Iterable[QuantGroup],
    fraction: float,
    rng: np.random.Generator,
    sigma_rel: float = 0.1,
    mean_rel: float = 0.0,
) -> None:
    """Synthetic latent weight updates: shift a fraction of each group's float weights.

    Deltas are N(mean_rel·s, (sigma_rel·s)²) where s is the group's current scale.
    """
    if not 0 <= fraction <= 1:
        raise ConfigError(f"drift fraction must be in [0, 1], got {fraction}")
    for g in groups:
        count = math.ceil(round(fraction * g.size, 9))
        if count == 0:
            continue
        idx = rng.choice(g.size, size=count, replace=False)
        s = g.q.params.scale
        g.live.reshape(-1)[idx] += rng.normal(mean_rel * s, sigma_rel * s, size=count)


class Requantizer:
    """Drives re-quantization events over a set of groups.

    Sampling and noise draw from independent streams derived from
    ``schedule.seed`` so that a run's outcome depends only on the seed.
    """

    def __init__(self, groups: Sequence[QuantGroup], schedule: RequantSchedule, noise: bool = True,
                 rounding: str = "floor"):
        self.groups = list(groups)
        self.schedule = schedule
        self.noise = noise
        self.rounding = rounding
        sample_ss, noise_ss = np.random.SeedSequence(schedule.seed).spawn(2)
        self._sample_rng = np.random.default_rng(sample_ss)
        self._noise_rng = np.random.default_rng(noise_ss)
        self.events: list[RequantEvent] = []

    def step(self, epoch: int) -> list[RequantEvent]:
        if not self.schedule.fires(epoch):
            return []
        t = self.schedule.event_index(epoch)
        picks = sample_subset([g.live for g in self.groups], self.schedule.p, self._sample_rng)
        out = []
        for g, sel in zip(self.groups, picks):
            if len(sel) == 0:
                continue
            noise = fit_noise(g.drift(), t) if self.noise else NoiseParams(0.0, 0.0, t)
            pre = g.error()
            requantize_step(g, self.schedule, noise, epoch, self._noise_rng, sel, self.rounding)
            p = g.q.params
            out.append(RequantEvent(epoch, g.name, pre, g.error(), noise.mu, noise.sigma, p.scale, p.zero_point))
        self.events.extend(out)
        return out

    def write_events(self, path) -> None:
        write_event_log(self.events, path)


def total_error(groups: Sequence[QuantGroup]) -> float:
    """Error_q over the union of all groups: (1/U) Σ (w_f - w_d)²."""
    u = sum(g.size for g in groups)
    return sum(g.squared_error() for g in groups) / u if u else 0.0


def write_event_log(events: Sequence[RequantEvent], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENT_FIELDS)
        for e in events:
            w.writerow([_fmt(v) for v in e.row()])


def _fmt(v):
    return repr(v) if isinstance(v, float) else v
