"""Closed-form training-memory accounting.

Backpropagation through an L-layer network stores the activations ``{a}``
and the activation derivatives ``{σ'}``; both have ``Σ dim(z_i)`` elements.
A side network that shrinks every width by ``r`` needs ``1/r`` of that, while
tuning methods that still backpropagate through the backbone can at best drop
the ``{a}`` half, hence the ``1/2`` floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Mapping, Sequence

from sidemoe.errors import ConfigError

VALID_BITS = (4, 8, 16, 32, 64)
FULL_PRECISION_BITS = 32


@dataclass(frozen=True)
class PrecisionMap:
    """Bits per element for each storage class."""

    frozen: int = 8
    layernorm: int = 32
    side: int = 16
    activations: int = 32
    optimizer: int = 32

    def __post_init__(self):
        for f in fields(self):
            b = getattr(self, f.name)
            if b not in VALID_BITS:
                raise ConfigError(f"precision for {f.name!r} must be one of {VALID_BITS}, got {b}")

    def bits(self, cls: str) -> int:
        if cls not in {f.name for f in fields(self)}:
            raise ConfigError(f"unknown precision class {cls!r}")
        return getattr(self, cls)


@dataclass(frozen=True)
class NetworkShape:
    """Per-layer pre-activation element counts and weight element counts."""

    dims: tuple[int, ...]
    weights: tuple[int, ...] = ()
    r: float = 1

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "weights", tuple(int(w) for w in self.weights))
        if not self.dims or any(d <= 0 for d in self.dims):
            raise ConfigError(f"layer dimensions must be positive, got {self.dims}")
        if any(w < 0 for w in self.weights):
            raise ConfigError(f"weight counts must be non-negative, got {self.weights}")
        if self.r < 1:
            raise ConfigError(f"reduction factor r must be >= 1, got {self.r}")

    @property
    def activation_elements(self) -> int:
        return sum(self.dims)

    @property
    def weight_elements(self) -> int:
        return sum(self.weights)

    def concat(self, other: "NetworkShape") -> "NetworkShape":
        return NetworkShape(self.dims + other.dims, self.weights + other.weights, self.r)

    def scaled(self, r: float) -> "NetworkShape":
        """Every width divided by r (floor, min 1); weight matrices shrink by r²."""
        if r < 1:
            raise ConfigError(f"reduction factor r must be >= 1, got {r}")
        dims = tuple(max(1, math.floor(d / r)) for d in self.dims)
        weights = tuple(max(1, math.floor(w / (r * r))) if w else 0 for w in self.weights)
        return NetworkShape(dims, weights, self.r * r)


@dataclass(frozen=True)
class MemoryBudget:
    """Bytes by category. ``bp`` is the activation + derivative total."""

    weights: float = 0.0
    gradients: float = 0.0
    activations: float = 0.0
    derivatives: float = 0.0
    optimizer: float = 0.0
    label: str = field(default="", compare=False)

    def __post_init__(self):
        for f in fields(self):
            if f.name != "label" and getattr(self, f.name) < 0:
                raise ConfigError(f"negative byte count for {f.name}")

    @property
    def bp(self) -> float:
        return self.activations + self.derivatives

    @property
    def total(self) -> float:
        return self.weights + self.gradients + self.activations + self.derivatives + self.optimizer

    def __add__(self, other: "MemoryBudget") -> "MemoryBudget":
        return MemoryBudget(
            self.weights + other.weights,
            self.gradients + other.gradients,
            self.activations + other.activations,
            self.derivatives + other.derivatives,
            self.optimizer + other.optimizer,
            self.label or other.label,
        )

    def to_dict(self) -> dict:
        return {
            "weights": self.weights,
            "gradients": self.gradients,
            "activations": self.activations,
            "derivatives": self.derivatives,
            "optimizer": self.optimizer,
            "bp": self.bp,
            "total": self.total,
        }


def _bytes(count: float, bits: int) -> float:
    return count * bits / 8


def backprop_memory(
    shape: NetworkShape,
    prec: PrecisionMap = PrecisionMap(),
    weight_bits: int = FULL_PRECISION_BITS,
    trainable: bool = True,
    optimizer_copies: int = 2,
    label: str = "",
) -> MemoryBudget:
    """Training memory of a network that is backpropagated end to end.

    |{a}| = |{σ'}| = Σ dim(z_i); trainable weights add a gradient copy and
    ``optimizer_copies`` full-precision moment buffers.
    """
    if weight_bits not in VALID_BITS:
        raise ConfigError(f"weight bits must be one of {VALID_BITS}, got {weight_bits}")
    n_act = shape.activation_elements
    n_w = shape.weight_elements
    return MemoryBudget(
        weights=_bytes(n_w, weight_bits),
        gradients=_bytes(n_w, weight_bits) if trainable else 0.0,
        activations=_bytes(n_act, prec.activations),
        derivatives=_bytes(n_act, prec.activations),
        optimizer=_bytes(n_w * optimizer_copies, prec.optimizer) if trainable else 0.0,
        label=label,
    )


def side_memory(backbone_shape: NetworkShape, r: float, prec: PrecisionMap = PrecisionMap(), **kw) -> MemoryBudget:
    """Budget of a side network obtained by shrinking the backbone by ``r``."""
    return backprop_memory(backbone_shape.scaled(r), prec, label=f"side r={r}", **kw)


def petl_floor(shape: NetworkShape, prec: PrecisionMap = PrecisionMap()) -> float:
    """Lower bound on backprop bytes for methods that still backpropagate through the backbone."""
    return 0.5 * backprop_memory(shape, prec).bp


def mixed_precision_weights(counts: Mapping[str, int], prec: PrecisionMap = PrecisionMap()) -> tuple[float, float]:
    """Weight bytes under ``prec`` and the fractional saving versus all-32-bit storage."""
    total = 0.0
    baseline = 0.0
    for cls, n in counts.items():
        if n < 0:
            raise ConfigError(f"negative parameter count for {cls!r}")
        total += _bytes(n, prec.bits(cls))
        baseline += _bytes(n, FULL_PRECISION_BITS)
    ratio = 1.0 - total / baseline if baseline else 0.0
    return total, ratio


def r_sweep(shape: NetworkShape, rs: Sequence[float], prec: PrecisionMap = PrecisionMap()) -> list[dict]:
    """One row per r: side backprop bytes next to the PETL floor."""
    floor_ = petl_floor(shape, prec)
    rows = []
    for r in rs:
        side = side_memory(shape, r, prec)
        rows.append({
            "r": r,
            "side_bp_bytes": side.bp,
            "petl_floor_bytes": floor_,
            "side_below_petl": side.bp < floor_,
            "side_equals_petl": side.bp == floor_,
        })
    return rows


@dataclass(frozen=True)
class TrainingFootprint:
    """Element counts describing one fine-tuning configuration."""

    frozen_weights: int
    layernorm_weights: int
    side_weights: int
    backbone_activations: int
    side_activations: int
    quantized: bool = True
    requant_fraction: float = 0.0


def training_memory(fp: TrainingFootprint, prec: PrecisionMap = PrecisionMap(), optimizer_copies: int = 2) -> dict:
    """Per-component bytes for a frozen backbone plus a trainable side branch.

    The backbone only stores forward activations (gradients do not enter it),
    re-quantization stages the sampled fraction of frozen weights at full
    precision, and every trainable parameter carries a gradient and optimizer
    moments.
    """
    frozen_bits = prec.frozen if fp.quantized else FULL_PRECISION_BITS
    trainable = fp.side_weights + fp.layernorm_weights
    parts = {
        "backbone_weights": _bytes(fp.frozen_weights, frozen_bits),
        "layernorm_weights": _bytes(fp.layernorm_weights, prec.layernorm),
        "requant_workspace": _bytes(fp.requant_fraction * fp.frozen_weights, FULL_PRECISION_BITS)
        if fp.quantized else 0.0,
        "backbone_activations": _bytes(fp.backbone_activations, prec.activations),
        "side_weights": _bytes(fp.side_weights, prec.side),
        "gradients": _bytes(fp.side_weights, prec.side) + _bytes(fp.layernorm_weights, prec.layernorm),
        "optimizer": _bytes(trainable * optimizer_copies, prec.optimizer),
        "side_activations": _bytes(fp.side_activations, prec.activations),
        "side_derivatives": _bytes(fp.side_activations, prec.activations),
    }
    parts["total"] = sum(parts.values())
    return parts
