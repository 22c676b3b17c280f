"""Sparse top-k expert routing with backbone-guided refinement.

Plain gating: ``G(x) = softmax(mask_k(x W + b))``. Refined gating averages
the gate distribution with a correlation prior ``c = softmax(h · rᵀ)``
computed from the backbone's salient token ``h`` and one learnable
representative token per expert::

    g'(x) = (softmax(x W + b) + c) / 2

then keeps the top-k entries of ``g'`` and renormalizes them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from sidemoe.errors import ConfigError, DimensionError
from sidemoe.numerics import kernels as K

POST_MASK_MODES = ("renormalize", "softmax")
DEFAULT_EXPERTS = 6
DEFAULT_TOP_K = 1
DEFAULT_BALANCE_WEIGHT = 1e-3
INIT_STD = 0.02


@dataclass
class GateWeights:
    projection: np.ndarray  # (D, N)
    bias: np.ndarray | None = None  # (N,)

    def __post_init__(self):
        self.projection = K.as_dense(self.projection)
        if self.projection.ndim != 2 or self.projection.shape[1] < 1:
            raise DimensionError(f"gate projection must be D×N with N >= 1, got {self.projection.shape}")
        if self.bias is not None:
            self.bias = K.as_dense(self.bias)
            if self.bias.shape != (self.projection.shape[1],):
                raise DimensionError(f"gate bias {self.bias.shape} vs N={self.projection.shape[1]}")

    @property
    def n_experts(self) -> int:
        return self.projection.shape[1]

    @classmethod
    def init(cls, dim: int, n_experts: int, rng: np.random.Generator) -> "GateWeights":
        return cls(rng.normal(0.0, INIT_STD, (dim, n_experts)), np.zeros(n_experts))


@dataclass
class RepresentativeTokens:
    matrix: np.ndarray  # (N, D)

    def __post_init__(self):
        self.matrix = K.as_dense(self.matrix)
        if self.matrix.ndim != 2:
            raise DimensionError(f"representative tokens must be N×D, got {self.matrix.shape}")

    @classmethod
    def init(cls, n_experts: int, dim: int, rng: np.random.Generator) -> "RepresentativeTokens":
        return cls(rng.normal(0.0, INIT_STD, (n_experts, dim)))


@dataclass
class RoutingDecision:
    """Per-token routing outcome for T tokens over N experts.

    ``indices``/``weights`` are (T, k), ordered by decreasing routing score.
    ``probs`` is the dense (T, N) distribution selection was made on: the
    refined scores when a correlation prior is used, else softmax(scores).
    """

    indices: np.ndarray
    weights: np.ndarray
    scores: np.ndarray
    probs: np.ndarray
    correlation: np.ndarray | None = None

    @property
    def n_experts(self) -> int:
        return self.scores.shape[1]

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def dense_weights(self) -> np.ndarray:
        out = np.zeros_like(self.scores)
        np.put_along_axis(out, self.indices, self.weights, axis=1)
        return out


def _rows(x) -> np.ndarray:
    x = K.as_dense(x)
    return x[None, :] if x.ndim == 1 else x


def _dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # fixed accumulation order over the shared axis, independent of column position
    return (a[:, :, None] * b[None, :, :]).sum(axis=1)


def _check_k(k: int, n: int) -> None:
    if isinstance(k, bool) or int(k) != k or not 1 <= k <= n:
        raise ConfigError(f"top-k must satisfy 1 <= k <= N={n}, got {k}")


def select_topk(values: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row, largest first; ties go to the lower index."""
    values = _rows(values)
    _check_k(k, values.shape[1])
    if np.any(np.isnan(values)):
        raise ConfigError("cannot rank NaN routing scores")
    return np.argsort(-values, axis=1, kind="stable")[:, :k]


def gate_scores(x, gate: GateWeights) -> np.ndarray:
    """Raw gating scores ``x W (+ b)`` for a token (D,) or tokens (T, D)."""
    xr = _rows(x)
    if xr.shape[1] != gate.projection.shape[0]:
        raise DimensionError(f"token width {xr.shape[1]} vs gate input {gate.projection.shape[0]}")
    s = _dot(xr, gate.projection)
    if gate.bias is not None:
        s = s + gate.bias
    return s[0] if np.ndim(x) == 1 else s


def topk_mask(scores, k: int) -> np.ndarray:
    s = _rows(scores)
    idx = select_topk(s, k)
    out = np.full_like(s, -np.inf)
    np.put_along_axis(out, idx, np.take_along_axis(s, idx, axis=1), axis=1)
    return out[0] if np.ndim(scores) == 1 else out


def routing_probs(scores, k: int) -> np.ndarray:
    """softmax(mask_k(scores)); unselected experts get exactly 0."""
    return K.softmax(topk_mask(scores, k), axis=-1)


def correlation_scores(salient_token, reps: RepresentativeTokens) -> np.ndarray:
    """Softmax-normalized similarity of the salient token with each expert's representative."""
    h = _rows(salient_token)
    if h.shape[1] != reps.matrix.shape[1]:
        raise DimensionError(f"salient token width {h.shape[1]} vs representatives {reps.matrix.shape}")
    c = K.softmax(_dot(h, reps.matrix.T), axis=-1)
    return c[0] if np.ndim(salient_token) == 1 else c


def combine_selected(probs: np.ndarray, k: int, post_mask: str = "renormalize"):
    """Pick the top-k of each row of ``probs`` and turn them into mixing weights."""
    if post_mask not in POST_MASK_MODES:
        raise ConfigError(f"post_mask must be one of {POST_MASK_MODES}, got {post_mask!r}")
    idx = select_topk(probs, k)
    sel = np.take_along_axis(probs, idx, axis=1)
    if post_mask == "softmax":
        w = K.softmax(sel, axis=1)
    else:
        # selected entries are already sorted descending; fixed-order sum
        w = sel / sel.sum(axis=1, keepdims=True)
    return idx, w


def refined_routing(
    x,
    salient_token,
    gate: GateWeights,
    reps: RepresentativeTokens | None,
    k: int = DEFAULT_TOP_K,
    post_mask: str = "renormalize",
) -> RoutingDecision:
    """Route tokens ``x`` (T, D) using gate scores blended with the correlation prior.

    ``salient_token`` is (D_b,) shared by all tokens or (T, D_b) per token.
    With ``reps=None`` this reduces to plain top-k gating.
    """
    xr = _rows(x)
    scores = _rows(gate_scores(xr, gate))
    _check_k(k, scores.shape[1])
    p = K.softmax(scores, axis=1)
    c = None
    if reps is not None:
        if reps.matrix.shape[0] != scores.shape[1]:
            raise DimensionError(f"{reps.matrix.shape[0]} representative tokens for {scores.shape[1]} experts")
        c = _rows(correlation_scores(salient_token, reps))
        if c.shape[0] == 1:
            c = np.repeat(c, scores.shape[0], axis=0)
        p = (p + c) / 2
    idx, w = combine_selected(p, k, post_mask)
    return RoutingDecision(indices=idx, weights=w, scores=scores, probs=p, correlation=c)


def plain_routing(x, gate: GateWeights, k: int = DEFAULT_TOP_K) -> RoutingDecision:
    return refined_routing(x, None, gate, None, k)


def dispatch_combine(x, decision: RoutingDecision, experts: Sequence[Callable[[np.ndarray], np.ndarray]]) -> np.ndarray:
    """Σ_i G_i(x) E_i(x) evaluating each expert only on the tokens routed to it."""
    xr = _rows(x)
    if len(experts) != decision.n_experts:
        raise DimensionError(f"{len(experts)} experts for a decision over {decision.n_experts}")
    out = None
    for e, fn in enumerate(experts):
        tok, slot = np.nonzero(decision.indices == e)
        if tok.size == 0:
            continue
        y = np.asarray(fn(xr[tok]), dtype=np.float64)
        if y.ndim != 2 or y.shape[0] != tok.size:
            raise DimensionError(f"expert {e} returned shape {y.shape} for {tok.size} tokens")
        if out is None:
            out = np.zeros((xr.shape[0], y.shape[1]))
        elif y.shape[1] != out.shape[1]:
            raise DimensionError(f"expert {e} output width {y.shape[1]} differs from {out.shape[1]}")
        out[tok] += decision.weights[tok, slot][:, None] * y
    return out[0] if np.ndim(x) == 1 else out


def balance_stats(top1: np.ndarray, probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(f, P): share of tokens whose top-1 is each expert, and mean routing mass per expert."""
    n = probs.shape[1]
    f = np.bincount(np.asarray(top1).ravel(), minlength=n) / len(top1)
    return f, probs.mean(axis=0)


def load_balancing_loss(decisions: RoutingDecision | Sequence[RoutingDecision]) -> float:
    """N · Σ_i f_i P_i, pooled over all tokens of the given decisions (1 at perfect balance)."""
    if isinstance(decisions, RoutingDecision):
        decisions = [decisions]
    top1 = np.concatenate([d.indices[:, 0] for d in decisions])
    probs = np.concatenate([d.probs for d in decisions])
    if top1.size == 0:
        raise ConfigError("load balancing loss needs at least one routed token")
    f, p = balance_stats(top1, probs)
    return float(probs.shape[1] * np.dot(f, p))


def write_diagnostics(path, rows: Sequence[dict]) -> None:
    """Routing diagnostics CSV: epoch, block, expert, token_share, mean_prob, balance_loss."""
    fields = ("epoch", "block", "expert", "token_share", "mean_prob", "balance_loss")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in fields])
