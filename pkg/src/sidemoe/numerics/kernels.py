"""Dense float64 kernels with hand-derived backward passes.

Every forward kernel here is a pure function of its inputs. Backward kernels
take the cache returned by the forward call (or the forward inputs) plus the
upstream gradient and return gradients for each differentiable input.
"""

from __future__ import annotations

import math

import numpy as np

from sidemoe.errors import ConfigError, DimensionError, InvalidDistributionError, NumericError

DEFAULT_LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def as_dense(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_dense(a)
    b = as_dense(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_backward(a: np.ndarray, b: np.ndarray, dc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (dA, dB) = (dC Bᵀ, Aᵀ dC)."""
    return dc @ b.T, a.T @ dc


def layer_norm(x, gamma, beta, eps: float = DEFAULT_LN_EPS):
    """Row-wise layer normalization followed by a per-column affine map.

    Returns ``(y, cache)``; pass ``cache`` to :func:`layer_norm_backward`.
    ``eps`` may be zero, in which case a constant row is a numeric error.
    """
    if eps < 0 or not math.isfinite(eps):
        raise ConfigError(f"layer_norm eps must be a finite value >= 0, got {eps}")
    x = as_dense(x)
    gamma = as_dense(gamma)
    beta = as_dense(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} must match last dim of x {x.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    denom = var + eps
    if np.any(denom <= 0):
        raise NumericError("layer_norm: zero-variance row with eps=0")
    inv_std = 1.0 / np.sqrt(denom)
    xhat = xc * inv_std
    y = xhat * gamma + beta
    return y, (xhat, inv_std, gamma)


def layer_norm_backward(dy: np.ndarray, cache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    xhat, inv_std, gamma = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def softmax(x, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax; ``-inf`` entries map to exactly 0."""
    x = as_dense(x)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    m = x.max(axis=axis, keepdims=True)
    if np.any(np.isneginf(m)):
        raise InvalidDistributionError("softmax: all entries are -inf along the reduction axis")
    if np.any(np.isnan(x)) or np.any(np.isposinf(m)):
        raise NumericError("softmax: non-finite input")
    e = np.exp(x - m)
    # summing in sorted order makes the result exactly permutation-equivariant
    return e / np.sort(e, axis=axis).sum(axis=axis, keepdims=True)


def softmax_backward(y: np.ndarray, dy: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    z = x - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy_loss(logits, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``.

    Returns ``(loss, dlogits)`` where ``dlogits = (softmax - onehot) / B``.
    """
    logits = np.atleast_2d(as_dense(logits))
    labels = np.atleast_1d(np.asarray(labels))
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {b} rows")
    if not np.issubdtype(labels.dtype, np.integer):
        raise IndexError("cross_entropy: labels must be integer class indices")
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError(f"cross_entropy: label out of range for {c} classes")
    logp = log_softmax(logits, axis=1)
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= b
    return float(loss), grad


def gelu(x: np.ndarray) -> np.ndarray:
    """tanh approximation of GELU (smooth, so finite differences behave)."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x)))


def gelu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def token_mix(mix: np.ndarray, h: np.ndarray, seq_len: int) -> np.ndarray:
    """Apply an S×S mixing matrix to every sequence of a (B·S)×D row stack."""
    if mix.shape != (seq_len, seq_len) or h.ndim != 2 or h.shape[0] % seq_len:
        raise DimensionError(f"token_mix: mix {mix.shape} incompatible with rows {h.shape}, S={seq_len}")
    hb = h.reshape(-1, seq_len, h.shape[1])
    return np.matmul(mix, hb).reshape(h.shape)


def token_mix_backward(mix, h, seq_len, dy):
    hb = h.reshape(-1, seq_len, h.shape[1])
    db = dy.reshape(hb.shape)
    dmix = np.einsum("bsd,btd->st", db, hb)
    dh = np.matmul(mix.T, db).reshape(h.shape)
    return dmix, dh
