"""Reverse-mode differentiation over a linear tape of recorded primitives."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from sidemoe.errors import DimensionError
from sidemoe.numerics import kernels as K


class Var:
    """A node on the tape: a value plus (after backward) its gradient."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(name={self.name!r}, shape={self.value.shape})"


class _Record:
    __slots__ = ("op", "out", "parents", "backward")

    def __init__(self, op, out, parents, backward):
        self.op = op
        self.out = out
        self.parents = parents
        self.backward = backward


class GradTape:
    """Records primitive ops as they run and replays them backwards.

    One tape per forward pass; tapes are not thread-safe. Set ``enabled=False``
    for inference, in which case ops compute values but nothing is recorded.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.records: list[_Record] = []
        self.last_backward_order: list[str] = []

    # -- leaves -----------------------------------------------------------
    def param(self, value, name: str | None = None) -> Var:
        return Var(K.as_dense(value), requires_grad=self.enabled, name=name)

    def constant(self, value, name: str | None = None) -> Var:
        return Var(K.as_dense(value), requires_grad=False, name=name)

    def _push(self, op: str, value, parents: Sequence[Var], backward: Callable) -> Var:
        needs = self.enabled and any(p.requires_grad for p in parents)
        out = Var(value, requires_grad=needs, name=op)
        if needs:
            self.records.append(_Record(op, out, tuple(parents), backward))
        return out

    # -- backward ---------------------------------------------------------
    def backward(self, loss: Var) -> None:
        if loss.value.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        loss.grad = np.ones_like(loss.value)
        self.last_backward_order = []
        for rec in reversed(self.records):
            self.last_backward_order.append(rec.op)
            g = rec.out.grad
            if g is None:
                continue
            grads = rec.backward(g)
            for parent, pg in zip(rec.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = pg.copy() if isinstance(pg, np.ndarray) else np.asarray(pg)
                else:
                    parent.grad = parent.grad + pg

    # -- primitives -------------------------------------------------------
    def matmul(self, a: Var, b: Var) -> Var:
        out = K.matmul(a.value, b.value)
        return self._push("matmul", out, (a, b), lambda g: K.matmul_backward(a.value, b.value, g))

    def matmul_nt(self, a: Var, b: Var) -> Var:
        """a · bᵀ."""
        if a.value.shape[1] != b.value.shape[1]:
            raise DimensionError(f"matmul_nt: cannot multiply {a.shape} by transpose of {b.shape}")
        out = a.value @ b.value.T
        return self._push("matmul_nt", out, (a, b), lambda g: (g @ b.value, g.T @ a.value))

    def add(self, a: Var, b: Var) -> Var:
        if a.shape != b.shape:
            raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
        return self._push("add", a.value + b.value, (a, b), lambda g: (g, g))

    def add_row(self, x: Var, bias: Var) -> Var:
        """x + bias broadcast over rows."""
        if bias.shape != (x.shape[-1],):
            raise DimensionError(f"add_row: bias {bias.shape} vs rows of {x.shape}")
        return self._push("add_row", x.value + bias.value, (x, bias), lambda g: (g, g.sum(axis=0)))

    def scale(self, x: Var, c: float) -> Var:
        return self._push("scale", x.value * c, (x,), lambda g: (g * c,))

    def mul_rows(self, x: Var, w: Var) -> Var:
        """Scale row i of x by w[i]."""
        if w.shape != (x.shape[0],):
            raise DimensionError(f"mul_rows: weights {w.shape} vs rows of {x.shape}")
        xv, wv = x.value, w.value
        out = xv * wv[:, None]
        return self._push("mul_rows", out, (x, w), lambda g: (g * wv[:, None], (g * xv).sum(axis=1)))

    def gelu(self, x: Var) -> Var:
        return self._push("gelu", K.gelu(x.value), (x,), lambda g: (K.gelu_backward(x.value, g),))

    def layer_norm(self, x: Var, gamma: Var, beta: Var, eps: float = K.DEFAULT_LN_EPS) -> Var:
        y, cache = K.layer_norm(x.value, gamma.value, beta.value, eps)
        return self._push("layer_norm", y, (x, gamma, beta), lambda g: K.layer_norm_backward(g, cache))

    def softmax(self, x: Var) -> Var:
        y = K.softmax(x.value, axis=-1)
        return self._push("softmax", y, (x,), lambda g: (K.softmax_backward(y, g, axis=-1),))

    def token_mix(self, mix: Var, h: Var, seq_len: int) -> Var:
        out = K.token_mix(mix.value, h.value, seq_len)
        return self._push(
            "token_mix", out, (mix, h), lambda g: K.token_mix_backward(mix.value, h.value, seq_len, g)
        )

    def seq_mean(self, h: Var, seq_len: int) -> Var:
        """Mean over each block of ``seq_len`` consecutive rows."""
        hv = h.value
        out = hv.reshape(-1, seq_len, hv.shape[1]).mean(axis=1)
        return self._push("seq_mean", out, (h,), lambda g: (np.repeat(g / seq_len, seq_len, axis=0),))

    def take_rows(self, x: Var, idx: np.ndarray) -> Var:
        n = x.shape[0]

        def back(g):
            dx = np.zeros((n,) + g.shape[1:])
            np.add.at(dx, idx, g)
            return (dx,)

        return self._push("take_rows", x.value[idx], (x,), back)

    def scatter_rows(self, x: Var, idx: np.ndarray, n_rows: int) -> Var:
        """Place row j of x at row idx[j] of an n_rows zero matrix (idx unique)."""
        out = np.zeros((n_rows,) + x.shape[1:])
        out[idx] = x.value
        return self._push("scatter_rows", out, (x,), lambda g: (g[idx],))

    def repeat_rows(self, x: Var, times: int) -> Var:
        out = np.repeat(x.value, times, axis=0)
        return self._push(
            "repeat_rows", out, (x,), lambda g: (g.reshape(-1, times, *g.shape[1:]).sum(axis=1),)
        )

    def gather(self, x: Var, rows: np.ndarray, cols: np.ndarray) -> Var:
        """Elements x[rows[j], cols[j]] as a vector (or matrix for 2-D index arrays)."""
        shape = x.shape

        def back(g):
            dx = np.zeros(shape)
            np.add.at(dx, (rows, cols), g)
            return (dx,)

        return self._push("gather", x.value[rows, cols], (x,), back)

    def row_normalize(self, x: Var) -> Var:
        """Divide each row by its sum."""
        xv = x.value
        s = xv.sum(axis=1, keepdims=True)
        out = xv / s

        def back(g):
            return ((g - (g * out).sum(axis=1, keepdims=True)) / s,)

        return self._push("row_normalize", out, (x,), back)

    def weighted_sum(self, x: Var, w: np.ndarray) -> Var:
        """Scalar Σ x·w with constant weights w."""
        w = K.as_dense(w)
        if w.shape != x.shape:
            raise DimensionError(f"weighted_sum: weights {w.shape} vs {x.shape}")
        return self._push("weighted_sum", np.asarray((x.value * w).sum()), (x,), lambda g: (g * w,))

    def lincomb(self, terms: Sequence[tuple[float, Var]]) -> Var:
        """Σ c_i · v_i over same-shaped vars."""
        coeffs = [c for c, _ in terms]
        vars_ = [v for _, v in terms]
        out = sum(c * v.value for c, v in terms)
        return self._push("lincomb", np.asarray(out), vars_, lambda g: tuple(g * c for c in coeffs))

    def cross_entropy(self, logits: Var, labels: np.ndarray) -> Var:
        loss, grad = K.cross_entropy_loss(logits.value, labels)
        return self._push("cross_entropy", np.asarray(loss), (logits,), lambda g: (g * grad,))
