"""Frozen quantized backbone stub plus a trainable mixture-of-experts side branch.

Shapes: a batch of B sequences of S tokens with width D is carried as a
(B·S)×D row stack. Each backbone layer is

    h ← h + Mix·h            (fixed S×S token mixing per sequence)
    h ← LN(h + FFN(h))

Each side block runs at width d = ⌊D/r⌋:

    s ← s + Ladder(h_l)       (backbone layer-l output, downsampled)
    s ← s + Mix_side·s
    s ← LN(s + MoE(s))        (routed with layer l's salient token)

and the head classifies the sequence mean of the last side state.
"""

from __future__ import annotations

import io
import json
import zlib
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable

import numpy as np

from sidemoe import moe_router as mr
from sidemoe import quantizer as qz
from sidemoe.errors import ConfigError, DimensionError, NumericError
from sidemoe.numerics import GradTape, Var
from sidemoe.numerics.kernels import DEFAULT_LN_EPS
from sidemoe.requant import QuantGroup


@dataclass(frozen=True)
class Architecture:
    dim: int = 32
    seq_len: int = 8
    layers: int = 4
    ffn_mult: int = 2
    r: int = 2
    n_experts: int = mr.DEFAULT_EXPERTS
    top_k: int = mr.DEFAULT_TOP_K
    expert_mult: int = 2
    n_classes: int = 4
    source_classes: int = 6
    use_moe: bool = True
    use_correlation: bool = True
    post_mask: str = "renormalize"
    layer_drop: tuple[int, ...] = ()
    ln_eps: float = DEFAULT_LN_EPS

    def __post_init__(self):
        object.__setattr__(self, "layer_drop", tuple(sorted(set(int(i) for i in self.layer_drop))))
        for name in ("dim", "seq_len", "layers", "ffn_mult", "expert_mult", "n_classes", "source_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.r < 1 or self.dim // self.r < 1:
            raise ConfigError(f"reduction factor r={self.r} leaves no side width for D={self.dim}")
        if self.n_experts < 1:
            raise ConfigError(f"n_experts must be >= 1, got {self.n_experts}")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k must be in [1, {self.n_experts}], got {self.top_k}")
        if self.post_mask not in mr.POST_MASK_MODES:
            raise ConfigError(f"post_mask must be one of {mr.POST_MASK_MODES}, got {self.post_mask!r}")
        if any(not 0 <= i < self.layers for i in self.layer_drop):
            raise ConfigError(f"layer_drop {self.layer_drop} outside [0, {self.layers})")
        if len(self.layer_drop) >= self.layers:
            raise ConfigError("layer_drop removes every layer")

    @property
    def side_dim(self) -> int:
        return self.dim // self.r

    @property
    def hidden(self) -> int:
        return self.ffn_mult * self.dim

    @property
    def expert_hidden(self) -> int:
        return self.expert_mult * self.side_dim

    @property
    def retained(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.layers) if i not in self.layer_drop)

    @property
    def experts_built(self) -> int:
        return self.n_experts if self.use_moe else 1


def _init(seed: int, name: str, shape, std: float) -> np.ndarray:
    # per-name streams: a parameter's init never depends on which others exist
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return rng.normal(0.0, std, shape)


# -- backbone --------------------------------------------------------------

def backbone_param_specs(arch: Architecture) -> dict[str, tuple[tuple[int, ...], float | str]]:
    D, S, H = arch.dim, arch.seq_len, arch.hidden
    specs = {}
    for l in range(arch.layers):
        specs[f"L{l}.mix"] = ((S, S), 0.5 / np.sqrt(S))
        specs[f"L{l}.ffn.w1"] = ((D, H), 1 / np.sqrt(D))
        specs[f"L{l}.ffn.b1"] = ((H,), "zeros")
        specs[f"L{l}.ffn.w2"] = ((H, D), 1 / np.sqrt(H))
        specs[f"L{l}.ffn.b2"] = ((D,), "zeros")
        specs[f"L{l}.ln.gamma"] = ((D,), "ones")
        specs[f"L{l}.ln.beta"] = ((D,), "zeros")
    return specs


def _build(specs, seed):
    out = {}
    for name, (shape, std) in specs.items():
        if std == "zeros":
            out[name] = np.zeros(shape)
        elif std == "ones":
            out[name] = np.ones(shape)
        else:
            out[name] = _init(seed, name, shape, std)
    return out


def is_layernorm(name: str) -> bool:
    return ".ln." in name


class BackboneStub:
    """Backbone whose non-LayerNorm weights are frozen (optionally quantized).

    ``groups`` holds one :class:`QuantGroup` per frozen tensor when
    quantized; forward passes read their dequantized codes. ``ln`` holds the
    full-precision LayerNorm parameters, which stay trainable.
    """

    def __init__(self, arch: Architecture, weights: dict[str, np.ndarray]):
        self.arch = arch
        self.ln = {k: np.array(v, dtype=np.float64) for k, v in weights.items() if is_layernorm(k)}
        self.frozen = {k: np.array(v, dtype=np.float64) for k, v in weights.items() if not is_layernorm(k)}
        self.groups: dict[str, QuantGroup] = {}
        self._deq: dict[str, np.ndarray] = {}
        self._deq_src: dict[str, qz.QuantizedTensor] = {}

    @classmethod
    def init(cls, arch: Architecture, seed: int) -> "BackboneStub":
        return cls(arch, _build(backbone_param_specs(arch), seed))

    @property
    def quantized(self) -> bool:
        return bool(self.groups)

    def quantize(self, bits: int = 8, rounding: str = "floor") -> None:
        self.groups = {k: QuantGroup.quantized(k, w, bits, rounding) for k, w in self.frozen.items()}
        self._deq.clear()
        self._deq_src.clear()

    def weight(self, name: str) -> np.ndarray:
        """Weight values seen by the forward pass."""
        if not self.groups:
            return self.frozen[name]
        q = self.groups[name].q
        if self._deq_src.get(name) is not q:
            self._deq[name] = qz.dequantize(q)
            self._deq_src[name] = q
        return self._deq[name]

    def effective_weights(self) -> dict[str, np.ndarray]:
        return {k: self.weight(k).copy() for k in self.frozen}

    def forward(self, tape: GradTape, x: Var, ln_vars: dict[str, Var] | None = None,
                weight_vars: dict[str, Var] | None = None) -> list[Var]:
        """Per-layer outputs. Frozen weights enter as constants unless ``weight_vars`` is given."""
        arch = self.arch
        S = arch.seq_len
        ln_vars = ln_vars or {k: tape.constant(v) for k, v in self.ln.items()}

        def W(name):
            if weight_vars is not None:
                return weight_vars[name]
            return tape.constant(self.weight(name))

        h = x
        outs = []
        for l in range(arch.layers):
            h = tape.add(h, tape.token_mix(W(f"L{l}.mix"), h, S))
            z = tape.gelu(tape.add_row(tape.matmul(h, W(f"L{l}.ffn.w1")), W(f"L{l}.ffn.b1")))
            f = tape.add_row(tape.matmul(z, W(f"L{l}.ffn.w2")), W(f"L{l}.ffn.b2"))
            h = tape.layer_norm(tape.add(h, f), ln_vars[f"L{l}.ln.gamma"], ln_vars[f"L{l}.ln.beta"], arch.ln_eps)
            outs.append(h)
        return outs

    def frozen_element_count(self) -> int:
        return sum(w.size for w in self.frozen.values())

    def ln_element_count(self) -> int:
        return sum(w.size for w in self.ln.values())


def salient_rows(batch: int, seq_len: int) -> np.ndarray:
    """Row index of position 0 in each sequence."""
    return np.arange(batch) * seq_len


def pretrain_backbone(arch: Architecture, x: np.ndarray, y: np.ndarray, seed: int, steps: int = 150,
                      lr: float = 3e-3, batch_size: int = 64) -> BackboneStub:
    """Full-precision pretraining on a source task, classifying from the last salient token."""
    weights = _build(backbone_param_specs(arch), seed)
    weights["head.w"] = _init(seed, "pretrain.head.w", (arch.dim, arch.source_classes), 1 / np.sqrt(arch.dim))
    weights["head.b"] = np.zeros(arch.source_classes)
    stub = BackboneStub(arch, {})
    opt = AdamW(lr=lr)
    rng = np.random.default_rng([seed, 7])
    n = x.shape[0]
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        tape = GradTape()
        pv = {k: tape.param(v, k) for k, v in weights.items()}
        xb = tape.constant(x[idx].reshape(-1, arch.dim))
        outs = stub.forward(tape, xb, ln_vars=pv, weight_vars=pv)
        cls_tok = tape.take_rows(outs[-1], salient_rows(len(idx), arch.seq_len))
        logits = tape.add_row(tape.matmul(cls_tok, pv["head.w"]), pv["head.b"])
        loss = tape.cross_entropy(logits, y[idx])
        tape.backward(loss)
        opt.step(weights, {k: v.grad for k, v in pv.items()})
    del weights["head.w"], weights["head.b"]
    return BackboneStub(arch, weights)


# -- side network ----------------------------------------------------------

def side_param_specs(arch: Architecture) -> dict[str, tuple[tuple[int, ...], float | str]]:
    D, S, d, h = arch.dim, arch.seq_len, arch.side_dim, arch.expert_hidden
    specs = {
        "in.w": ((D, d), 1 / np.sqrt(D)),
        "in.b": ((d,), "zeros"),
    }
    for j, _ in enumerate(arch.retained):
        p = f"B{j}"
        specs[f"{p}.ladder.w"] = ((D, d), 1 / np.sqrt(D))
        specs[f"{p}.ladder.b"] = ((d,), "zeros")
        specs[f"{p}.mix"] = ((S, S), 0.5 / np.sqrt(S))
        for e in range(arch.experts_built):
            specs[f"{p}.E{e}.w1"] = ((d, h), 1 / np.sqrt(d))
            specs[f"{p}.E{e}.b1"] = ((h,), "zeros")
            specs[f"{p}.E{e}.w2"] = ((h, d), 1 / np.sqrt(h))
            specs[f"{p}.E{e}.b2"] = ((d,), "zeros")
        if arch.use_moe:
            specs[f"{p}.gate.w"] = ((d, arch.n_experts), mr.INIT_STD)
            specs[f"{p}.gate.b"] = ((arch.n_experts,), "zeros")
            if arch.use_correlation:
                specs[f"{p}.reps"] = ((arch.n_experts, D), mr.INIT_STD)
        specs[f"{p}.ln.gamma"] = ((d,), "ones")
        specs[f"{p}.ln.beta"] = ((d,), "zeros")
    specs["head.w"] = ((d, arch.n_classes), 1 / np.sqrt(d))
    specs["head.b"] = ((arch.n_classes,), "zeros")
    return specs


def expert_param_count(arch: Architecture) -> int:
    d, h = arch.side_dim, arch.expert_hidden
    return d * h + h + h * d + d


def side_param_count(arch: Architecture) -> int:
    """Closed-form count of side-network parameters."""
    D, S, d, N, C = arch.dim, arch.seq_len, arch.side_dim, arch.n_experts, arch.n_classes
    per_block = (D * d + d) + S * S + 2 * d + arch.experts_built * expert_param_count(arch)
    if arch.use_moe:
        per_block += d * N + N
        if arch.use_correlation:
            per_block += N * D
    return (D * d + d) + len(arch.retained) * per_block + d * C + C


@dataclass
class ForwardResult:
    logits: Var
    balance: Var | None
    decisions: list[mr.RoutingDecision] = field(default_factory=list)
    side_states: list[Var] = field(default_factory=list)


class SideNetwork:
    def __init__(self, arch: Architecture, params: dict[str, np.ndarray]):
        self.arch = arch
        self.params = params
        self.expert_calls: Counter = Counter()

    @classmethod
    def init(cls, arch: Architecture, seed: int) -> "SideNetwork":
        return cls(arch, _build(side_param_specs(arch), seed))

    def _expert(self, tape, pv, prefix, x):
        z = tape.gelu(tape.add_row(tape.matmul(x, pv[f"{prefix}.w1"]), pv[f"{prefix}.b1"]))
        return tape.add_row(tape.matmul(z, pv[f"{prefix}.w2"]), pv[f"{prefix}.b2"])

    def _moe(self, tape: GradTape, pv, j: int, s: Var, salient: Var):
        arch = self.arch
        T = s.shape[0]
        p = f"B{j}"
        scores = tape.add_row(tape.matmul(s, pv[f"{p}.gate.w"]), pv[f"{p}.gate.b"])
        probs = tape.softmax(scores)
        corr = None
        if arch.use_correlation:
            corr = tape.softmax(tape.matmul_nt(salient, pv[f"{p}.reps"]))
            probs = tape.scale(tape.add(probs, tape.repeat_rows(corr, arch.seq_len)), 0.5)
        idx = mr.select_topk(probs.value, arch.top_k)
        rows = np.repeat(np.arange(T)[:, None], arch.top_k, axis=1)
        sel = tape.gather(probs, rows, idx)
        w = tape.row_normalize(sel) if arch.post_mask == "renormalize" else tape.softmax(sel)
        out = None
        for e in range(arch.n_experts):
            tok, slot = np.nonzero(idx == e)
            if tok.size == 0:
                continue
            self.expert_calls[(j, e)] += 1
            y = self._expert(tape, pv, f"{p}.E{e}", tape.take_rows(s, tok))
            part = tape.scatter_rows(tape.mul_rows(y, tape.gather(w, tok, slot)), tok, T)
            out = part if out is None else tape.add(out, part)
        f, _ = mr.balance_stats(idx[:, 0], probs.value)
        balance = tape.weighted_sum(probs, np.broadcast_to(arch.n_experts * f / T, probs.shape))
        decision = mr.RoutingDecision(
            indices=idx, weights=w.value, scores=scores.value, probs=probs.value,
            correlation=None if corr is None else np.repeat(corr.value, arch.seq_len, axis=0),
        )
        return out, balance, decision

    def forward(self, tape: GradTape, x: np.ndarray, backbone: BackboneStub,
                pv: dict[str, Var] | None = None, ln_vars: dict[str, Var] | None = None) -> ForwardResult:
        """Run backbone and side branch on x of shape (B, S, D)."""
        arch = self.arch
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (arch.seq_len, arch.dim):
            raise DimensionError(f"input must be (B, {arch.seq_len}, {arch.dim}), got {x.shape}")
        if backbone.arch.dim != arch.dim or backbone.arch.layers != arch.layers:
            raise DimensionError("backbone and side network disagree on width or depth")
        B = x.shape[0]
        pv = pv or {k: tape.constant(v) for k, v in self.params.items()}
        xv = tape.constant(x.reshape(B * arch.seq_len, arch.dim))
        outs = backbone.forward(tape, xv, ln_vars)
        cls_rows = salient_rows(B, arch.seq_len)
        s = tape.add_row(tape.matmul(xv, pv["in.w"]), pv["in.b"])
        balances, decisions, states = [], [], []
        for j, l in enumerate(arch.retained):
            p = f"B{j}"
            s = tape.add(s, tape.add_row(tape.matmul(outs[l], pv[f"{p}.ladder.w"]), pv[f"{p}.ladder.b"]))
            s = tape.add(s, tape.token_mix(pv[f"{p}.mix"], s, arch.seq_len))
            if arch.use_moe:
                salient = tape.take_rows(outs[l], cls_rows)
                y, bal, dec = self._moe(tape, pv, j, s, salient)
                balances.append(bal)
                decisions.append(dec)
            else:
                self.expert_calls[(j, 0)] += 1
                y = self._expert(tape, pv, f"{p}.E0", s)
            s = tape.layer_norm(tape.add(s, y), pv[f"{p}.ln.gamma"], pv[f"{p}.ln.beta"], arch.ln_eps)
            states.append(s)
        pooled = tape.seq_mean(s, arch.seq_len)
        logits = tape.add_row(tape.matmul(pooled, pv["head.w"]), pv["head.b"])
        balance = tape.lincomb([(1.0 / len(balances), b) for b in balances]) if balances else None
        return ForwardResult(logits, balance, decisions, states)


# -- trainable view, loss, optimizer ------------------------------------------

BACKBONE_PREFIX = "backbone."


def trainable_parameters(side: SideNetwork | None, backbone: BackboneStub | None = None) -> dict[str, np.ndarray]:
    """Every trainable array by name: side parameters plus backbone LayerNorm.

    The returned arrays are the live storage; pass ``side=None`` to freeze
    the side branch and ``backbone=None`` to freeze LayerNorm too.
    """
    out = {}
    if side is not None:
        out.update(side.params)
    if backbone is not None:
        out.update({BACKBONE_PREFIX + k: v for k, v in backbone.ln.items()})
    return out


def flatten(params: dict[str, np.ndarray]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([v.ravel() for v in params.values()])


def unflatten_into(params: dict[str, np.ndarray], flat: np.ndarray) -> None:
    off = 0
    for v in params.values():
        v[...] = flat[off: off + v.size].reshape(v.shape)
        off += v.size
    if off != flat.size:
        raise DimensionError(f"flat vector of {flat.size} for {off} parameters")


@dataclass
class LossBreakdown:
    task: float
    balance: float
    total: float
    alpha: float
    beta: float


def loss_and_grads(x, y, backbone: BackboneStub, side: SideNetwork, alpha: float = 1.0,
                   beta: float = mr.DEFAULT_BALANCE_WEIGHT, with_grads: bool = True):
    """Total loss α·CE + β·balance and gradients for every trainable parameter."""
    tape = GradTape(enabled=with_grads)
    pv = {k: tape.param(v, k) for k, v in side.params.items()}
    lnv = {k: tape.param(v, BACKBONE_PREFIX + k) for k, v in backbone.ln.items()}
    res = side.forward(tape, x, backbone, pv, lnv)
    task = tape.cross_entropy(res.logits, np.asarray(y))
    terms = [(alpha, task)]
    bal_val = 1.0
    if res.balance is not None:
        terms.append((beta, res.balance))
        bal_val = float(res.balance.value)
    total = tape.lincomb(terms)
    task_val = float(task.value)
    if not np.isfinite(task_val):
        raise NumericError("non-finite task (cross-entropy) loss")
    if not np.isfinite(bal_val):
        raise NumericError("non-finite load-balancing loss")
    grads = {}
    if with_grads:
        tape.backward(total)
        for k, v in pv.items():
            grads[k] = v.grad if v.grad is not None else np.zeros_like(v.value)
        for k, v in lnv.items():
            grads[BACKBONE_PREFIX + k] = v.grad if v.grad is not None else np.zeros_like(v.value)
    losses = LossBreakdown(task_val, bal_val, float(total.value), alpha, beta)
    return losses, grads, res


def gradient_check(x, y, backbone: BackboneStub, side: SideNetwork, alpha: float = 1.0,
                   beta: float = mr.DEFAULT_BALANCE_WEIGHT, h: float = 1e-5) -> dict[str, float]:
    """Max relative error of tape gradients against central differences, per trainable tensor.

    Expert selection is held fixed at the unperturbed routing (straight-through);
    a perturbation that flips a routing decision raises :class:`NumericError`.
    """
    from sidemoe.numerics import finite_difference_check

    _, grads, base = loss_and_grads(x, y, backbone, side, alpha, beta)
    routes = [d.indices.copy() for d in base.decisions]
    params = trainable_parameters(side, backbone)
    out = {}
    for name, arr in params.items():
        orig = arr.copy()

        def f(v):
            arr[...] = v
            losses, _, res = loss_and_grads(x, y, backbone, side, alpha, beta, with_grads=False)
            if any(not np.array_equal(d.indices, r) for d, r in zip(res.decisions, routes)):
                raise NumericError(f"finite-difference step flipped a routing decision at {name}")
            return losses.total

        try:
            out[name] = finite_difference_check(f, orig, grads[name], h)
        finally:
            arr[...] = orig
    return out


class AdamW:
    """Adam with decoupled weight decay (applied to matrices only)."""

    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-2):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                continue
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            v = self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay and p.ndim >= 2:
                p -= self.lr * self.weight_decay * p
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_step(x, y, backbone: BackboneStub, side: SideNetwork, opt: AdamW, alpha: float = 1.0,
               beta: float = mr.DEFAULT_BALANCE_WEIGHT) -> LossBreakdown:
    """One optimizer update of the side network and backbone LayerNorm."""
    if len(y) == 0:
        raise ConfigError("empty batch")
    losses, grads, _ = loss_and_grads(x, y, backbone, side, alpha, beta)
    opt.step(trainable_parameters(side, backbone), grads)
    return losses


def predict(x, backbone: BackboneStub, side: SideNetwork) -> np.ndarray:
    res = side.forward(GradTape(enabled=False), x, backbone)
    return res.logits.value


# -- checkpoint ------------------------------------------------------------

def save_checkpoint(path, backbone: BackboneStub, side: SideNetwork, config: dict) -> dict:
    """Single .npz container: quantized backbone blobs, float trainables, config echo.

    Writes ``<path>.manifest.json`` next to it and returns the manifest.
    """
    arrays: dict[str, np.ndarray] = {}
    manifest = {"config": config, "quantized": [], "frozen_float": [], "trainable": []}
    for k, g in backbone.groups.items():
        arrays["q/" + k] = np.frombuffer(qz.to_bytes(g.q), dtype=np.uint8)
        manifest["quantized"].append({"name": k, "shape": list(g.q.shape), **g.q.params.to_dict()})
    if not backbone.groups:
        for k, v in backbone.frozen.items():
            arrays["f/" + k] = v
            manifest["frozen_float"].append({"name": k, "shape": list(v.shape)})
    for k, v in trainable_parameters(side, backbone).items():
        arrays["t/" + k] = v
        manifest["trainable"].append({"name": k, "shape": list(v.shape)})
    arrays["config"] = np.frombuffer(json.dumps(config, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    with open(str(path) + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def load_checkpoint(path, arch: Architecture) -> tuple[BackboneStub, SideNetwork, dict]:
    with np.load(path) as data:
        config = json.loads(bytes(data["config"]).decode())
        ln = {k[len("t/" + BACKBONE_PREFIX):]: data[k] for k in data.files if k.startswith("t/" + BACKBONE_PREFIX)}
        side_params = {k[2:]: data[k] for k in data.files
                       if k.startswith("t/") and not k.startswith("t/" + BACKBONE_PREFIX)}
        qblobs = {k[2:]: qz.from_bytes(data[k].tobytes()) for k in data.files if k.startswith("q/")}
        floats = {k[2:]: data[k] for k in data.files if k.startswith("f/")}
    weights = dict(ln)
    weights.update(floats or {k: qz.dequantize(q) for k, q in qblobs.items()})
    backbone = BackboneStub(arch, weights)
    if qblobs:
        backbone.groups = {k: QuantGroup(k, qz.dequantize(q), q) for k, q in qblobs.items()}
    return backbone, SideNetwork(arch, side_params), config


def architecture_dict(arch: Architecture) -> dict:
    d = asdict(arch)
    d["layer_drop"] = list(arch.layer_drop)
    return d


def network_shapes(arch: Architecture, batch: int):
    """Pre-activation element counts per layer for backbone and side branch at batch size ``batch``."""
    T = batch * arch.seq_len
    D, H, d, h = arch.dim, arch.hidden, arch.side_dim, arch.expert_hidden
    bb_dims, bb_w = [], []
    for _ in range(arch.layers):
        bb_dims += [T * D, T * H, T * D]
        bb_w += [arch.seq_len ** 2, D * H + H, H * D + D]
    side_dims = [T * d]
    for _ in arch.retained:
        # ladder, mixing, expert hidden, expert out (k experts per token), plus routing scores
        side_dims += [T * d, T * d, arch.top_k * T * h, arch.top_k * T * d]
        if arch.use_moe:
            side_dims.append(T * arch.n_experts * (2 if arch.use_correlation else 1))
    side_dims.append(batch * arch.n_classes)
    return bb_dims, bb_w, side_dims


def iter_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i: i + batch_size]
