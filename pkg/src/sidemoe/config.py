"""Run configuration: a flat set of typed keys grouped into INI sections."""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from sidemoe.errors import ConfigError
from sidemoe.quantizer import ROUNDING_MODES
from sidemoe.moe_router import POST_MASK_MODES

SECTIONS: dict[str, tuple[str, ...]] = {
    "run": ("seed", "epochs"),
    "task": ("seq_len", "dim", "n_clusters", "n_classes", "n_train", "n_val", "n_test", "token_noise", "latent_rank"),
    "backbone": ("layers", "ffn_mult", "pretrain_steps", "quantize"),
    "quantizer": ("bits", "rounding"),
    "requant": ("p", "interval", "noise", "drift_fraction", "drift_sigma", "drift_mean"),
    "router": ("n_experts", "top_k", "post_mask", "use_moe", "use_correlation"),
    "side": ("r", "expert_mult", "layer_drop"),
    "train": ("lr", "alpha", "beta", "batch_size", "weight_decay"),
}

HELP = {
    "seed": "master seed for data, init, sampling and noise",
    "epochs": "fine-tuning epochs N_epoch",
    "seq_len": "tokens per sequence S",
    "dim": "backbone width D",
    "n_clusters": "latent clusters in the synthetic tasks (source-task classes)",
    "n_classes": "target-task classes",
    "n_train": "target training sequences",
    "n_val": "target validation sequences",
    "n_test": "target test sequences",
    "token_noise": "std of isotropic per-token noise",
    "latent_rank": "rank of the token content the target rules read",
    "layers": "backbone layers L",
    "ffn_mult": "backbone FFN hidden = ffn_mult * D",
    "pretrain_steps": "full-precision source-task steps before quantization",
    "quantize": "quantize the frozen backbone",
    "bits": "code bitwidth n",
    "rounding": "floor | nearest",
    "p": "fraction of frozen elements sampled per re-quantization (0 disables)",
    "interval": "epochs between re-quantizations M",
    "noise": "add fitted Gaussian noise before re-quantizing",
    "drift_fraction": "fraction of frozen elements drifted per epoch",
    "drift_sigma": "drift std in units of the group scale",
    "drift_mean": "drift mean in units of the group scale",
    "n_experts": "experts per side block N",
    "top_k": "experts per token k",
    "post_mask": "renormalize | softmax",
    "use_moe": "expert bank (false = single dense FFN)",
    "use_correlation": "blend salient-token correlation into routing",
    "r": "side-network reduction factor",
    "expert_mult": "expert hidden = expert_mult * D/r",
    "layer_drop": "comma-separated backbone layers without a side block",
    "lr": "AdamW learning rate",
    "alpha": "task loss weight",
    "beta": "load-balancing loss weight",
    "batch_size": "sequences per step",
    "weight_decay": "AdamW decoupled weight decay",
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    epochs: int = 50
    seq_len: int = 8
    dim: int = 32
    n_clusters: int = 6
    n_classes: int = 4
    n_train: int = 512
    n_val: int = 256
    n_test: int = 256
    token_noise: float = 0.1
    latent_rank: int = 4
    layers: int = 4
    ffn_mult: int = 2
    pretrain_steps: int = 150
    quantize: bool = True
    bits: int = 8
    rounding: str = "floor"
    p: float = 0.10
    interval: int = 10
    noise: bool = True
    drift_fraction: float = 0.01
    drift_sigma: float = 0.1
    drift_mean: float = 0.0
    n_experts: int = 6
    top_k: int = 1
    post_mask: str = "renormalize"
    use_moe: bool = True
    use_correlation: bool = True
    r: int = 2
    expert_mult: int = 2
    layer_drop: str = ""
    lr: float = 3e-3
    alpha: float = 1.0
    beta: float = 1e-3
    batch_size: int = 64
    weight_decay: float = 1e-2

    def __post_init__(self):
        if self.rounding not in ROUNDING_MODES:
            raise ConfigError(f"rounding: expected one of {ROUNDING_MODES}, got {self.rounding!r}")
        if self.post_mask not in POST_MASK_MODES:
            raise ConfigError(f"post_mask: expected one of {POST_MASK_MODES}, got {self.post_mask!r}")
        if not 0 <= self.p <= 1:
            raise ConfigError(f"p: must be in [0, 1], got {self.p}")
        if self.interval < 1:
            raise ConfigError(f"interval: must be >= 1, got {self.interval}")
        if self.epochs < 0:
            raise ConfigError(f"epochs: must be >= 0, got {self.epochs}")
        if self.r < 1:
            raise ConfigError(f"r: must be >= 1, got {self.r}")
        if not 0 <= self.drift_fraction <= 1:
            raise ConfigError(f"drift_fraction: must be in [0, 1], got {self.drift_fraction}")
        for k in ("latent_rank", "n_train", "n_val", "n_test", "batch_size", "n_experts", "top_k", "n_classes", "n_clusters"):
            if getattr(self, k) < 1:
                raise ConfigError(f"{k}: must be >= 1, got {getattr(self, k)}")
        if self.top_k > self.n_experts:
            raise ConfigError(f"top_k: {self.top_k} exceeds n_experts {self.n_experts}")
        self.layer_drop_indices  # validates

    @property
    def layer_drop_indices(self) -> tuple[int, ...]:
        try:
            return tuple(int(t) for t in self.layer_drop.split(",") if t.strip())
        except ValueError as exc:
            raise ConfigError(f"layer_drop: expected comma-separated integers, got {self.layer_drop!r}") from exc

    def with_(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        d = self.to_dict()
        for sec, keys in SECTIONS.items():
            cp[sec] = {k: _render(d[k]) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        kw = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _coerce(key, raw, type(getattr(defaults, key)))
        return cls(**kw)

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        values = {}
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown config section [{sec}]")
            for key, raw in cp[sec].items():
                if key not in SECTIONS[sec]:
                    owner = next((s for s, ks in SECTIONS.items() if key in ks), None)
                    where = f" (belongs in [{owner}])" if owner else ""
                    raise ConfigError(f"unknown config key {key!r} in [{sec}]{where}")
                values[key] = raw
        return cls.from_dict(values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text)

    def save(self, path) -> None:
        Path(path).write_text(self.to_ini())


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        if typ is float and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        if not isinstance(raw, typ) or (typ is int and isinstance(raw, bool)):
            raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}")
        return raw
    s = raw.strip()
    try:
        if typ is bool:
            low = s.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError
        if typ is int:
            return int(s)
        if typ is float:
            return float(s)
        return s
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None
