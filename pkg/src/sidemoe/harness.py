"""Desk-scale experiment driver and ablation sweeps."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from sidemoe import memory_model as mm
from sidemoe import moe_router as mr
from sidemoe import side_network as sn
from sidemoe.config import RunConfig
from sidemoe.errors import ConfigError, NumericError
from sidemoe.requant import Requantizer, RequantSchedule, apply_drift, total_error, write_event_log

EPOCH_FIELDS = ("epoch", "task_loss", "balance_loss", "total_loss", "train_acc", "val_acc",
                "error_q", "requant_events", "val_balance")
SWEEP_AXES = ("component", "p", "N")
COMPONENTS = ("neither", "gnpiq", "ismoe", "both")


@dataclass(frozen=True)
class SyntheticTask:
    """Sequence classification with cluster-specific linear rules.

    Every sequence belongs to one of ``n_clusters`` latent clusters. A token is
    the cluster centre plus low-rank content ``z @ basis`` and isotropic noise.
    The source task asks for the cluster; the target label is
    ``argmax(rules[c] @ mean(z))`` with a separate rule matrix per cluster.
    """

    seed: int = 0
    seq_len: int = 8
    dim: int = 32
    n_clusters: int = 6
    n_classes: int = 4
    n_train: int = 512
    n_val: int = 256
    n_test: int = 256
    n_source: int = 1024
    token_noise: float = 0.1
    latent_rank: int = 4

    def generate(self) -> dict[str, np.ndarray]:
        rng = np.random.default_rng([self.seed, 101])
        rank = self.latent_rank
        centres = rng.normal(0.0, 1.0, (self.n_clusters, self.dim))
        basis = rng.normal(0.0, 1.0 / np.sqrt(rank), (rank, self.dim))
        rules = rng.normal(0.0, 1.0, (self.n_clusters, self.n_classes, rank))

        def draw(n):
            c = rng.integers(0, self.n_clusters, n)
            z = rng.normal(0.0, 1.0, (n, self.seq_len, rank))
            u = z @ basis + rng.normal(0.0, self.token_noise, (n, self.seq_len, self.dim))
            x = centres[c][:, None, :] + u
            y = np.einsum("nkr,nr->nk", rules[c], z.mean(axis=1)).argmax(axis=1)
            return x, y, c

        n_target = self.n_train + self.n_val + self.n_test
        x, y, c = draw(n_target)
        xs, _, cs = draw(self.n_source)
        a, b = self.n_train, self.n_train + self.n_val
        return {
            "x_train": x[:a], "y_train": y[:a], "c_train": c[:a],
            "x_val": x[a:b], "y_val": y[a:b], "c_val": c[a:b],
            "x_test": x[b:], "y_test": y[b:], "c_test": c[b:],
            "x_source": xs, "y_source": cs,
        }


def task_for(cfg: RunConfig) -> SyntheticTask:
    return SyntheticTask(cfg.seed, cfg.seq_len, cfg.dim, cfg.n_clusters, cfg.n_classes,
                         cfg.n_train, cfg.n_val, cfg.n_test, token_noise=cfg.token_noise,
                         latent_rank=cfg.latent_rank)


def architecture_for(cfg: RunConfig) -> sn.Architecture:
    return sn.Architecture(
        dim=cfg.dim, seq_len=cfg.seq_len, layers=cfg.layers, ffn_mult=cfg.ffn_mult, r=cfg.r,
        n_experts=cfg.n_experts if cfg.use_moe else 1, top_k=cfg.top_k if cfg.use_moe else 1,
        expert_mult=cfg.expert_mult, n_classes=cfg.n_classes, source_classes=cfg.n_clusters,
        use_moe=cfg.use_moe, use_correlation=cfg.use_correlation, post_mask=cfg.post_mask,
        layer_drop=cfg.layer_drop_indices,
    )


def memory_for(cfg: RunConfig) -> dict:
    arch = architecture_for(cfg)
    bb_dims, bb_w, side_dims = sn.network_shapes(arch, cfg.batch_size)
    D = arch.dim
    fp = mm.TrainingFootprint(
        frozen_weights=sum(bb_w),
        layernorm_weights=2 * D * arch.layers,
        side_weights=sn.side_param_count(arch),
        backbone_activations=sum(bb_dims),
        side_activations=sum(side_dims),
        quantized=cfg.quantize,
        requant_fraction=cfg.p if cfg.quantize else 0.0,
    )
    return mm.training_memory(fp, mm.PrecisionMap(frozen=cfg.bits if cfg.bits in mm.VALID_BITS else 8))


@dataclass
class RunReport:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    events: list = field(default_factory=list)
    routing: list[dict] = field(default_factory=list)
    memory: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def final(self, key: str):
        return self.epochs[-1][key] if self.epochs else math.nan

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EPOCH_FIELDS)
            for row in self.epochs:
                w.writerow([_fmt(row[k]) for k in EPOCH_FIELDS])

    def summary_dict(self) -> dict:
        return {"config": self.config, "summary": self.summary, "memory": self.memory}

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _accuracy(logits: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(logits.argmax(axis=1) == y))


def _routing_rows(epoch: int, decisions: Sequence[mr.RoutingDecision]) -> list[dict]:
    rows = []
    for j, d in enumerate(decisions):
        f, P = mr.balance_stats(d.indices[:, 0], d.probs)
        bal = mr.load_balancing_loss(d)
        for e in range(d.n_experts):
            rows.append({"epoch": epoch, "block": j, "expert": e, "token_share": float(f[e]),
                         "mean_prob": float(P[e]), "balance_loss": bal})
    return rows


def prepare(cfg: RunConfig):
    """Data, pretrained (and possibly quantized) backbone and fresh side network for ``cfg``."""
    data = task_for(cfg).generate()
    arch = architecture_for(cfg)
    backbone = sn.pretrain_backbone(arch, data["x_source"], data["y_source"], cfg.seed, cfg.pretrain_steps)
    if cfg.quantize:
        backbone.quantize(cfg.bits, cfg.rounding)
    side = sn.SideNetwork.init(arch, cfg.seed)
    return data, backbone, side


def _epoch(cfg, epoch, data, backbone, side, opt, requant, groups, drift_rng, train_rng):
    n_events = len(requant.step(epoch)) if requant else 0
    xtr, ytr = data["x_train"], data["y_train"]
    task_sum = bal_sum = tot_sum = 0.0
    for idx in sn.iter_batches(len(ytr), cfg.batch_size, train_rng):
        losses = sn.train_step(xtr[idx], ytr[idx], backbone, side, opt, cfg.alpha, cfg.beta)
        task_sum += losses.task * len(idx)
        bal_sum += losses.balance * len(idx)
        tot_sum += losses.total * len(idx)
    if groups and cfg.drift_fraction > 0:
        apply_drift(groups, cfg.drift_fraction, drift_rng, cfg.drift_sigma, cfg.drift_mean)
    val = side.forward(sn.GradTape(enabled=False), data["x_val"], backbone)
    n = len(ytr)
    row = {
        "epoch": epoch,
        "task_loss": task_sum / n,
        "balance_loss": bal_sum / n,
        "total_loss": tot_sum / n,
        "train_acc": _accuracy(sn.predict(xtr, backbone, side), ytr),
        "val_acc": _accuracy(val.logits.value, data["y_val"]),
        "error_q": total_error(groups) if groups else 0.0,
        "requant_events": n_events,
        "val_balance": mr.load_balancing_loss(val.decisions) if val.decisions else 1.0,
    }
    return row, val.decisions


def run_experiment(cfg: RunConfig, out_dir=None) -> RunReport:
    """Pretrain → quantize → fine-tune with periodic re-quantization → evaluate.

    Re-quantization happens at the start of every epoch that is a multiple of
    ``interval``; synthetic drift is applied to the frozen float weights at
    the end of each epoch.
    """
    t0 = time.perf_counter()
    data, backbone, side = prepare(cfg)
    groups = list(backbone.groups.values())
    requant = None
    if groups and cfg.p > 0:
        schedule = RequantSchedule(cfg.p, cfg.interval, cfg.epochs, cfg.seed)
        requant = Requantizer(groups, schedule, noise=cfg.noise, rounding=cfg.rounding)
    drift_rng = np.random.default_rng([cfg.seed, 11])
    train_rng = np.random.default_rng([cfg.seed, 13])
    opt = sn.AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    report = RunReport(config=cfg.to_dict(), memory=memory_for(cfg))
    for epoch in range(1, cfg.epochs + 1):
        try:
            row, decisions = _epoch(cfg, epoch, data, backbone, side, opt, requant, groups, drift_rng, train_rng)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}: {exc}") from exc
        report.epochs.append(row)
        report.routing.extend(_routing_rows(epoch, decisions))
    if requant:
        report.events = list(requant.events)
    test_logits = sn.predict(data["x_test"], backbone, side)
    report.summary = {
        "final_val_acc": report.final("val_acc"),
        "test_acc": _accuracy(test_logits, data["y_test"]),
        "final_task_loss": report.final("task_loss"),
        "final_error_q": report.final("error_q"),
        "final_balance": report.final("val_balance"),
        "requant_events": len(report.events),
        "trainable_params": int(sn.flatten(sn.trainable_parameters(side, backbone)).size),
        "memory_bytes": report.memory["total"],
    }
    report.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        write_artifacts(report, out_dir, backbone, side)
    return report


def write_artifacts(report: RunReport, out_dir, backbone=None, side=None) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report_csv": out / "report.csv",
        "summary_json": out / "summary.json",
        "events_csv": out / "requant_events.csv",
        "routing_csv": out / "routing.csv",
    }
    report.write_csv(paths["report_csv"])
    report.write_json(paths["summary_json"])
    write_event_log(report.events, paths["events_csv"])
    mr.write_diagnostics(paths["routing_csv"], report.routing)
    (out / "timing.json").write_text(json.dumps({"wall_clock_s": report.wall_clock}) + "\n")
    if backbone is not None and side is not None:
        paths["checkpoint"] = out / "checkpoint.npz"
        sn.save_checkpoint(paths["checkpoint"], backbone, side, report.config)
    return paths


def sweep_configs(axis: str, values: Sequence, base: RunConfig) -> list[tuple[str, RunConfig]]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = []
    for v in values:
        if axis == "component":
            v = str(v)
            if v not in COMPONENTS:
                raise ConfigError(f"unknown component setting {v!r}; expected one of {COMPONENTS}")
            quant = v in ("gnpiq", "both")
            moe = v in ("ismoe", "both")
            cfg = base.with_(quantize=quant, use_moe=moe, use_correlation=moe and base.use_correlation,
                             p=base.p if quant else 0.0)
        elif axis == "p":
            cfg = base.with_(p=float(v))
        else:
            n = int(v)
            cfg = base.with_(n_experts=n, top_k=min(base.top_k, n))
        out.append((str(v), cfg))
    return out


def _run_summary(cfg: RunConfig) -> RunReport:
    return run_experiment(cfg)


def ablation_sweep(axis: str, values: Sequence, base: RunConfig, out_csv=None,
                   workers: int | None = None) -> list[tuple[str, RunReport]]:
    """One run per value with everything else (including the seed) held fixed."""
    configs = sweep_configs(axis, values, base)
    workers = workers or int(os.environ.get("SIDEMOE_THREADS", "1") or 1)
    cfgs = [c for _, c in configs]
    if workers > 1 and len(cfgs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cfgs))) as ex:
            reports = list(ex.map(_run_summary, cfgs))
    else:
        reports = [run_experiment(c) for c in cfgs]
    rows = list(zip([v for v, _ in configs], reports))
    if out_csv is not None:
        write_sweep_csv(axis, rows, out_csv)
    return rows


SWEEP_FIELDS = ("axis", "value", "final_val_acc", "test_acc", "final_error_q", "memory_bytes", "final_balance")


def write_sweep_csv(axis: str, rows, path) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for value, rep in rows:
            s = rep.summary
            w.writerow([axis, value] + [_fmt(s[k]) for k in SWEEP_FIELDS[2:]])
    os.replace(tmp, path)


def component_memory(base: RunConfig) -> dict[str, float]:
    """Analytic training bytes for each component setting."""
    return {v: memory_for(c)["total"] for v, c in sweep_configs("component", COMPONENTS, base)}
