"""Command-line entry point: quantize, train, memory-report, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from sidemoe import memory_model as mm
from sidemoe import quantizer as qz
from sidemoe.config import HELP, SECTIONS, RunConfig
from sidemoe.errors import ConfigError, DimensionError, NumericError
from sidemoe.harness import COMPONENTS, SWEEP_AXES, ablation_sweep, architecture_for, memory_for, run_experiment
from sidemoe.side_network import network_shapes

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
DEFAULT_R_SWEEP = (1, 2, 4, 8)

log = logging.getLogger("sidemoe")


def config_epilog() -> str:
    defaults = RunConfig()
    lines = ["config keys (INI section / key = default):"]
    for sec, keys in SECTIONS.items():
        lines.append(f"  [{sec}]")
        for k in keys:
            v = getattr(defaults, k)
            shown = str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, str) else v
            lines.append(f"    {k} = {shown}  ({HELP[k]})")
    return "\n".join(lines)


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    return cfg


# -- quantize ----------------------------------------------------------------

def read_weights(path) -> np.ndarray:
    """Float weights from a .npy file or comma/newline separated text."""
    p = Path(path)
    try:
        if p.suffix == ".npy":
            w = np.load(p, allow_pickle=False)
        else:
            text = p.read_text()
            tokens = [t for t in text.replace("\n", ",").replace("\r", ",").split(",") if t.strip()]
            if not tokens:
                raise ConfigError(f"{path}: no weights found")
            try:
                w = np.array([float(t.replace("−", "-")) for t in tokens])
            except ValueError as exc:
                raise ConfigError(f"{path}: not a list of floats ({exc})") from None
    except (OSError, EOFError) as exc:
        raise OSError(f"cannot read weights {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: unreadable tensor ({exc})") from exc
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ConfigError(f"{path}: no weights found")
    if not np.all(np.isfinite(w)):
        raise NumericError(f"{path}: weights contain NaN or infinity")
    return w


def cmd_quantize(args) -> dict:
    w = read_weights(args.weights)
    q = qz.quantize_tensor(w, args.bits, args.rounding)
    deq = qz.dequantize(q)
    report = {
        "s": q.params.scale,
        "z": q.params.zero_point,
        "n": q.params.bits,
        "rounding": args.rounding,
        "Error_q": qz.quantization_error(w, q),
        "max_abs_residual": float(np.max(np.abs(w - deq))),
        "shape": list(w.shape),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.weights).stem
    qz.save(q, out / f"{stem}.smqt")
    (out / f"{stem}.report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return report


# -- train ---------------------------------------------------------------------

def cmd_train(args) -> dict:
    cfg = load_config(args)
    out = Path(args.out)
    log.info("training with seed %d for %d epochs", cfg.seed, cfg.epochs)
    report = run_experiment(cfg, out_dir=out)
    (out / "config.ini").write_text(cfg.to_ini())
    print(json.dumps(report.summary, sort_keys=True))
    return report.summary


# -- memory report ---------------------------------------------------------------

def _parse_rs(text: str) -> list[float]:
    try:
        rs = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"r sweep must be comma-separated numbers, got {text!r}") from None
    if not rs:
        raise ConfigError("r sweep is empty")
    for r in rs:
        if r < 1:
            raise ConfigError(f"reduction factor r must be >= 1, got {r}")
    return [int(r) if r == int(r) else r for r in rs]


def memory_report(cfg: RunConfig, rs) -> dict:
    arch = architecture_for(cfg)
    bb_dims, bb_w, _ = network_shapes(arch, cfg.batch_size)
    shape = mm.NetworkShape(bb_dims, bb_w)
    prec = mm.PrecisionMap(frozen=cfg.bits if cfg.bits in mm.VALID_BITS else 8)
    full = mm.backprop_memory(shape, prec)
    rows = []
    for row, r in zip(mm.r_sweep(shape, rs, prec), rs):
        side = mm.side_memory(shape, r, prec)
        rows.append({**row, "side_total_bytes": side.total})
    counts = {"frozen": shape.weight_elements, "layernorm": 2 * cfg.dim * cfg.layers}
    weight_bytes, saving = mm.mixed_precision_weights(counts, prec)
    uniform8 = mm.mixed_precision_weights({"frozen": shape.weight_elements}, mm.PrecisionMap(frozen=8))[1]
    return {
        "backbone": full.to_dict(),
        "petl_floor_bytes": mm.petl_floor(shape, prec),
        "r_sweep": rows,
        "mixed_precision": {"weight_bytes": weight_bytes, "savings_ratio": saving},
        "uniform_8bit_savings_ratio": uniform8,
        "training": memory_for(cfg),
    }


def cmd_memory_report(args) -> dict:
    cfg = load_config(args)
    rs = _parse_rs(args.r_values) if args.r_values else list(DEFAULT_R_SWEEP)
    report = memory_report(cfg, rs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    (out / "memory_report.json").write_text(text)
    print(text, end="")
    return report


# -- ablate ----------------------------------------------------------------------

def parse_values(axis: str, text: str) -> list:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise ConfigError("ablation needs at least one value")
    if axis == "component":
        return items
    out = []
    for t in items:
        if axis == "N" and ".." in t:
            lo, hi = t.split("..")
            out.extend(range(int(lo), int(hi) + 1))
            continue
        try:
            out.append(int(t) if axis == "N" else float(t.rstrip("%")) / (100 if t.endswith("%") else 1))
        except ValueError:
            raise ConfigError(f"bad value {t!r} for axis {axis}") from None
    return out


def cmd_ablate(args) -> list:
    cfg = load_config(args)
    values = parse_values(args.axis, args.values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ablation_sweep(args.axis, values, cfg, out_csv=out / f"ablate_{args.axis}.csv")
    for value, rep in rows:
        print(f"{args.axis}={value} " + json.dumps(rep.summary, sort_keys=True))
    return rows


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    epilog = config_epilog()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI config file")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (created if absent)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    fmt = argparse.RawDescriptionHelpFormatter

    parser = argparse.ArgumentParser(prog="sidemoe", description=__doc__, epilog=epilog, formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("quantize", parents=[common], help="quantize a weight file", epilog=epilog, formatter_class=fmt)
    p.add_argument("weights", help=".npy array or comma-separated floats")
    p.add_argument("--bits", "-n", type=int, default=8)
    p.add_argument("--rounding", choices=qz.ROUNDING_MODES, default="floor")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("train", parents=[common], help="run one fine-tuning experiment", epilog=epilog,
                       formatter_class=fmt)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("memory-report", parents=[common], help="analytic memory budget", epilog=epilog,
                       formatter_class=fmt)
    p.add_argument("--r-values", metavar="LIST", help="comma-separated reduction factors (default 1,2,4,8)")
    p.set_defaults(func=cmd_memory_report)

    p = sub.add_parser("ablate", parents=[common], help="sweep one axis", epilog=epilog, formatter_class=fmt)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True,
                   help=f"comma-separated values; component takes {','.join(COMPONENTS)}, N accepts 3..8")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, DimensionError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
