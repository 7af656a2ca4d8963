"""roda command line: gen, fit, adapt, eval, ablate, sweep.

Exit codes: 0 success, 2 config/usage, 3 numeric failure, 4 data/label failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

from . import __version__
from .alignment import METHODS, adapt, load_adapter, save_adapter
from .config import RunConfig, apply_overrides, load_config
from .errors import ConfigError, RodaError, SizeError
from .evaluation import ablation_runner, evaluate, sweep
from .feature_store import (load_feature_set, payload_path, read_meta, save_feature_set,
                            split_target)
from .memory_bank import bank_from_feature_set, load_bank, save_bank
from .shiftlab import ShiftSpec, apply_shift, generate_world


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _workers() -> int:
    raw = os.environ.get("RODA_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RODA_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("RODA_THREADS must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return apply_overrides(cfg, args.set or [])


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    source, target = generate_world(cfg.world)
    shifted = apply_shift(target, cfg.shift)
    split = split_target(shifted, cfg.eval.train_fraction, cfg.eval.split_seed)
    sets = {
        "source": source,
        "target-clean": target,
        "target-train": split.train.replace(split.train.samples, f"{shifted.domain_tag}-train"),
        "target-test": split.test.replace(split.test.samples, f"{shifted.domain_tag}-test"),
    }
    files = {}
    for name, fs in sets.items():
        meta = out / f"{name}.json"
        save_feature_set(fs, meta)
        files[name] = {
            "meta": meta.name, "meta_sha256": _sha256(meta),
            "payload": payload_path(meta).name, "payload_sha256": _sha256(payload_path(meta)),
            "n_samples": len(fs),
        }
    manifest = {"version": cfg.version, "config": cfg.to_dict(), "files": files}
    _write(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return 0


def cmd_fit(args, cfg: RunConfig) -> int:
    fraction = cfg.bank.coreset_fraction if args.coreset_fraction is None else args.coreset_fraction
    seed = cfg.bank.seed if args.seed is None else args.seed
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"--coreset-fraction must lie in (0, 1], got {fraction}")
    source = load_feature_set(args.features)
    try:
        bank = bank_from_feature_set(source, fraction, seed)
    except SizeError as exc:
        raise ConfigError(f"--coreset-fraction: {exc}") from None
    save_bank(bank, args.bank_out)
    return 0


def cmd_adapt(args, cfg: RunConfig) -> int:
    bank = load_bank(args.bank)
    train = load_feature_set(args.target_train)
    adapter, trace = adapt(bank, train, cfg.adapt, args.method)
    provenance = {"method": args.method, "adapt": cfg.adapt.to_dict(), "target": train.domain_tag}
    save_adapter(adapter, args.adapter_out, provenance)
    if args.trace_out:
        _write(args.trace_out, trace.to_jsonl())
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    bank = load_bank(args.bank)
    test = load_feature_set(args.test)
    adapter, method = None, "none"
    if args.adapter:
        adapter = load_adapter(args.adapter)
        method = read_meta(args.adapter).get("provenance", {}).get("method", "unknown")
    fingerprint = {"method": method, "test_domain": test.domain_tag,
                   "bank_prototypes": bank.size, "coreset_fraction": bank.coreset_fraction}
    report = evaluate(bank, adapter, test, fingerprint)
    _write(args.report_out, report.to_json() + "\n")
    return 0


def _shift_list(cfg: RunConfig):
    return [ShiftSpec(k, s, cfg.shift.seed) for k in cfg.eval.shift_kinds for s in cfg.eval.severities]


def cmd_ablate(args, cfg: RunConfig) -> int:
    table = ablation_runner(cfg.world, _shift_list(cfg), cfg.eval.methods, cfg.eval.seeds,
                            cfg.bank.coreset_fraction, cfg.eval.train_fraction, cfg.adapt, _workers())
    out = Path(args.out)
    _write(out / "ablation.jsonl", table.to_jsonl())
    _write(out / "ablation.txt", table.render())
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    table = sweep(cfg.eval.sweep_axis, cfg.eval.sweep_values, cfg.world, cfg.shift, cfg.eval.method,
                  cfg.eval.seeds, cfg.bank.coreset_fraction, cfg.eval.train_fraction, cfg.adapt, _workers())
    out = Path(args.out)
    _write(out / "sweep.jsonl", table.to_jsonl())
    _write(out / "sweep.txt", table.render())
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (sections world, shift, bank, adapt, eval)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config field; repeatable")
    common.add_argument("--print-config", action="store_true",
                        help="print the fully resolved config and exit")

    parser = argparse.ArgumentParser(prog="roda", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"roda {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate source and shifted target feature sets")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("fit", parents=[common], help="build a coreset memory bank")
    p.add_argument("--features", required=True)
    p.add_argument("--bank-out", required=True)
    p.add_argument("--coreset-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("adapt", parents=[common], help="fit an affine adapter on target training data")
    p.add_argument("--bank", required=True)
    p.add_argument("--target-train", required=True)
    p.add_argument("--method", choices=METHODS, default="robust-ot")
    p.add_argument("--adapter-out", required=True)
    p.add_argument("--trace-out")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", parents=[common], help="score a test set and write an AUROC report")
    p.add_argument("--bank", required=True)
    p.add_argument("--adapter")
    p.add_argument("--test", required=True)
    p.add_argument("--report-out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="methods x shifts x seeds table")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", parents=[common], help="AUROC curve along severity or train_fraction")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args)
        if args.print_config:
            sys.stdout.write(cfg.to_json())
            return 0
        return args.func(args, cfg)
    except RodaError as exc:
        print(f"roda {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, KeyError) as exc:
        print(f"roda {args.command}: data error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
