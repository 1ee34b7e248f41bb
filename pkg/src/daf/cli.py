"""Command-line entry point: generate | train | eval | experiment.

Every command is deterministic given its resolved config (seeds included) and
writes a run manifest echoing that config plus content hashes of its inputs.
Exit codes: 0 success, 2 config/input error, 3 checkpoint/config mismatch,
1 internal error.
"""

from __future__ import annotations

import argparse
import csv
import datetime
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import data as data_mod
from .config import load_run_config, load_synth_config
from .errors import (
    CheckpointMismatchError,
    ConfigurationError,
    DafError,
    EmptyDatasetError,
    ParseError,
)
from .evaluation import (
    evaluate_nd,
    format_report_table,
    run_ablations,
    run_cold_start,
    run_few_shot,
)
from .model import WindowBatch, build_models, generator_forward
from .numerics import load_into, no_grad, save_params
from .seeding import seed_for
from .training import fit


def _blob_hash(path: Path) -> str:
    """Git-style blob hash of a file's contents."""
    data = path.read_bytes()
    h = hashlib.sha1()
    h.update(f"blob {len(data)}\0".encode())
    h.update(data)
    return h.hexdigest()


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_manifest(
    out_dir: Path, command: str, config_echo: dict, inputs: list[Path], started: float
) -> None:
    manifest = {
        "command": command,
        "config": config_echo,
        "inputs": {str(p): _blob_hash(p) for p in inputs if p.exists()},
        "out_dir": str(out_dir),
        "started_at": datetime.datetime.fromtimestamp(started).isoformat(),
        "finished_at": datetime.datetime.now().isoformat(),
        "runtime_seconds": time.time() - started,
    }
    _json_dump(manifest, out_dir / "run_manifest.json")


def _load_splits(cfg):
    """Target (and optional source) dataset splits from the configured CSVs."""
    dc = cfg.data
    if not dc["target_csv"]:
        raise ConfigurationError("[data] target_csv is required")
    target = data_mod.ingest_csv(
        dc["target_csv"],
        dc["history"],
        dc["horizon"],
        freq=dc["freq"],
        fractions=cfg.fractions(),
        seed=seed_for(cfg.seed, "split", "target"),
        stride=dc["stride"],
        domain="target",
    )
    source = None
    if cfg.model["strategy"] != "attf":
        if not dc["source_csv"]:
            raise ConfigurationError(
                f"[data] source_csv is required for strategy {cfg.model['strategy']!r}"
            )
        source = data_mod.ingest_csv(
            dc["source_csv"],
            dc["history"],
            dc["horizon"],
            freq=dc["freq"],
            fractions=cfg.fractions(),
            seed=seed_for(cfg.seed, "split", "source"),
            stride=dc["stride"],
            domain="source",
        )
    return source, target


def cmd_generate(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed, specs, echo = load_synth_config(args.spec, seed_override=args.seed)
    for dom, spec in specs.items():
        series = data_mod.generate_sinusoids(spec)
        data_mod.export_csv(series, out_dir / f"{dom}.csv")
    _json_dump(echo, out_dir / "spec_echo.json")
    _write_manifest(out_dir, "generate", echo, [Path(args.spec)], started)
    print(f"wrote {', '.join(f'{d}.csv' for d in specs)} to {out_dir}")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    cfg = load_run_config(
        args.config, {"seed": args.seed, "strategy": args.strategy, "lam": args.lam}
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    source, target = _load_splits(cfg)
    result = fit(source, target, cfg.model_config(), cfg.train_config())
    save_params(result.params, out_dir / "checkpoint.ckpt")
    with open(out_dir / "history.jsonl", "w") as fh:
        for record in result.history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    _json_dump(
        {
            "best_val_nd": result.best_val_nd,
            "best_step": result.best_step,
            "steps_run": result.steps_run,
        },
        out_dir / "train_summary.json",
    )
    inputs = [Path(args.config), Path(cfg.data["target_csv"])]
    if cfg.data["source_csv"]:
        inputs.append(Path(cfg.data["source_csv"]))
    _write_manifest(out_dir, "train", cfg.resolved(), inputs, started)
    print(f"best validation ND {result.best_val_nd:.6f} at step {result.best_step}")
    return 0


def _dump_attention(path: Path, windows, store, model_cfg, strategy) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window", "mode", "position", "neighbor", "weight"])
        with no_grad():
            for start in range(0, len(windows), 64):
                chunk = windows[start : start + 64]
                batch = WindowBatch.from_windows(chunk)
                out = generator_forward(
                    batch, store, model_cfg, strategy, "tgt", collect_trace=True
                )
                tr = out.trace
                t_len = batch.history
                for b in range(len(chunk)):
                    w_id = start + b
                    for pos in range(t_len):
                        for nb in range(t_len):
                            weight = tr.interp_alpha[b, pos, nb]
                            if weight != 0.0:
                                writer.writerow([w_id, "interp", pos, nb, repr(float(weight))])
                    for k, (alpha, nbs, _vidx) in enumerate(tr.extrap):
                        for nb, weight in zip(nbs, alpha[b]):
                            writer.writerow(
                                [w_id, "extrap", t_len + k, int(nb), repr(float(weight))]
                            )


def _dump_qk(path: Path, domains, store, model_cfg, strategy) -> None:
    d = model_cfg.d
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", "window", "kind", "t"] + [f"v{i}" for i in range(d)])
        with no_grad():
            for domain_tag, branch_domain, windows in domains:
                for start in range(0, len(windows), 64):
                    chunk = windows[start : start + 64]
                    batch = WindowBatch.from_windows(chunk)
                    out = generator_forward(
                        batch, store, model_cfg, strategy, branch_domain, collect_trace=True
                    )
                    q, k = out.trace.q, out.trace.k
                    for b in range(len(chunk)):
                        w_id = start + b
                        for t in range(q.shape[2]):
                            writer.writerow(
                                [domain_tag, w_id, "q", t] + [repr(float(v)) for v in q[b, :, t]]
                            )
                            writer.writerow(
                                [domain_tag, w_id, "k", t] + [repr(float(v)) for v in k[b, :, t]]
                            )


def cmd_eval(args) -> int:
    started = time.time()
    cfg = load_run_config(
        args.config, {"seed": args.seed, "strategy": args.strategy, "lam": args.lam}
    )
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ConfigurationError(f"checkpoint {ckpt} does not exist")
    strategy = cfg.model["strategy"]
    model_cfg = cfg.model_config()
    store = build_models(model_cfg, strategy, cfg.seed)
    load_into(store, ckpt)
    source, target = _load_splits(cfg)
    split_name = args.split or cfg.eval["split"]
    if split_name not in ("train", "validation", "test"):
        raise ConfigurationError(f"split must be train|validation|test, got {split_name!r}")
    windows = getattr(target, split_name)
    result = evaluate_nd(store, model_cfg, strategy, windows)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = {
        "split": split_name,
        "n_windows": len(windows),
        "nd": result.nd,
        "numerator": result.numerator,
        "denominator": result.denominator,
    }
    _json_dump(metrics, out_dir / "metrics.json")
    if args.dump_attention:
        _dump_attention(Path(args.dump_attention), windows, store, model_cfg, strategy)
    if args.dump_qk:
        domains = [("target", "tgt", windows)]
        if source is not None:
            domains.append(("source", "src", getattr(source, split_name)))
        _dump_qk(Path(args.dump_qk), domains, store, model_cfg, strategy)
    inputs = [Path(args.config), ckpt, Path(cfg.data["target_csv"])]
    if cfg.data["source_csv"]:
        inputs.append(Path(cfg.data["source_csv"]))
    _write_manifest(out_dir, "eval", cfg.resolved(), inputs, started)
    print(f"{split_name} ND {result.nd:.6f} over {len(windows)} windows")
    return 0


def _experiment_overrides(path: str | None) -> dict:
    if not path:
        return {}
    import sys as _sys

    if _sys.version_info >= (3, 11):
        import tomllib
    else:
        import tomli as tomllib
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    unknown = set(raw) - {"experiment"}
    if unknown:
        raise ConfigurationError(f"unknown section(s) in experiment config: {sorted(unknown)}")
    section = raw.get("experiment", {})
    if not isinstance(section, dict):
        raise ConfigurationError("[experiment] must be a table")
    if "kernel_sizes" in section:
        section["kernel_sizes"] = tuple(section["kernel_sizes"])
    if "fractions" in section:
        section["fractions"] = tuple(section["fractions"])
    return section


def cmd_experiment(args) -> int:
    started = time.time()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    overrides = _experiment_overrides(args.config)
    log = print if args.verbose else None
    runners = {
        "few-shot": run_few_shot,
        "cold-start": run_cold_start,
        "ablation": run_ablations,
    }
    report = runners[args.protocol](seed=args.seed, scale=args.scale, overrides=overrides, log=log)
    _json_dump(report.to_dict(), out_dir / "report.json")
    table = format_report_table(report)
    (out_dir / "report.txt").write_text(table)
    env_inputs = [Path(args.config)] if args.config else []
    _write_manifest(out_dir, f"experiment {args.protocol}", report.to_dict()["settings"], env_inputs, started)
    print(table, end="")
    failed = [c for c in report.cells if c.error]
    if failed:
        for c in failed:
            print(f"cell {c.cell} model {c.model} failed: {c.error}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="daf", description="Cross-domain attention forecaster toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write synthetic CSV datasets")
    p_gen.add_argument("--spec", required=True, help="TOML with [source]/[target] sections")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.set_defaults(func=cmd_generate)

    def add_run_flags(p):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--strategy", default=None)
        p.add_argument("--lambda", dest="lam", type=float, default=None)

    p_train = sub.add_parser("train", help="train a forecaster from a run config")
    add_run_flags(p_train)
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    add_run_flags(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--split", default=None)
    p_eval.add_argument("--dump-attention", default=None, metavar="CSV")
    p_eval.add_argument("--dump-qk", default=None, metavar="CSV")
    p_eval.set_defaults(func=cmd_eval)

    p_exp = sub.add_parser("experiment", help="run a benchmark protocol end to end")
    p_exp.add_argument("protocol", choices=["cold-start", "few-shot", "ablation"])
    p_exp.add_argument("--scale", choices=["desk", "paper"], default="desk")
    p_exp.add_argument("--seed", type=int, default=0)
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--config", default=None, help="TOML with an [experiment] override table")
    p_exp.add_argument("--verbose", "-v", action="store_true")
    p_exp.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckpointMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigurationError, ParseError, EmptyDatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DafError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - unexpected
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
