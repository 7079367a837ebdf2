"""Command-line entry point: ``navformer <command> ...``.

Every report is a CSV preceded by ``# key=value`` lines (config hash, seed(s),
units). Failures exit with status 2 and print one line to stderr::

    error code=<ErrorClass> message=<text>
"""
import argparse
import json
import sys

import numpy as np

from . import harness as H
from .data import (
    default_schema, generate_synthetic, ingest_csv, load_schema, load_synthetic_spec, save_schema,
    write_csv,
)
from .errors import ConfigError, NavFormerError


def _seeds(config):
    return " ".join(str(s) for s in config.seeds)


def _meta(config, units, **extra):
    return {"config_hash": config.config_hash(), "seed": _seeds(config), "units": units, **extra}


def _units(denormalize):
    return "nT" if denormalize else "normalized"


def _schema_for(config, override=None):
    path = override or config.data.schema
    if path is None:
        raise ConfigError("a schema file is required (--schema or data.schema in the config)")
    return load_schema(path)


def _read_flight(path, schema, sample_rate):
    return ingest_csv(path, schema, name=path, sample_rate=sample_rate)


# ---------------------------------------------------------------- commands


def cmd_generate(args):
    spec = load_synthetic_spec(args.spec)
    record = generate_synthetic(spec)
    write_csv(record, args.out)
    if args.schema_out:
        save_schema(default_schema(spec.n_telemetry), args.schema_out)
    print(f"wrote {record.length} rows x {record.n_channels} channels to {args.out}")


def cmd_train(args):
    config = H.load_config(args.config)
    seed = config.seeds[0] if args.seed is None else args.seed
    result, record, splits = H.train(config, seed)
    H.save_model(args.out, result, config, record, seed)
    meta = {"config_hash": config.config_hash(), "seed": seed, "units": "normalized",
            "best_epoch": result.best_epoch}
    H.write_report(args.log, result.log, H.LOG_COLUMNS, meta)
    mae, rmse = H.evaluate(result.model, splits[1])
    print(f"best epoch {result.best_epoch}: val MAE {mae:.6g}, RMSE {rmse:.6g}")


def cmd_eval(args):
    record = ingest_csv(args.data, load_schema(args.schema), name=args.data)
    report, header = H.evaluate_checkpoint(args.ckpt, record, args.denormalize)
    meta = {"config_hash": header.get("config_hash", ""), "seed": header.get("seed", ""),
            "units": report.units, "checkpoint": args.ckpt}
    H.write_report(args.report, report.entries, None, meta)
    e = report.entries[0]
    print(f"{record.name}: MAE {e['mae']:.6g}, RMSE {e['rmse']:.6g} ({report.units})")


def cmd_ablate(args):
    config = H.load_config(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = H.run_ablation(config, variants, denormalize=args.denormalize)
    cols = ("dataset", "variant", "mae", "mae_std", "rmse", "rmse_std", "delta_pct", "seed_maes")
    H.write_report(args.report, rows, cols, _meta(config, _units(args.denormalize)))
    for r in rows:
        print(f"{r['variant']:<12} MAE {r['mae']:.6g}  delta {r['delta_pct']:+.2f}%")


def cmd_zeroshot(args):
    config = H.load_config(args.config)
    schema = _schema_for(config, args.schema)
    rate = config.data.sample_rate
    source = _read_flight(args.source, schema, rate)
    paths = [p.strip() for p in args.targets.split(",") if p.strip()]
    targets = [source if p == args.source else _read_flight(p, schema, rate) for p in paths]
    report = H.run_zeroshot(config, source, targets, args.denormalize)
    H.write_report(args.report, report.entries, None,
                   _meta(config, report.units, source=args.source))
    for name, vals in report.summary().items():
        print(f"{name}: MAE {vals['mae']:.6g}, RMSE {vals['rmse']:.6g}")


def cmd_fewshot(args):
    config = H.load_config(args.config)
    report = H.run_fewshot(config, args.fraction, denormalize=args.denormalize)
    H.write_report(args.report, report.entries, None,
                   _meta(config, report.units, fraction=args.fraction))
    for name, vals in report.summary().items():
        print(f"{name} (fraction {args.fraction}): MAE {vals['mae']:.6g}, RMSE {vals['rmse']:.6g}")


def cmd_gramstats(args):
    record = ingest_csv(args.data, load_schema(args.schema), name=args.data)
    # one block covering the whole flight: diagnostics, not evaluation
    starts = np.arange(0, record.length - args.window + 1, args.stride)
    if starts.size == 0:
        raise ConfigError(f"flight of {record.length} rows is shorter than window {args.window}")
    windows = record.triads[starts[:, None] + np.arange(args.window)[None, :]]
    rows, summary = H.gramstats(windows, args.noise, args.seed)
    meta = {"config_hash": "", "seed": args.seed,
            "units": "raw triad units squared; angles in degrees",
            "noise_scale": args.noise, "window": args.window, "stride": args.stride}
    H.write_report(args.out, rows, H.GRAM_COLUMNS, meta)
    print(H.format_summary(summary))


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="navformer", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic rotating-frame flight to CSV")
    g.add_argument("--spec", required=True, help="synthetic spec (JSON)")
    g.add_argument("--out", required=True, help="output CSV")
    g.add_argument("--schema-out", help="also write the matching column schema (JSON)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model and save the best checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path (.npz)")
    t.add_argument("--log", required=True, help="per-epoch log CSV")
    t.add_argument("--seed", type=int, help="override the first configured seed")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a flight's test block")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--schema", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--denormalize", action="store_true", help="report errors in nT")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train ablation variants and report delta%%")
    a.add_argument("--config", required=True)
    a.add_argument("--variants", default=",".join(H.VARIANTS))
    a.add_argument("--report", required=True)
    a.add_argument("--denormalize", action="store_true")
    a.set_defaults(func=cmd_ablate)

    z = sub.add_parser("zeroshot", help="train on one flight, evaluate on others")
    z.add_argument("--config", required=True)
    z.add_argument("--source", required=True)
    z.add_argument("--targets", required=True, help="comma-separated CSV paths")
    z.add_argument("--schema", help="column schema (defaults to data.schema in the config)")
    z.add_argument("--report", required=True)
    z.add_argument("--denormalize", action="store_true")
    z.set_defaults(func=cmd_zeroshot)

    f = sub.add_parser("fewshot", help="train on a fraction of the training windows")
    f.add_argument("--config", required=True)
    f.add_argument("--fraction", type=float, default=0.05)
    f.add_argument("--report", required=True)
    f.add_argument("--denormalize", action="store_true")
    f.set_defaults(func=cmd_fewshot)

    s = sub.add_parser("gramstats", help="Gram spectrum and eigenvector stability per window")
    s.add_argument("--data", required=True)
    s.add_argument("--schema", required=True)
    s.add_argument("--noise", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--window", type=int, default=30, help="window length L")
    s.add_argument("--stride", type=int, default=1)
    s.set_defaults(func=cmd_gramstats)
    return p


def _fail(code, exc):
    message = " ".join(str(exc).split())
    print(f"error code={code} message={message}", file=sys.stderr)
    return 2


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except NavFormerError as exc:
        return _fail(exc.code, exc)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        return _fail(type(exc).__name__, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
