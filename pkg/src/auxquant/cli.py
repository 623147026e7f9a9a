"""Command-line surface: pretrain, finetune, eval, compare, export-curves,
inspect.

Exit codes: 0 success; 2 usage errors (bad flags, unreadable configs, schema
violations); 1 runtime training failures. Failures print one machine-readable
JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .auxiliary import AuxiliarySpec
from .checkpoint import Checkpoint
from .config import load_experiment
from .errors import DataFormatError, SpecValidationError, TrainingDiverged
from .experiments import build_pipeline, run_config_comparison
from .network import build_network
from .training import (evaluate, finetune, metrics_to_csv, metrics_to_json,
                       pretrain)

ENV_OUTPUT_DIR = "AUXQUANT_OUTPUT_DIR"


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(ENV_OUTPUT_DIR) or "runs"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_metrics(out: Path, stem: str, rows, meta: dict) -> None:
    (out / f"{stem}_metrics.csv").write_text(metrics_to_csv(rows))
    with open(out / f"{stem}_metrics.json", "w", encoding="utf-8") as f:
        json.dump(metrics_to_json(rows, meta), f, indent=2)
        f.write("\n")


def _cmd_pretrain(args) -> int:
    cfg = load_experiment(args.config)
    out = _out_dir(args)
    pipeline = build_pipeline(cfg)
    ck, rows = pretrain(cfg.network, pipeline, cfg.pretrain_config())
    ck.save(out / "pretrain.ckpt")
    _write_metrics(out, "pretrain", rows,
                   {"stage": "pretrain", "config": cfg.to_dict(),
                    "pipeline_audit": pipeline.audit()})
    print(f"pretrain complete: {out / 'pretrain.ckpt'}")
    return 0


def _load_aux_document(path) -> AuxiliarySpec:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if isinstance(doc, dict) and "auxiliary" in doc:
        doc = doc["auxiliary"]
    return AuxiliarySpec.from_dict(doc)


def _cmd_finetune(args) -> int:
    cfg = load_experiment(args.config)
    method = cfg.train.method
    aux_spec = cfg.auxiliary
    if args.aux:
        aux_spec = _load_aux_document(args.aux)
    if method == "auxi" and aux_spec is None:
        raise SpecValidationError(
            ["method 'auxi' requires an auxiliary spec: pass --aux or add an "
             "'auxiliary' section to the config"])
    ck = Checkpoint.load(args.checkpoint)
    out = _out_dir(args)
    pipeline = build_pipeline(cfg)
    fin_ck, rows = finetune(ck, method, pipeline, cfg.finetune_config(),
                            aux_spec=aux_spec, spec=cfg.network, resume=args.resume)
    fin_ck.save(out / "finetune.ckpt")
    _write_metrics(out, "finetune", rows,
                   {"stage": "finetune", "method": method, "config": cfg.to_dict(),
                    "pipeline_audit": pipeline.audit()})
    print(f"finetune complete: {out / 'finetune.ckpt'}")
    return 0


def _cmd_eval(args) -> int:
    cfg = load_experiment(args.config)
    ck = Checkpoint.load(args.checkpoint)
    pipeline = build_pipeline(cfg)
    row = evaluate(ck, pipeline, batch_size=cfg.train.batch_size, split=args.split)
    print(json.dumps(row.to_dict()))
    return 0


def _cmd_compare(args) -> int:
    cfg = load_experiment(args.config)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if args.seeds.isdigit():
        seeds = list(range(int(args.seeds)))
    else:
        seeds = [int(s) for s in args.seeds.split(",")]
    out = _out_dir(args)
    result = run_config_comparison(cfg, methods, seeds)
    (out / "comparison.csv").write_text(result.final_csv())
    with open(out / "comparison.json", "w", encoding="utf-8") as f:
        json.dump(result.to_json(), f, indent=2)
        f.write("\n")
    for method, agg in result.aggregates.items():
        mean = agg["mean_top1"]
        shown = "n/a" if mean is None else f"{mean:.4f}"
        print(f"{method}: mean final top-1 {shown} over {agg['n']} seed(s)")
    print(f"comparison written to {out}")
    return 0


def _cmd_export_curves(args) -> int:
    with open(args.metrics, "r", encoding="utf-8") as f:
        doc = json.load(f)
    from .training import MetricsRow
    rows = [MetricsRow(**r) for r in doc["rows"]]
    csv_text = metrics_to_csv(rows)
    if args.out:
        Path(args.out).write_text(csv_text)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(csv_text)
    return 0


def _cmd_inspect(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    net = build_network(ck.network_spec, seed=0)
    print(f"checkpoint format v{ck.format_version}, dtype {ck.dtype}")
    print(f"backbone: {len(ck.network_spec.blocks)} blocks, "
          f"{net.parameter_count()} parameters, "
          f"taps at {list(ck.network_spec.tap_indices)}")
    print("precision audit:")
    for row in net.precision_report():
        print(f"  {row['layer']:<24} {row['kind']:<10} {row['weight_scheme']}")
    aux_names = [n for n in ck.params if n.startswith("aux.")]
    if aux_names:
        count = sum(ck.params[n].size for n in aux_names)
        print(f"auxiliary module parameters present: {len(aux_names)} tensors, {count} values")
    total = sum(v.size for v in ck.params.values())
    print(f"total stored parameters: {total}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="auxquant",
        description="Quantization-aware training with a full-precision auxiliary module")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="stage 1: train the full-precision counterpart")
    p.add_argument("config", help="experiment config JSON")
    p.add_argument("--out", help=f"output directory (or ${ENV_OUTPUT_DIR})")
    p.set_defaults(fn=_cmd_pretrain)

    p = sub.add_parser("finetune", help="stage 2: quantized fine-tuning from a checkpoint")
    p.add_argument("config", help="experiment config JSON")
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint path")
    p.add_argument("--aux", help="auxiliary spec JSON (required for method auxi "
                                 "unless the config has an auxiliary section)")
    p.add_argument("--resume", action="store_true",
                   help="restore optimizer and RNG state from the checkpoint")
    p.add_argument("--out", help=f"output directory (or ${ENV_OUTPUT_DIR})")
    p.set_defaults(fn=_cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint's backbone")
    p.add_argument("config", help="experiment config JSON (for the dataset)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("compare", help="method x seed comparison grid")
    p.add_argument("config", help="experiment config JSON")
    p.add_argument("--methods", required=True,
                   help="comma-separated: baseline,auxi,additional_loss,kd")
    p.add_argument("--seeds", required=True,
                   help="a count (e.g. 5 -> seeds 0..4) or comma-separated seeds")
    p.add_argument("--out", help=f"output directory (or ${ENV_OUTPUT_DIR})")
    p.set_defaults(fn=_cmd_compare)

    p = sub.add_parser("export-curves", help="convert metrics JSON to the fixed CSV")
    p.add_argument("metrics", help="metrics JSON file")
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.set_defaults(fn=_cmd_export_curves)

    p = sub.add_parser("inspect", help="print a checkpoint's precision audit and sizes")
    p.add_argument("checkpoint")
    p.set_defaults(fn=_cmd_inspect)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": {"type": kind, "message": message}}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse already printed its message; normalize usage failures to 2
        return 0 if e.code in (0, None) else 2
    try:
        return args.fn(args)
    except SpecValidationError as e:
        return _fail("validation", str(e), 2)
    except (DataFormatError, FileNotFoundError, json.JSONDecodeError) as e:
        return _fail("usage", str(e), 2)
    except TrainingDiverged as e:
        return _fail("divergence", str(e), 1)
    except (ValueError, KeyError, OSError) as e:
        return _fail("runtime", f"{type(e).__name__}: {e}", 1)


if __name__ == "__main__":
    sys.exit(main())
