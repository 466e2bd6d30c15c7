"""Command-line entry point: gen, train, eval, ablate, report.

Exit status is 0 on success, 2 when a replay audit fails and 1 on any other
error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import evalkit
from .detector import read_detections
from .harness import (AuditViolation, ExperimentConfig, read_records, report, run_ablation, run_experiment,
                      write_ablation_table)
from .streamgen import BenchmarkSpec, generate_benchmark, load_benchmark, serialize_benchmark

log = logging.getLogger("cldet")


def _load_json(path: str | None) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def cmd_gen(args) -> int:
    spec = BenchmarkSpec(**{**_load_json(args.spec), **({"seed": args.seed} if args.seed is not None else {})})
    manifest = serialize_benchmark(generate_benchmark(spec), args.out)
    print(manifest)
    return 0


def _experiment_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(_load_json(args.config))
    overrides = {}
    if args.benchmark:
        overrides["benchmark"] = args.benchmark
    if getattr(args, "output_dir", None):
        overrides["output_dir"] = args.output_dir
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return replace(cfg, **overrides)


def cmd_train(args) -> int:
    record = run_experiment(_experiment_config(args))
    line = record.to_json()
    if args.record:
        with Path(args.record).open("a") as fh:
            fh.write(line + "\n")
    print(json.dumps({"per_experience_map": record.per_experience_map, "average_map": record.average_map}))
    return 0


def cmd_eval(args) -> int:
    benchmark = load_benchmark(args.benchmark)
    mode = benchmark.spec.track_mode
    gts, mains = evalkit.ground_truth_from_samples(benchmark.test, mode)
    cfg = evalkit.EvalConfig(label_space=mode, reference_only=(mode == "instance"))
    preds = read_detections(args.detections)
    unknown = sorted(set(preds) - set(gts))
    if unknown:
        raise ValueError(f"detections reference unknown images, e.g. {unknown[0]}")
    value = evalkit.mean_average_precision(preds, gts, cfg, main_index=mains)
    print(json.dumps({"map": value}))
    return 0


def cmd_ablate(args) -> int:
    base = _experiment_config(args)
    axes = json.loads(args.axes) if args.axes.lstrip().startswith("{") else _load_json(args.axes)
    rows = run_ablation(base, axes, seeds=args.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ablation_table(rows, out / "ablation.csv")
    with (out / "records.jsonl").open("w") as fh:
        for row in rows:
            for rec in row["records"]:
                fh.write(rec.to_json() + "\n")
    for row in rows:
        print(f"{row['setting']}: {row['mean_average_map']:.4f} ± {row['std_average_map']:.4f} "
              f"({row['runs']} runs)")
    return 0


def cmd_report(args) -> int:
    records = [r for path in args.records for r in read_records(path)]
    rows = report(records, args.out)
    print((Path(args.out) / "table.txt").read_text(), end="")
    return 0 if rows else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cldet", description="Continual object detection toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic benchmark")
    g.add_argument("--spec", help="JSON file of BenchmarkSpec fields (defaults otherwise)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run one continual-training experiment")
    t.add_argument("--config", help="JSON experiment config")
    t.add_argument("--benchmark", help="benchmark directory or manifest (overrides config)")
    t.add_argument("--output-dir")
    t.add_argument("--seed", type=int)
    t.add_argument("--record", help="append the run record to this JSON-lines file")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a detection dump on a benchmark's test set")
    e.add_argument("--benchmark", required=True)
    e.add_argument("--detections", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="sweep ablation axes over seeds")
    a.add_argument("--config")
    a.add_argument("--benchmark")
    a.add_argument("--axes", default="{}", help='JSON object or file, e.g. \'{"replay": [false, true]}\'')
    a.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate, output_dir=None)

    r = sub.add_parser("report", help="tables and plots from run records")
    r.add_argument("records", nargs="+", help="JSON-lines record files")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except AuditViolation as exc:
        print(f"audit violation: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
