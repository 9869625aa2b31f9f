"""Command-line interface: gen-synthetic, train, permute, ablate, export."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .dataset_io import SyntheticConfig, make_synthetic_dataset, write_feature_file
from .errors import LedotError
from .harness import (
    RunConfig,
    VARIANTS,
    export_ablation,
    export_metrics,
    run_ablation,
    run_permutations,
    run_stream,
)
from .numerics import RngState


def _load_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _run_config(args, config_file_key: str = "config") -> RunConfig:
    raw = _load_json(getattr(args, config_file_key)) if getattr(args, config_file_key) else {}
    if getattr(args, "data", None):
        raw["data"] = args.data
    if getattr(args, "variant", None):
        raw["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    if getattr(args, "perms", None) is not None:
        raw["permutations"] = args.perms
    return RunConfig.from_dict(raw)


def _cmd_gen_synthetic(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    cfg = SyntheticConfig.from_dict(raw)
    dataset = make_synthetic_dataset(cfg, RngState(args.seed).child("dataset"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prefix = out / args.name
    write_feature_file(dataset, prefix)
    print(f"wrote {prefix}.manifest.json and {prefix}.tensors.bin "
          f"({len(dataset.instances)} instances)")
    return 0


def _cmd_train(args) -> int:
    config = _run_config(args)
    record = run_stream(config, RngState(config.seed).child("perm0"))
    record["seed"] = config.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {
        "config": config.to_dict(),
        "runs": [{k: v for k, v in record.items() if k != "wall_clock_s"}],
        "f1_mean": record["f1_after_task"],
        "f1_std": [0.0] * len(record["f1_after_task"]),
    }
    export_metrics(report, "json", out / "report.json")
    export_metrics(report, "csv", out / "report.csv")
    f1s = ", ".join(f"{x:.4f}" for x in record["f1_after_task"])
    print(f"variant={config.variant} f1_after_task=[{f1s}]")
    return 0


def _cmd_permute(args) -> int:
    config = _run_config(args)
    report = run_permutations(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    export_metrics(report, "json", out / "report.json")
    export_metrics(report, "csv", out / "report.csv")
    f1s = ", ".join(f"{x:.4f}" for x in report.f1_mean)
    print(f"variant={config.variant} perms={len(report.runs)} mean_f1=[{f1s}]")
    return 0


def _cmd_ablate(args) -> int:
    grid_raw = _load_json(args.grid) if args.grid else {}
    seeds = grid_raw.pop("seeds", None)
    base_raw = grid_raw.pop("base_config", {})
    if args.data:
        base_raw["data"] = args.data
    if "permutations" in grid_raw:
        base_raw["permutations"] = grid_raw.pop("permutations")
    config = RunConfig.from_dict(base_raw)
    grid = grid_raw or None
    tables = run_ablation(config, grid=grid, seeds=seeds)
    export_ablation(tables, args.out)
    print(f"wrote ablation tables for axes {sorted(tables)} to {args.out}")
    return 0


def _cmd_export(args) -> int:
    report = _load_json(args.report)
    export_metrics(report, args.format, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ledot",
        description="Continual event detection over frozen-encoder features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic feature dataset")
    p.add_argument("--config", help="JSON file of synthetic-generator fields")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="synthetic", help="dataset file prefix")
    p.set_defaults(func=_cmd_gen_synthetic)

    p = sub.add_parser("train", help="train one stream and export metrics")
    p.add_argument("--data", required=True, help="dataset path prefix")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("permute", help="average a config over task permutations")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--perms", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_permute)

    p = sub.add_parser("ablate", help="sweep tau, r, alpha, and init-mode grids")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", help="JSON grid file; defaults to the paper-profile grids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("export", help="re-export a report file")
    p.add_argument("--report", required=True, help="report.json from train/permute")
    p.add_argument("--format", choices=("csv", "json"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LedotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
