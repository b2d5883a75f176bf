"""Command-line surface: synth, inspect, pretrain, stream, eval, bench.

Every subcommand reads the JSON run config (flags override fields, env
overrides are limited to output dir and seed), writes its outputs plus
the resolved config echo into the output directory, and exits 0 on
success or nonzero with a machine-readable error line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

from . import engine, model_io, parallel
from .codebook import ClusterImmutabilityError
from .config import EVAL_MODELS, RunConfig
from .models import (
    CompressedStreamModel,
    DenseStreamModel,
    HashedStreamModel,
    QuantizedStreamModel,
    dim_reduct_model,
)
from .ranking import ProtocolError, run_protocol
from .streams import (
    ConfigError,
    IngestStats,
    WindowingStats,
    read_records,
    segment_windows,
    window_novelty_stats,
    VocabRegistry,
)
from .synth import SynthConfig, generate, write_stream


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streambasis",
        description="Streaming compressed embeddings: train, evaluate, benchmark.",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    synth = sub.add_parser("synth", help="generate a planted synthetic stream")
    synth.add_argument("--groups", type=int, default=8, help="number of planted groups")
    synth.add_argument("--units-per-attr", type=int, default=200, help="vocabulary per attribute")
    synth.add_argument("--rho", type=float, default=0.1, help="uniform-noise probability")
    synth.add_argument("--records", type=int, default=50000, help="records to generate")
    synth.add_argument("--attributes", type=int, default=2, help="number of attributes")
    synth.add_argument("--mean-gap", type=float, default=1.0, help="mean seconds between records")
    synth.add_argument("--skew", type=float, default=0.0, help="group size/popularity skew")
    synth.add_argument("--seed", type=int, required=True, help="generator seed")
    synth.add_argument("--out", required=True, help="output directory")
    synth.set_defaults(handler=_cmd_synth)

    for name, help_text in (
        ("inspect", "vocabulary sizes, window counts, novelty statistics"),
        ("pretrain", "dense pretraining and compressed-model initialization"),
        ("stream", "incremental learning over the remaining windows"),
        ("eval", "retrieval-quality protocol against a model"),
        ("bench", "worker-count throughput/quality sweep"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", required=True, help="run config JSON path")
        cmd.add_argument("--seed", type=int, help="override config seed")
        cmd.add_argument("--output-dir", help="override config output_dir")
        if name == "stream":
            cmd.add_argument("--model-in", help="model file to continue from")
            cmd.add_argument("--model-out", help="where to save the updated model")
            cmd.add_argument("--p", type=int, help="override worker count")
        if name == "pretrain":
            cmd.add_argument("--model-out", help="where to save the pretrained model")
        if name == "eval":
            cmd.add_argument("--model", choices=EVAL_MODELS, default="compressed")
            cmd.add_argument("--dim", type=int, help="width for dim-reduct")
            cmd.add_argument("--bits", type=int, default=8, help="bits for quantize")
            cmd.add_argument("--gamma", type=float, default=0.1, help="divisor fraction for hash-trick")
            cmd.add_argument("--p", type=int, help="override worker count (compressed only)")
        if name == "bench":
            cmd.add_argument("--p-values", default="1,2,4", help="comma-separated worker counts")
        cmd.set_defaults(handler={"inspect": _cmd_inspect, "pretrain": _cmd_pretrain,
                                  "stream": _cmd_stream, "eval": _cmd_eval,
                                  "bench": _cmd_bench}[name])
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "handler", None) is None:
        parser.print_help()
        return 0
    try:
        args.handler(args)
    except (ConfigError, ProtocolError, model_io.ModelLoadError, ValueError) as exc:
        _error(type(exc).__name__, str(exc))
        return 1
    except (OSError, ClusterImmutabilityError) as exc:
        _error(type(exc).__name__, str(exc))
        return 2
    return 0


def _error(code: str, message: str) -> None:
    print(json.dumps({"error": code, "message": message}), file=sys.stderr)


def _emit(payload: dict) -> None:
    print(json.dumps(payload))


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config)
    cfg.apply_env()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    if getattr(args, "p", None) is not None:
        cfg.workers = args.p
    if not Path(cfg.dataset).exists():
        raise ConfigError(f"dataset not found: {cfg.dataset}")
    return cfg


def _load_windows(cfg: RunConfig):
    schemas = cfg.build_schemas()
    schema = cfg.stream_schema()
    registry = VocabRegistry(len(schemas))
    ingest_stats = IngestStats()
    window_stats = WindowingStats()
    records = read_records(cfg.dataset, schema, registry, ingest_stats)
    windows = list(segment_windows(records, cfg.window_seconds, window_stats))
    return schemas, registry, windows, ingest_stats, window_stats


def _pretrain_split(cfg: RunConfig, n_windows: int) -> int:
    split = round(cfg.pretrain_fraction * n_windows)
    return max(1, min(split, n_windows - 1))


def _cmd_synth(args: argparse.Namespace) -> None:
    synth_cfg = SynthConfig(
        attributes=args.attributes,
        groups=args.groups,
        units_per_attr=args.units_per_attr,
        rho=args.rho,
        records=args.records,
        mean_gap_seconds=args.mean_gap,
        skew=args.skew,
        seed=args.seed,
    )
    stream = generate(synth_cfg)
    paths = write_stream(stream, args.out)

    # Ready-to-edit run config pointing at the generated stream.
    template = {
        "dataset": paths["stream"],
        "seed": args.seed,
        "output_dir": str(Path(args.out) / "run"),
        "timestamp_column": "ts",
        "attributes": [
            {"name": f"attr_{aid}", "kind": "categorical", "column": f"attr_{aid}"}
            for aid in range(args.attributes)
        ],
        "window_seconds": 500.0 * args.mean_gap,
        "pretrain_fraction": 0.5,
        "eval": {"target_attribute": f"attr_{args.attributes - 1}"},
    }
    config_path = Path(args.out) / "run_config.json"
    config_path.write_text(json.dumps(template, indent=2), encoding="utf-8")
    paths["run_config"] = str(config_path)
    _emit({"command": "synth", "records": args.records, "paths": paths})


def _cmd_inspect(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    schemas, registry, windows, ingest_stats, window_stats = _load_windows(cfg)

    from .figures import novelty_figure

    novelty_files = {}
    for schema in schemas:
        rows = window_novelty_stats(windows, schema.attribute_id, len(schemas))
        csv_path = out / f"novelty_{schema.name}.csv"
        with csv_path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["window_id", "fraction"])
            writer.writerows(rows)
        png_path = out / f"novelty_{schema.name}.png"
        novelty_figure(rows, schema.name, png_path)
        novelty_files[schema.name] = {"csv": str(csv_path), "png": str(png_path)}

    summary = {
        "command": "inspect",
        "rows": ingest_stats.rows,
        "records": ingest_stats.records,
        "skipped": {
            "malformed": ingest_stats.skipped_malformed,
            "too_few_units": ingest_stats.skipped_too_few_units,
            "bad_coordinate": ingest_stats.skipped_bad_coordinate,
            "late": window_stats.late_records,
        },
        "windows": len(windows),
        "vocabulary": {s.name: registry.size(s.attribute_id) for s in schemas},
        "novelty": novelty_files,
    }
    (out / "inspect_summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    cfg.echo(out, "inspect")
    _emit(summary)


def _cmd_pretrain(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    schemas, registry, windows, _, _ = _load_windows(cfg)
    split = _pretrain_split(cfg, len(windows))

    state, report = engine.pretrain(
        windows[:split],
        registry,
        schemas,
        cfg.train,
        cfg.compression,
        cfg.build_specs(),
        cfg.seed,
        uniform_allocation=cfg.allocation == "uniform",
    )
    model_path = Path(getattr(args, "model_out", None) or out / "model.bin")
    model_io.save(state, str(model_path))

    mem = engine.memory_report(state)
    summary = {
        "command": "pretrain",
        "model": str(model_path),
        "pretrain_windows": split,
        "records": report.n_records,
        "excluded_attributes": report.excluded_attributes,
        "attributes": {str(k): v for k, v in report.attribute_summary.items()},
        "model_bytes": dataclasses.asdict(mem),
    }
    (out / "pretrain_report.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    cfg.echo(out, "pretrain")
    _emit(summary)


def _cmd_stream(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model_in = getattr(args, "model_in", None) or str(out / "model.bin")
    state = model_io.load(model_in)
    if [s.name for s in state.schemas] != [s.name for s in cfg.build_schemas()]:
        raise ConfigError("config attributes do not match the saved model's schema")

    # Re-ingest with the saved registry: interning is stable, so symbols
    # seen before the cursor keep their ids and new ones extend the maps
    # exactly as an uninterrupted run would have.
    schema = cfg.stream_schema()
    records = read_records(cfg.dataset, schema, state.registry, IngestStats())
    windows = list(segment_windows(records, cfg.window_seconds, WindowingStats()))

    pending = [w for w in windows if w.window_id > state.cursor]
    executor = None
    if cfg.workers > 1:
        import multiprocessing

        executor = ProcessPoolExecutor(
            max_workers=cfg.workers, mp_context=multiprocessing.get_context("fork")
        )
    reports = []
    trace_rows = []
    try:
        for window in pending:
            if cfg.workers > 1:
                report = parallel.process_window_parallel(
                    window, state, cfg.workers, cfg.merge_policy, executor
                )
            else:
                report = engine.process_window(window, state)
            reports.append(report)
            for epoch, loss in enumerate(report.epoch_losses):
                trace_rows.append((report.window_id, epoch, loss))
    finally:
        if executor is not None:
            executor.shutdown()

    jsonl_path = out / "window_reports.jsonl"
    with jsonl_path.open("w", encoding="utf-8") as handle:
        for report in reports:
            handle.write(json.dumps(report.to_json_dict()) + "\n")
    trace_path = out / "epoch_loss.csv"
    with trace_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["window_id", "epoch", "mean_loss"])
        writer.writerows(trace_rows)

    from .figures import stream_figure

    figure_path = out / "stream.png"
    stream_figure([r.to_json_dict() for r in reports if r.n_records], figure_path)

    model_path = Path(getattr(args, "model_out", None) or model_in)
    model_io.save(state, str(model_path))
    mem = engine.memory_report(state)
    summary = {
        "command": "stream",
        "windows_processed": len(reports),
        "records": sum(r.n_records for r in reports),
        "workers": cfg.workers,
        "model": str(model_path),
        "model_bytes": dataclasses.asdict(mem),
        "reports": str(jsonl_path),
        "epoch_loss": str(trace_path),
        "figure": str(figure_path),
    }
    cfg.echo(out, "stream")
    _emit(summary)


def _build_eval_model(args: argparse.Namespace, cfg: RunConfig, schemas, registry):
    if args.model == "compressed":
        return CompressedStreamModel(
            schemas,
            registry,
            cfg.train,
            cfg.compression,
            cfg.build_specs(),
            cfg.seed,
            uniform_allocation=cfg.allocation == "uniform",
            workers=cfg.workers,
            merge_policy=cfg.merge_policy,
        )
    if args.model == "dense":
        return DenseStreamModel(cfg.train, cfg.seed)
    if args.model == "dim-reduct":
        if not args.dim:
            raise ConfigError("dim-reduct needs --dim")
        return dim_reduct_model(cfg.train, args.dim, cfg.seed)
    if args.model == "quantize":
        return QuantizedStreamModel(cfg.train, cfg.seed, args.bits)
    if args.model == "hash-trick":
        return HashedStreamModel(cfg.train, cfg.seed, args.gamma)
    raise ConfigError(f"unknown eval model {args.model!r}")


def _cmd_eval(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    schemas, registry, windows, _, _ = _load_windows(cfg)
    split = _pretrain_split(cfg, len(windows))
    model = _build_eval_model(args, cfg, schemas, registry)

    report = run_protocol(
        windows,
        split,
        model,
        cfg.target_attribute_id(),
        cfg.eval.query_windows,
        cfg.eval.n_negatives,
        cfg.eval.recall_ks,
        cfg.seed,
        tie_break=cfg.eval.tie_break,
    )
    close = getattr(model, "close", None)
    if close is not None:
        close()

    metrics_path = out / "metrics.csv"
    header = ["window_id", "n_queries", "mrr"] + [f"r_at_{k}" for k in cfg.eval.recall_ks]
    with metrics_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for row in report.rows:
            writer.writerow(
                [row.window_id, row.n_queries, f"{row.mrr:.6f}"]
                + [f"{row.recalls[k]:.6f}" for k in cfg.eval.recall_ks]
            )

    summary = {
        "command": "eval",
        "model": report.model_name,
        "query_windows": report.query_windows,
        "n_queries": report.n_queries,
        "n_dropped": report.n_dropped,
        "mrr": report.overall_mrr,
        "recalls": {str(k): v for k, v in report.overall_recalls.items()},
        "model_bytes": report.model_bytes,
        "metrics_csv": str(metrics_path),
    }
    if args.model == "compressed" and model.state is not None:
        summary["memory_breakdown"] = dataclasses.asdict(engine.memory_report(model.state))

    from .figures import metrics_figure

    figure_path = out / "metrics.png"
    metrics_figure(
        [dataclasses.asdict(r) for r in report.rows],
        report.overall_mrr,
        report.model_name,
        report.model_bytes,
        figure_path,
    )
    summary["figure"] = str(figure_path)
    (out / "eval_summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    cfg.echo(out, "eval")
    _emit(summary)


def _cmd_bench(args: argparse.Namespace) -> None:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    p_values = [int(p) for p in args.p_values.split(",") if p.strip()]
    schemas, registry, windows, _, _ = _load_windows(cfg)
    split = _pretrain_split(cfg, len(windows))

    def factory(p: int) -> CompressedStreamModel:
        return CompressedStreamModel(
            schemas,
            registry,
            cfg.train,
            cfg.compression,
            cfg.build_specs(),
            cfg.seed,
            uniform_allocation=cfg.allocation == "uniform",
            workers=p,
            merge_policy=cfg.merge_policy,
        )

    rows = parallel.throughput_bench(
        windows,
        split,
        factory,
        p_values,
        cfg.target_attribute_id(),
        cfg.eval.query_windows,
        cfg.eval.n_negatives,
        cfg.eval.recall_ks,
        cfg.seed,
    )

    bench_path = out / "bench.csv"
    with bench_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["p", "ms_per_record", "mrr"])
        for row in rows:
            writer.writerow([row.workers, f"{row.ms_per_record:.4f}", f"{row.mrr:.6f}"])

    from .figures import bench_figure

    figure_path = out / "bench.png"
    bench_figure([(r.workers, r.ms_per_record, r.mrr) for r in rows], figure_path)

    cfg.echo(out, "bench")
    _emit(
        {
            "command": "bench",
            "rows": [dataclasses.asdict(r) for r in rows],
            "csv": str(bench_path),
            "figure": str(figure_path),
        }
    )


if __name__ == "__main__":
    raise SystemExit(main())
