"""``groupbert-kit`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Everything a subcommand writes goes under ``--out`` via atomic renames.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .accounting import PipelinePlan, TrainingSchedule, count_params, global_batch, solve_accumulation, training_flops
from .analysis import average_attention_maps, entropy_report, write_heatmaps
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .data import load_corpus, synthetic_corpus
from .grouped_ops import ConfigError
from .io_utils import atomic_write
from .model import ModelConfig, build_model
from .reporting import (cost_rows, dumps, flops_json, flops_table, millions, params_table, rows_csv, sci,
                        text_table)
from .tensor import PRECISIONS, precision
from .train import DivergenceError, evaluate_mlm, train_loop

log = logging.getLogger("groupbert_kit")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _named(refs: list[str]) -> list[tuple[str, ModelConfig, TrainingSchedule]]:
    out = []
    for ref in refs:
        cfg = load_config(ref)
        out.append((cfg.name, cfg.model, cfg.training.schedule))
    return out


def _refs(args) -> list[str]:
    refs = list(getattr(args, "configs", None) or []) + list(args.config or [])
    if not refs:
        raise UsageError("at least one config (bundled name or path) is required")
    return refs


def _emit(args, stem: str, table: str, data, csv_text: str | None = None) -> None:
    """Human table to stdout unless --format asks for a machine format; files always go under --out."""
    fmt = args.format
    if fmt == "table":
        sys.stdout.write(table)
    elif fmt == "json":
        sys.stdout.write(dumps(data))
    elif fmt == "csv":
        if csv_text is None:
            raise UsageError(f"--format csv is not available for {stem}")
        sys.stdout.write(csv_text)
    if args.out:
        out = Path(args.out)
        atomic_write(out / f"{stem}.json", dumps(data))
        atomic_write(out / f"{stem}.txt", table)
        if csv_text is not None:
            atomic_write(out / f"{stem}.csv", csv_text)


def experiment_data(config: ExperimentConfig, seed: int, eval_split: bool = False):
    """Training (or held-out) corpus for ``config``; held-out data uses seed + 10007."""
    t, m = config.training, config.model
    corpus = t.corpus
    n = corpus.eval_sequences if eval_split else corpus.n_sequences
    data_seed = seed + 10_007 if eval_split else seed
    if corpus.kind == "file":
        return load_corpus(corpus.path, n, t.sequence_length, seed=data_seed, vocab_size=m.vocab_size,
                           min_length=corpus.min_length)
    return synthetic_corpus(n, t.sequence_length, m.vocab_size, seed=data_seed, min_length=corpus.min_length,
                            branching=corpus.branching, concentration=corpus.concentration,
                            corpus_seed=corpus.corpus_seed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_count_params(args) -> int:
    named = _named(_refs(args))
    reports = [count_params(cfg, name) for name, cfg, _ in named]
    data = {"configs": [r.to_dict() for r in reports]}
    _emit(args, "params", params_table(named), data, rows_csv(cost_rows(named, args.sequence_length)))
    return EXIT_OK


def cmd_count_flops(args) -> int:
    named = _named(_refs(args))
    _emit(args, "flops", flops_table(named, args.sequence_length), flops_json(named, args.sequence_length),
          rows_csv(cost_rows(named, args.sequence_length)))
    return EXIT_OK


def cmd_pipeline_plan(args) -> int:
    try:
        if args.accumulation is not None:
            plan = PipelinePlan(args.replicas, args.accumulation, args.depth, args.compute)
        elif args.target is not None:
            plan = solve_accumulation(args.target, args.replicas, args.depth, args.compute)
        else:
            raise UsageError("pipeline-plan needs --target or --accumulation")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    data = {**vars(plan), "global_batch_size": global_batch(plan)}
    table = text_table(["field", "value"], [[k, v] for k, v in data.items()])
    csv_text = "field,value\n" + "".join(f"{k},{v}\n" for k, v in data.items())
    _emit(args, "pipeline", table, data, csv_text)
    return EXIT_OK


def _train_one(config: ExperimentConfig, seed: int, mode: str, steps: int | None, out: Path | None,
               workers: int | None):
    t = config.training
    optimizer = t.optimizer if steps is None else replace(t.optimizer, total_steps=steps)
    masking = replace(t.masking, seed=seed)
    train_data = experiment_data(config, seed)
    eval_data = experiment_data(config, seed, eval_split=True)
    model = build_model(config.model, seed)
    initial = evaluate_mlm(model, eval_data, masking)
    result = train_loop(model, train_data, optimizer, mode=mode, masking=masking, batch_size=t.batch_size,
                        seed=seed, nsp=t.nsp, metrics_path=out / "metrics.csv" if out else None,
                        checkpoint_dir=out / "checkpoints" if out and t.checkpoint_every else None,
                        checkpoint_every=t.checkpoint_every, workers=workers)
    final = evaluate_mlm(model, eval_data, masking)
    return model, result, initial, final, eval_data


def cmd_train(args) -> int:
    if not args.config:
        raise UsageError("train needs --config")
    config = load_config(args.config[0])
    seed = config.seed if args.seed is None else args.seed
    mode = args.mode or config.training.mode
    out = Path(args.out or Path(config.output_dir) / config.name)
    model, result, initial, final, eval_data = _train_one(config, seed, mode, args.steps, out, args.workers)
    save_checkpoint(model, out / "model.ckpt", extra={"step": result.state.step, "seed": seed, "mode": mode})
    summary = {"config": config.name, "mode": mode, "seed": seed, "steps": result.state.step,
               "initial_eval_mlm_loss": initial, "final_eval_mlm_loss": final,
               "final_train_loss": result.losses[-1] if result.losses else None,
               "skipped_sequences": result.skipped_sequences}
    if config.analysis.enabled:
        maps = average_attention_maps(model, eval_data.batches(64), config.analysis.max_sequences,
                                      config.analysis.length)
        report = entropy_report(maps)
        write_heatmaps(maps, out / "attention", report)
        atomic_write(out / "attention" / "entropy.json", dumps(report.to_dict()))
        summary["mean_entropy"] = report.mean
    atomic_write(out / "config.json", dumps({**config.to_dict(), "seed": seed}))
    atomic_write(out / "summary.json", dumps(summary))
    rows = [[k, f"{v:.4f}" if isinstance(v, float) else v] for k, v in summary.items()]
    sys.stdout.write(text_table(["metric", "value"], rows))
    return EXIT_OK


def cmd_analyze(args) -> int:
    if not args.checkpoint:
        raise UsageError("analyze-attention needs --checkpoint")
    model, _ = load_checkpoint(args.checkpoint)
    cfg = model.config
    seed = 0 if args.seed is None else args.seed
    if args.data in (None, "synthetic"):
        data = synthetic_corpus(args.max_sequences, args.sequence_length, cfg.vocab_size, seed=seed + 10_007,
                                min_length=args.min_length)
    else:
        data = load_corpus(args.data, args.max_sequences, args.sequence_length, seed=seed,
                           vocab_size=cfg.vocab_size, min_length=args.min_length)
    maps = average_attention_maps(model, data.batches(64), args.max_sequences, args.length)
    report = entropy_report(maps)
    out = Path(args.out or "attention")
    write_heatmaps(maps, out, report)
    rows = [[layer, " ".join(f"{e:.3f}" for _, e in heads), f"{np.mean([e for _, e in heads]):.3f}"]
            for layer, heads in enumerate(report.per_layer)]
    table = text_table(["layer", "head entropies (ascending)", "mean"], rows)
    table += f"mean entropy {report.mean:.4f} over {report.sequences} sequences of length {report.length}\n"
    _emit(args, "entropy", table, report.to_dict())
    return EXIT_OK


@dataclass(frozen=True)
class AblationRow:
    label: str
    layer_modules: tuple[str, ...]
    norm_policy: str
    dropout_rate: float


ABLATION_ROWS = (
    AblationRow("BERT Base", ("mha", "ffn"), "postnorm", 0.1),
    AblationRow("Prenorm", ("mha", "ffn"), "prenorm", 0.1),
    AblationRow("No Dropout", ("mha", "ffn"), "postnorm", 0.0),
    AblationRow("Convolution", ("mha", "conv", "ffn"), "postnorm", 0.1),
    AblationRow("2 GFFNs", ("mha", "gffn", "gffn"), "postnorm", 0.1),
    AblationRow("2 GFFNs + Conv", ("mha", "gffn", "conv", "gffn"), "postnorm", 0.1),
    AblationRow("GroupBERT Base", ("mha", "gffn", "conv", "gffn"), "prenorm", 0.0),
)


def ablation_configs(base: ModelConfig, row: AblationRow) -> ModelConfig:
    return base.replace(layer_modules=row.layer_modules, norm_policy=row.norm_policy,
                        dropout_rate=row.dropout_rate)


def cmd_compare(args) -> int:
    full = load_config("bert-base")
    toy_post = load_config(args.toy_postnorm)
    toy_pre = load_config(args.toy_prenorm)
    seed = 0 if args.seed is None else args.seed
    results = []
    baseline = None
    for row in ABLATION_ROWS:
        cfg = ablation_configs(full.model, row)
        toy = toy_pre if row.norm_policy == "prenorm" else toy_post
        toy_cfg = replace(toy, model=ablation_configs(toy.model, row))
        entry = {"model": row.label, "layer_modules": list(row.layer_modules), "norm": row.norm_policy,
                 "dropout_rate": row.dropout_rate, "params": count_params(cfg).total_params,
                 "training_flops": training_flops(cfg, full.training.schedule),
                 "toy_lr": toy_cfg.training.optimizer.peak_lr}
        try:
            _, _, _, final, _ = _train_one(toy_cfg, seed, "pretrain", args.steps, None, args.workers)
            entry["toy_mlm_loss"] = final
        except DivergenceError as exc:
            log.warning("%s diverged: %s", row.label, exc)
            entry["toy_mlm_loss"] = None
        if baseline is None:
            baseline = entry["toy_mlm_loss"]
        entry["improvement"] = (baseline - entry["toy_mlm_loss"]
                                if baseline is not None and entry["toy_mlm_loss"] is not None else None)
        results.append(entry)
    header = ["Model", "Parameters", "Training FLOPs", "Toy LR", "Toy MLM loss", "Improvement"]
    rows = [[r["model"], millions(r["params"]), sci(r["training_flops"]), f"{r['toy_lr']:g}",
             "diverged" if r["toy_mlm_loss"] is None else f"{r['toy_mlm_loss']:.3f}",
             "" if r["improvement"] is None else f"{r['improvement']:+.3f}"] for r in results]
    fields = ["model", "params", "training_flops", "toy_lr", "toy_mlm_loss", "improvement"]
    _emit(args, "compare", text_table(header, rows), {"rows": results, "seed": seed},
          rows_csv(results, fields))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", action="append", help="config file or bundled name (repeatable)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--format", choices=("table", "json", "csv"), default="table")
    common.add_argument("--precision", choices=sorted(PRECISIONS), default="oracle64")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="groupbert-kit", description="BERT / GroupBERT cost, training and "
                                     "attention-analysis toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count-params", parents=[common], help="parameter counts per component")
    p.add_argument("configs", nargs="*")
    p.add_argument("--sequence-length", type=int, default=128)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("count-flops", parents=[common], help="forward and training FLOPs")
    p.add_argument("configs", nargs="*")
    p.add_argument("--sequence-length", type=int, default=128)
    p.set_defaults(func=cmd_count_flops)

    p = sub.add_parser("pipeline-plan", parents=[common], help="global batch / accumulation arithmetic")
    p.add_argument("--replicas", type=int, required=True)
    p.add_argument("--depth", type=int, required=True, help="pipeline depth")
    p.add_argument("--compute", type=int, required=True, help="compute batch size")
    p.add_argument("--target", type=int, help="target global batch size")
    p.add_argument("--accumulation", type=int, help="accumulation factor (forward mode)")
    p.set_defaults(func=cmd_pipeline_plan)

    p = sub.add_parser("train", parents=[common], help="MLM/NSP training on the configured corpus")
    p.add_argument("--mode", choices=("pretrain", "finetune"))
    p.add_argument("--steps", type=int, help="override optimizer.total_steps")
    p.add_argument("--workers", type=int, help="data-parallel shards per batch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("analyze-attention", parents=[common], help="attention maps and positional entropy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="token/text file, or 'synthetic' (default)")
    p.add_argument("--max-sequences", type=int, default=1000)
    p.add_argument("--sequence-length", type=int, default=32)
    p.add_argument("--min-length", type=int)
    p.add_argument("--length", type=int, help="unpadded length bucket to average")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("compare", parents=[common], help="ablation grid: accounting columns plus toy losses")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--workers", type=int)
    p.add_argument("--toy-postnorm", default="toy-bert", help="toy config for postnorm rows")
    p.add_argument("--toy-prenorm", default="toy-groupbert", help="toy config for prenorm rows")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with precision(args.precision):
            return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError, CheckpointError) as exc:
        print(f"groupbert-kit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"groupbert-kit: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError, ArithmeticError, OSError) as exc:
        print(f"groupbert-kit: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
