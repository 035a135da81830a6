"""Command line driver: configs in, run directories out.

Seven subcommands cover the repo's workflows::

    imo gen-data       write a synthetic corpus + manifest
    imo train          fit one model, save checkpoint/metrics/figures
    imo eval           score a checkpoint on one domain/split
    imo ablate         run the variant grid across seeds
    imo analyze-masks  mask agreement between single-domain runs
    imo reverse-mask   complement a checkpoint's masks and refit the head
    imo size-sweep     repeat two arms across training-set sizes

Every command takes ``--config`` (a JSON file), ``--out`` (the run
directory), and optionally ``--seed`` (overrides the experiment seed),
``--force`` (reuse a non-empty run directory), and ``--threads`` (fan
independent grid cells out across worker threads).  ``IMO_LOG_LEVEL``
picks the log level: error, warn, info, or debug.

Exit codes are a stable contract: 0 success, 1 runtime failure (the
error line carries the run id), 2 bad configuration (the error line
carries the offending field path).  Errors are a single line on stderr
of the form ``error kind=<config|runtime> ...: message``.

Numbers destined for CSV files are written with ``repr``, which is the
shortest string that parses back to the same float, so rerunning a
command with the same config and seed reproduces its CSVs byte for
byte.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .analysis import (ABLATION_COLUMNS, ABLATION_VARIANTS, SIZE_SWEEP_COLUMNS,
                       ablation_cell, domain_mask_agreement, evaluate_domains,
                       gap_by_size, mean_sparsity, reverse_mask_study, size_cell,
                       train_on_domains, variant_settings)
from .datagen import CorpusSpec, generate, write_corpus
from .encoder import EncoderConfig, load_checkpoint, save_checkpoint
from .errors import ConfigError, InputError
from .figures import (ablation_bars, confusion_matrix_figure, mask_heatmap,
                      reverse_mask_bars, similarity_heatmap, size_sweep_curves,
                      training_curves)
from .trainer import METRICS_COLUMNS, TrainConfig, evaluate, predict

log = logging.getLogger(__name__)

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}

RUN_SIDECAR_FORMAT = "imo-run-v1"

AGREEMENT_COLUMNS = ("seed", "cosine", "cosine_baseline", "jaccard",
                     "jaccard_baseline", "kept_a", "kept_b")


# ---- plumbing --------------------------------------------------------------

def configure_logging() -> None:
    raw = os.environ.get("IMO_LOG_LEVEL", "warn").strip().lower()
    if raw not in LOG_LEVELS:
        raise ConfigError("IMO_LOG_LEVEL",
                          f"expected one of {sorted(LOG_LEVELS)}, got {raw!r}")
    logging.basicConfig(level=LOG_LEVELS[raw],
                        format="%(levelname)s %(name)s: %(message)s")


def load_config(path: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError("config", f"cannot read {path}: {err.strerror}") from err
    try:
        config = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError("config", f"{path} is not valid JSON: {err}") from err
    if not isinstance(config, dict):
        raise ConfigError("config", f"{path} must hold a JSON object")
    return config


def content_hash(command: str, config: dict, seed_override: int | None) -> str:
    canonical = json.dumps({"command": command, "config": config,
                            "seed": seed_override}, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def prepare_out(out: str, force: bool, run_id: str) -> Path:
    path = Path(out)
    if path.exists() and not path.is_dir():
        raise InputError(f"output path {path} exists and is not a directory")
    if path.is_dir() and any(path.iterdir()) and not force:
        raise InputError(
            f"run directory {path} is not empty; pass --force to write into it")
    path.mkdir(parents=True, exist_ok=True)
    return path


def build_dataclass(cls, section: str, payload: dict):
    """Instantiate a config dataclass, naming any unknown key."""
    known = {f.name for f in fields(cls)}
    for key in payload:
        if key not in known:
            raise ConfigError(f"{section}.{key}", "unknown setting")
    if "betas" in payload:
        payload = {**payload, "betas": tuple(payload["betas"])}
    return cls(**payload).validate()


def section(config: dict, name: str) -> dict:
    value = config.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(name, "must be a JSON object")
    return dict(value)


def string_list(raw, field: str, default: list[str]) -> list[str]:
    if raw is None:
        return list(default)
    if not isinstance(raw, list) or not all(isinstance(v, str) for v in raw):
        raise ConfigError(field, "must be a list of strings")
    return list(raw)


def int_list(raw, field: str, default: list[int]) -> list[int]:
    if raw is None:
        return list(default)
    if not isinstance(raw, list) or not all(isinstance(v, int) for v in raw):
        raise ConfigError(field, "must be a list of integers")
    return list(raw)


def check_keys(payload: dict, name: str, allowed: set[str]) -> None:
    for key in payload:
        if key not in allowed:
            raise ConfigError(f"{name}.{key}", "unknown setting")


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows_csv(path: Path, rows, columns) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_cell(row[c]) for c in columns])
    return path


def write_json(path: Path, payload: dict) -> Path:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path


def write_sidecar(out: Path, run_id: str, command: str, digest: str,
                  seed_override: int | None, config: dict) -> None:
    write_json(out / "config.json", {
        "format": RUN_SIDECAR_FORMAT,
        "run_id": run_id,
        "command": command,
        "content_hash": digest,
        "seed_override": seed_override,
        "config": config,
    })


def fan_out(tasks, threads: int) -> dict:
    """Run (key, thunk) tasks, optionally across threads.  Results come
    back keyed, so output order never depends on the thread count."""
    if threads <= 1 or len(tasks) <= 1:
        return {key: thunk() for key, thunk in tasks}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [(key, pool.submit(thunk)) for key, thunk in tasks]
        return {key: future.result() for key, future in futures}


def experiment_parts(config: dict, seed_override: int | None
                     ) -> tuple[CorpusSpec, EncoderConfig, TrainConfig]:
    spec = build_dataclass(CorpusSpec, "corpus", section(config, "corpus"))
    encoder = build_dataclass(EncoderConfig, "encoder", section(config, "encoder"))
    trainer = build_dataclass(TrainConfig, "trainer", section(config, "trainer"))
    if seed_override is not None:
        trainer = replace(trainer, seed=seed_override)
    return spec, encoder, trainer


# ---- subcommands -----------------------------------------------------------

def cmd_gen_data(args, config: dict, out: Path, run_id: str, digest: str) -> int:
    spec = build_dataclass(CorpusSpec, "corpus", section(config, "corpus"))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed).validate()
    manifest = write_corpus(spec, out)
    write_sidecar(out, run_id, "gen-data", digest, args.seed, config)
    total = sum(entry["count"] for entry in manifest["files"].values())
    print(f"{run_id}: wrote {len(manifest['files'])} split files, "
          f"{total} examples, to {out}")
    return 0


def cmd_train(args, config: dict, out: Path, run_id: str, digest: str) -> int:
    spec, encoder, trainer = experiment_parts(config, args.seed)
    run = section(config, "run")
    check_keys(run, "run", {"train_domains", "val_domain", "eval_domains", "variant"})
    train_domains = string_list(run.get("train_domains"), "run.train_domains",
                                ["source", "source_aux"])
    val_domain = run.get("val_domain", "source")
    eval_domains = string_list(run.get("eval_domains"), "run.eval_domains",
                               ["source", "target_a", "target_b"])
    variant = run.get("variant", "full")
    settings, overrides = variant_settings(variant, n_labels=spec.n_labels)
    if overrides:
        trainer = replace(trainer, **overrides)

    started = time.monotonic()
    model, result = train_on_domains(spec, train_domains, val_domain, trainer.seed,
                                     encoder_config=encoder, settings=settings,
                                     train_config=trainer, run_id=run_id)
    scores = evaluate_domains(model, result.introduced, spec, eval_domains)
    wallclock = time.monotonic() - started

    write_sidecar(out, run_id, "train", digest, args.seed, config)
    write_rows_csv(out / "metrics.csv", result.metrics_rows, METRICS_COLUMNS)
    best = result.stage_records[result.selected_stage]
    save_checkpoint(model, out / "checkpoint.json", stage_meta={
        "run_id": run_id,
        "selected_stage": result.selected_stage,
        "introduced": sorted(result.introduced),
        "selection_metric": trainer.selection_metric,
        "val_metric": best.val_metric,
    })
    filters = model.mask_filters()
    if filters:
        write_json(out / "masks.json", {
            "run_id": run_id,
            "masks": [f.snapshot() for f in filters],
        })
        mask_heatmap(model, out / "figures" / "masks.png")
    training_curves(result.metrics_rows, out / "figures" / "training_curves.png")
    write_json(out / "run.json", {
        "run_id": run_id,
        "command": "train",
        "variant": variant,
        "seed": trainer.seed,
        "content_hash": digest,
        "train_domains": train_domains,
        "val_domain": val_domain,
        "selected_stage": result.selected_stage,
        "introduced": sorted(result.introduced),
        "val_metric": best.val_metric,
        "selection_metric": trainer.selection_metric,
        "sparsity_fraction": mean_sparsity(model, result.introduced),
        "eval": scores,
        "wallclock_s": wallclock,
    })
    summary = " ".join(f"{name}={value:.4f}" for name, value in scores.items())
    print(f"{run_id}: stage {result.selected_stage} val "
          f"{trainer.selection_metric}={best.val_metric:.4f} {summary}")
    return 0


def cmd_eval(args, config: dict, out: Path, run_id: str, digest: str) -> int:
    checkpoint = config.get("checkpoint")
    if not isinstance(checkpoint, str) or not checkpoint:
        raise ConfigError("checkpoint", "path to a checkpoint file is required")
    spec = build_dataclass(CorpusSpec, "corpus", section(config, "corpus"))
    ev = section(config, "eval")
    check_keys(ev, "eval", {"domain", "split", "metric", "batch_size"})
    domain = ev.get("domain", "target_b")
    split = ev.get("split", "test")
    metric = ev.get("metric", "accuracy")
    batch_size = ev.get("batch_size", 64)
    if domain not in spec.domains:
        raise ConfigError("eval.domain", f"unknown domain {domain!r}")
    if split not in spec.splits:
        raise ConfigError("eval.split", f"unknown split {split!r}")

    model, stage_meta = load_checkpoint(checkpoint)
    introduced = frozenset(stage_meta.get("introduced", []))
    examples = generate(spec, domain, split)
    value = evaluate(model, examples, metric, introduced, batch_size)
    pred, gold = predict(model, examples, introduced, batch_size)
    counts = np.zeros((model.settings.n_labels,) * 2, dtype=np.int64)
    for g, p in zip(gold, pred):
        counts[g, p] += 1

    write_sidecar(out, run_id, "eval", digest, args.seed, config)
    write_json(out / "report.json", {
        "run_id": run_id,
        "command": "eval",
        "checkpoint": checkpoint,
        "checkpoint_run_id": stage_meta.get("run_id"),
        "domain": domain,
        "split": split,
        "metric": metric,
        "value": value,
        "n_examples": len(examples),
        "introduced": sorted(introduced),
        "confusion": counts.tolist(),
    })
    confusion_matrix_figure(gold, pred, model.settings.n_labels,
                            out / "figures" / "confusion.png")
    print(f"{run_id}: {metric} on {domain}/{split} = {value:.4f} "
          f"({len(examples)} examples)")
    return 0


def cmd_ablate(args, config: dict, out: Path, run_id: str, digest: str) -> int:
    spec, encoder, trainer = experiment_parts(config, args.seed)
    ab = section(config, "ablate")
    check_keys(ab, "ablate", {"variants", "seeds", "train_domains", "val_domain",
                              "eval_domains"})
    variants = string_list(ab.get("variants"), "ablate.variants", list(ABLATION_VARIANTS))
    seeds = int_list(ab.get("seeds"), "ablate.seeds", [0, 1, 2])
    train_domains = string_list(ab.get("train_domains"), "ablate.train_domains",
                                ["source", "source_aux"])
    val_domain = ab.get("val_domain", "source")
    eval_domains = string_list(ab.get("eval_domains"), "ablate.eval_domains",
                               ["source", "target_a", "target_b"])
    for variant in variants:
        variant_settings(variant, n_labels=spec.n_labels)

    started = time.monotonic()
    tasks = [((variant, seed),
              lambda variant=variant, seed=seed: ablation_cell(
                  spec, variant, seed, train_domains, val_domain, eval_domains,
                  encoder_config=encoder, train_config=trainer))
             for variant in variants for seed in seeds]
    cells = fan_out(tasks, args.threads)
    rows = [row for variant in variants for seed in seeds
            for row in cells[(variant, seed)]]
    wallclock = time.monotonic() - started

    write_sidecar(out, run_id, "ablate", digest, args.seed, config)
    write_rows_csv(out / "ablation.csv", rows, ABLATION_COLUMNS)
    means = {variant: {domain: float(np.mean(
        [r["value"] for r in rows if r["variant"] == variant and r["domain"] == domain]))
        for domain in eval_domains} for variant in variants}
    write_json(out / "run.json", {
        "run_id": run_id,
        "command": "ablate",
        "content_hash": digest,
        "variants": variants,
        "seeds": seeds,
        "means": means,
        "wallclock_s": wallclock,
    })
    figure_domain = "target_b" if "target_b" in eval_domains else eval_domains[0]
    ablation_bars(rows, out / "figures" / "ablation.png", domain=figure_domain)
    for variant in variants:
        print(f"{run_id}: {variant} " + " ".join(
            f"{domain}={means[variant][domain]:.4f}" for domain in eval_domains))
    return 0


def cmd_analyze_masks(args, config: dict, out: Path, run_id: str, digest: str) -> int:
    spec, encoder, trainer = experiment_parts(config, args.seed)
    ag = section(config, "agreement")
    check_keys(ag, "agreement", {"domain_a", "domain_b", "seeds", "draws"})
    domain_a = ag.get("domain_a", "source")
    domain_b = ag.get("domain_b", "source_aux")
    seeds = int_list(ag.get("seeds"), "agreement.seeds", [0, 1, 2])
    draws = ag.get("draws", 100)
    if not isinstance(draws, int) or draws < 1:
        raise ConfigError("agreement.draws", f"must be a positive integer, got {draws!r}")

    started = time.monotonic()
    tasks = [(seed, lambda seed=seed: domain_mask_agreement(
        spec, domain_a, domain_b, seed, encoder_config=encoder,
        train_config=trainer, draws=draws)) for seed in seeds]
    reports = fan_out(tasks, args.threads)
    wallclock = time.monotonic() - started

    rows = [{"seed": seed,
             "cosine": reports[seed].cosine,
             "cosine_baseline": reports[seed].cosine_baseline,
             "jaccard": reports[seed].jaccard,
             "jaccard_baseline": reports[seed].jaccard_baseline,
             "kept_a": reports[seed].kept_a,
             "kept_b": reports[seed].kept_b} for seed in seeds]
    write_sidecar(out, run_id, "analyze-masks", digest, args.seed, config)
    write_rows_csv(out / "agreement.csv", rows, AGREEMENT_COLUMNS)
    above = sum(1 for row in rows
                if row["cosine"] > row["cosine_baseline"]
                and row["jaccard"] > row["jaccard_baseline"])
    write_json(out / "run.json", {
        "run_id": run_id,
        "command": "analyze-masks",
        "content_hash": digest,
        "domain_a": domain_a,
        "domain_b": domain_b,
        "seeds": seeds,
        "pairs_above_baseline": above,
        "mean_cosine": float(np.mean([row["cosine"] for row in rows])),
        "mean_jaccard": float(np.mean([row["jaccard"] for row in rows])),
        "wallclock_s": wallclock,
    })
    similarity_heatmap(reports[seeds[0]].table, out / "figures" / "similarity.png")
    print(f"{run_id}: {above}/{len(seeds)} seed pairs above both permutation "
          f"baselines ({domain_a} vs {domain_b})")
    return 0


def cmd_reverse_mask(args, config: dict, out: Path, run_id: str, digest: str) -> int:
    checkpoint = config.get("checkpoint")
    if not isinstance(checkpoint, str) or not checkpoint:
        raise ConfigError("checkpoint", "path to a checkpoint file is required")
    spec = build_dataclass(CorpusSpec, "corpus", section(config, "corpus"))
    trainer = build_dataclass(TrainConfig, "trainer", section(config, "trainer"))
    if args.seed is not None:
        trainer = replace(trainer, seed=args.seed)
    rv = section(config, "reverse")
    check_keys(rv, "reverse", {"refit_domains", "eval_domains", "metric", "refit_epochs"})
    refit_domains = string_list(rv.get("refit_domains"), "reverse.refit_domains",
                                ["source", "source_aux"])
    eval_domains = string_list(rv.get("eval_domains"), "reverse.eval_domains",
                               ["source", "target_b"])
    metric = rv.get("metric", "accuracy")
    refit_epochs = rv.get("refit_epochs")
    for name in (*refit_domains, *eval_domains):
        if name not in spec.domains:
            raise ConfigError("reverse", f"unknown domain {name!r}")

    model, stage_meta = load_checkpoint(checkpoint)
    introduced = frozenset(stage_meta.get("introduced", []))
    refit_examples = [ex for name in refit_domains
                      for ex in generate(spec, name, "train")]
    eval_sets = {name: generate(spec, name, "test") for name in eval_domains}
    report = reverse_mask_study(model, introduced, refit_examples, eval_sets,
                                trainer, metric=metric, refit_epochs=refit_epochs)

    write_sidecar(out, run_id, "reverse-mask", digest, args.seed, config)
    write_json(out / "reverse.json", {
        "run_id": run_id,
        "command": "reverse-mask",
        "checkpoint": checkpoint,
        "checkpoint_run_id": stage_meta.get("run_id"),
        **report,
    })
    reverse_mask_bars(report, out / "figures" / "reverse.png")
    deltas = " ".join(f"{name}={report['delta'][name]:+.4f}" for name in eval_domains)
    print(f"{run_id}: complemented-mask {metric} deltas {deltas}")
    return 0


def cmd_size_sweep(args, config: dict, out: Path, run_id: str, digest: str) -> int:
    spec, encoder, trainer = experiment_parts(config, args.seed)
    sw = section(config, "sweep")
    check_keys(sw, "sweep", {"sizes", "seeds", "arms", "train_domains", "val_domain",
                             "eval_domains", "step_budget"})
    sizes = int_list(sw.get("sizes"), "sweep.sizes", [250, 1000, 4000])
    seeds = int_list(sw.get("seeds"), "sweep.seeds", [0, 1, 2])
    arms = string_list(sw.get("arms"), "sweep.arms", ["full", "wo_am"])
    train_domains = string_list(sw.get("train_domains"), "sweep.train_domains",
                                ["source", "source_aux"])
    val_domain = sw.get("val_domain", "source")
    eval_domains = string_list(sw.get("eval_domains"), "sweep.eval_domains",
                               ["target_b"])
    step_budget = sw.get("step_budget")
    if step_budget is not None and (not isinstance(step_budget, int) or step_budget < 1):
        raise ConfigError("sweep.step_budget",
                          f"must be a positive integer, got {step_budget!r}")
    for arm in arms:
        variant_settings(arm, n_labels=spec.n_labels)

    started = time.monotonic()
    tasks = [((size, arm, seed),
              lambda size=size, arm=arm, seed=seed: size_cell(
                  spec, size, arm, seed, train_domains, val_domain, eval_domains,
                  encoder_config=encoder, train_config=trainer,
                  step_budget=step_budget))
             for size in sizes for arm in arms for seed in seeds]
    cells = fan_out(tasks, args.threads)
    rows = [row for size in sizes for arm in arms for seed in seeds
            for row in cells[(size, arm, seed)]]
    wallclock = time.monotonic() - started

    write_sidecar(out, run_id, "size-sweep", digest, args.seed, config)
    write_rows_csv(out / "sizes.csv", rows, SIZE_SWEEP_COLUMNS)
    payload = {
        "run_id": run_id,
        "command": "size-sweep",
        "content_hash": digest,
        "sizes": sizes,
        "seeds": seeds,
        "arms": arms,
        "step_budget": step_budget,
        "wallclock_s": wallclock,
    }
    if "full" in arms and "wo_am" in arms and eval_domains:
        gaps = gap_by_size(rows, domain=eval_domains[0])
        payload["gap_by_size"] = {str(size): gap for size, gap in gaps.items()}
    write_json(out / "run.json", payload)
    size_sweep_curves(rows, out / "figures" / "size_sweep.png",
                      domain=eval_domains[0])
    if "gap_by_size" in payload:
        line = " ".join(f"{size}:{gap:+.4f}" for size, gap in payload["gap_by_size"].items())
        print(f"{run_id}: gap by size {line}")
    else:
        print(f"{run_id}: wrote {len(rows)} rows")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "analyze-masks": cmd_analyze_masks,
    "reverse-mask": cmd_reverse_mask,
    "size-sweep": cmd_size_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="imo",
        description="Sparse invariant-feature masking experiments on synthetic "
                    "domain-shift corpora.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="path to a JSON config file")
    common.add_argument("--out", required=True, help="run directory for artifacts")
    common.add_argument("--seed", type=int, default=None,
                        help="override the experiment seed from the config")
    common.add_argument("--force", action="store_true",
                        help="write into a non-empty run directory")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for independent grid cells")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    run_id = "-"
    try:
        configure_logging()
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise ConfigError("threads", f"must be at least 1, got {args.threads}")
        config = load_config(args.config)
        digest = content_hash(args.command, config, args.seed)
        run_id = f"{args.command}-{digest[:12]}"
        out = prepare_out(args.out, args.force, run_id)
        return COMMANDS[args.command](args, config, out, run_id, digest)
    except ConfigError as err:
        print(f"error kind=config field={err.field}: {err.message}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - the CLI boundary maps all failures
        if log.isEnabledFor(logging.DEBUG):
            raise
        print(f"error kind=runtime run={run_id}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
