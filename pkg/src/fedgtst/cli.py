"""Experiment runner: gen-data, pretrain, transfer, verify-bounds, compare.

Every command is deterministic given the config's master seed; --threads
changes wall time only, never bytes. Exit codes: 0 ok, 2 config error,
3 numerical failure, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import bounds as bounds_mod
from .config import ExperimentConfig, load_config
from .domains import (
    Dataset,
    PartitionPlan,
    ShiftSpec,
    generate_gaussian_mixture,
    partition_dirichlet,
    partition_label_subset,
    save_csv,
)
from .errors import ConfigError, DataFormatError, FedgtstError, NumericalError
from .federation import (
    OptimalFromStats,
    RoundRecord,
    certified_alpha,
    run_pretraining,
)
from .models import ModelSpec, init_weights, loss
from .seeding import split_seed
from .statistics import CrossClientStats
from .transfer import (
    estimate_federated_gf_discrepancy,
    evaluate_target,
    finetune_classifier,
    pretraining_feature_samples,
)

METRIC_FIELDS = (
    "round",
    "source-loss",
    "avg-jacobian-norm",
    "jacobian-variance",
    "guide-norm",
    "learning-rate",
    "comm-scalars",
    "comm-vector-entries",
)

MODEL_MAGIC = "fedgtst-model"
MODEL_VERSION = "v1"


# ---------------------------------------------------------------------------
# deterministic dataset / partition construction from a config


def build_source(cfg: ExperimentConfig) -> Dataset:
    return generate_gaussian_mixture(
        cfg.data.num_classes,
        cfg.data.dim,
        cfg.data.samples_per_class,
        cfg.data.class_separation,
        seed=split_seed(cfg.seed, "data"),
    )


def _shift_spec(cfg: ExperimentConfig, stream: str) -> ShiftSpec:
    s = cfg.data.shift
    translation = None if s.mean_translation is None else np.asarray(s.mean_translation)
    return ShiftSpec(
        rotation_angle=s.rotation_angle,
        mean_translation=translation,
        label_noise_rate=s.label_noise_rate,
        seed=split_seed(cfg.seed, stream),
    )


def build_target_train(cfg: ExperimentConfig, source: Dataset) -> Dataset:
    from .domains import apply_shift

    return apply_shift(source, _shift_spec(cfg, "shift.train"))


def build_target_test(cfg: ExperimentConfig) -> Dataset:
    from .domains import apply_shift

    fresh = generate_gaussian_mixture(
        cfg.data.num_classes,
        cfg.data.dim,
        cfg.data.target_test_samples_per_class,
        cfg.data.class_separation,
        seed=split_seed(cfg.seed, "target-test"),
    )
    return apply_shift(fresh, _shift_spec(cfg, "shift.test"))


def build_partition(cfg: ExperimentConfig, source: Dataset) -> PartitionPlan:
    seed = split_seed(cfg.seed, "partition")
    if cfg.partition.scheme == "label-subset":
        return partition_label_subset(
            source, cfg.partition.clients, cfg.partition.classes_per_client, seed
        )
    return partition_dirichlet(
        source, cfg.partition.clients, cfg.partition.concentration, seed
    )


# ---------------------------------------------------------------------------
# file formats


def save_model(path, spec: ModelSpec, weights: np.ndarray) -> None:
    hidden = ",".join(str(h) for h in spec.hidden)
    header = (
        f"{MODEL_MAGIC} {MODEL_VERSION} kind={spec.kind} input-dim={spec.input_dim} "
        f"num-classes={spec.num_classes} hidden={hidden} activation={spec.activation} "
        f"bias={int(spec.bias)} split-index={spec.split_index} dim={spec.total_dim}"
    )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for v in weights:
            fh.write(repr(float(v)) + "\n")


def load_model(path) -> tuple[ModelSpec, np.ndarray]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty model file")
    tokens = lines[0].split()
    if len(tokens) < 2 or tokens[0] != MODEL_MAGIC or tokens[1] != MODEL_VERSION:
        raise DataFormatError(f"{path}:1: bad model header (expected '{MODEL_MAGIC} {MODEL_VERSION} ...')")
    fields = {}
    for tok in tokens[2:]:
        if "=" not in tok:
            raise DataFormatError(f"{path}:1: malformed header token {tok!r}")
        key, val = tok.split("=", 1)
        fields[key] = val
    try:
        hidden = tuple(int(h) for h in fields["hidden"].split(",") if h)
        spec = ModelSpec(
            kind=fields["kind"],
            input_dim=int(fields["input-dim"]),
            num_classes=int(fields["num-classes"]),
            hidden=hidden,
            activation=fields["activation"],
            bias=bool(int(fields["bias"])),
            split_index=int(fields["split-index"]),
        )
        dim = int(fields["dim"])
    except (KeyError, ValueError) as exc:
        raise DataFormatError(f"{path}:1: bad model header: {exc}") from exc
    values = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        try:
            values.append(float(line))
        except ValueError:
            raise DataFormatError(f"{path}:{lineno}: unparsable weight {line!r}")
    if len(values) != dim or dim != spec.total_dim:
        raise DataFormatError(
            f"{path}: expected {spec.total_dim} weights, header says {dim}, found {len(values)}"
        )
    return spec, np.asarray(values)


def metrics_row(rec: RoundRecord) -> dict:
    return {
        "round": rec.round,
        "source-loss": rec.post_loss,
        "avg-jacobian-norm": rec.stats.avg_norm,
        "jacobian-variance": rec.stats.variance,
        "guide-norm": rec.guide_norm,
        "learning-rate": rec.learning_rate,
        "comm-scalars": rec.comm_scalars,
        "comm-vector-entries": rec.comm_vector_entries,
    }


def write_metrics_jsonl(records: list[RoundRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(metrics_row(rec)) + "\n")


def record_to_dict(rec: RoundRecord) -> dict:
    return {
        "round": rec.round,
        "participants": list(rec.participant_ids),
        "std-subset": list(rec.std_subset_ids),
        "learning-rate": rec.learning_rate,
        "pre-loss": rec.pre_loss,
        "post-loss": rec.post_loss,
        "avg-jacobian-norm": rec.stats.avg_norm,
        "avg-jacobian-sq-norm": rec.stats.avg_sq_norm,
        "jacobian-variance": rec.stats.variance,
        "client-norms": {str(k): v for k, v in sorted(rec.stats.client_norms.items())},
        "guide-norm": rec.guide_norm,
        "surrogate-norms": {str(k): v for k, v in sorted(rec.surrogate_norms.items())},
        "comm-scalars": rec.comm_scalars,
        "comm-vector-entries": rec.comm_vector_entries,
        "algorithm": rec.algorithm,
        "xi-effective": rec.xi_effective,
        "local-steps": rec.local_steps,
        "optimizer": rec.optimizer,
        "batch-size": rec.batch_size,
        "total-clients": rec.total_clients,
    }


def record_from_dict(row: dict) -> RoundRecord:
    stats = CrossClientStats(
        round=row["round"],
        avg_jacobian=None,
        avg_norm=row["avg-jacobian-norm"],
        avg_sq_norm=row.get("avg-jacobian-sq-norm", row["avg-jacobian-norm"] ** 2),
        variance=row["jacobian-variance"],
        client_norms={int(k): v for k, v in row["client-norms"].items()},
        client_count=len(row["client-norms"]),
    )
    return RoundRecord(
        round=row["round"],
        participant_ids=tuple(row["participants"]),
        std_subset_ids=tuple(row["std-subset"]),
        learning_rate=row["learning-rate"],
        pre_loss=row["pre-loss"],
        post_loss=row["post-loss"],
        stats=stats,
        guide_norm=row["guide-norm"],
        surrogate_norms={int(k): v for k, v in row["surrogate-norms"].items()},
        comm_scalars=row["comm-scalars"],
        comm_vector_entries=row["comm-vector-entries"],
        algorithm=row["algorithm"],
        xi_effective=row["xi-effective"],
        local_steps=row["local-steps"],
        optimizer=row["optimizer"],
        batch_size=row["batch-size"],
        total_clients=row["total-clients"],
    )


def write_history_jsonl(records: list[RoundRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_dict(rec)) + "\n")


def read_history_jsonl(path) -> list[RoundRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from exc
            try:
                records.append(record_from_dict(row))
            except KeyError as exc:
                raise DataFormatError(f"{path}:{lineno}: missing field {exc}") from exc
    if not records:
        raise DataFormatError(f"{path}: empty history")
    return records


def _frozen_hash(spec: ModelSpec, weights: np.ndarray) -> str:
    return hashlib.sha256(weights[: spec.split_index].tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    source = build_source(cfg)
    save_csv(source, out / "source.csv")
    save_csv(build_target_train(cfg, source), out / "target_train.csv")
    save_csv(build_target_test(cfg), out / "target_test.csv")
    plan = build_partition(cfg, source)
    payload = {
        "scheme": plan.scheme,
        "seed": plan.seed,
        "assignments": [[int(i) for i in idx] for idx in plan.assignments],
    }
    with open(out / "partition.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh)
        fh.write("\n")
    print(f"wrote source/target CSVs and partition to {out}")


def _pretrain(cfg: ExperimentConfig, workers: int, snapshot_sink=None):
    source = build_source(cfg)
    partition = build_partition(cfg, source)
    spec = cfg.model
    w0 = init_weights(spec, split_seed(cfg.seed, "init"), cfg.init_scale)
    alpha = None
    if isinstance(cfg.federation.lr_schedule, OptimalFromStats):
        alpha = certified_alpha(spec, source, partition)
    weights, records = run_pretraining(
        spec,
        w0,
        source,
        partition,
        cfg.federation,
        cfg.rounds,
        cfg.early_stop_patience,
        seed=split_seed(cfg.seed, "federation"),
        alpha=alpha,
        workers=workers,
        snapshot_sink=snapshot_sink,
    )
    return source, partition, spec, weights, records


def cmd_pretrain(cfg: ExperimentConfig, out: Path, workers: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _, _, spec, weights, records = _pretrain(cfg, workers)
    write_metrics_jsonl(records, out / "metrics.jsonl")
    write_history_jsonl(records, out / "history.jsonl")
    save_model(out / "model.txt", spec, weights)
    print(
        f"{cfg.federation.algorithm}: {len(records)} rounds, "
        f"final source loss {records[-1].post_loss:.6g}; outputs in {out}"
    )


def cmd_transfer(cfg: ExperimentConfig, out: Path, model_path: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    spec, weights = load_model(model_path)
    source = build_source(cfg)
    target_train = build_target_train(cfg, source)
    target_test = build_target_test(cfg)
    pre_hash = _frozen_hash(spec, weights)
    finetuned, used = finetune_classifier(
        spec, weights, target_train, cfg.transfer.lr, cfg.transfer.epochs
    )
    result = evaluate_target(spec, finetuned, target_test, used)
    save_model(out / "model_finetuned.txt", spec, finetuned)
    payload = {
        "target-loss": result.target_loss,
        "target-accuracy": result.target_accuracy,
        "epochs-used": result.finetune_epochs_used,
        "frozen-split-index": result.frozen_split_index,
        "frozen-hash-pre": pre_hash,
        "frozen-hash-post": _frozen_hash(spec, finetuned),
    }
    with open(out / "transfer.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh)
        fh.write("\n")
    acc = "n/a" if result.target_accuracy is None else f"{result.target_accuracy:.4f}"
    print(f"target loss {result.target_loss:.6g}, accuracy {acc}; outputs in {out}")


def _estimated_target_loss(cfg, spec, weights, target_train) -> float:
    """Best-head target loss estimate: finetune on the target sample and
    report the achieved training loss (the empirical inf over heads)."""
    finetuned, _ = finetune_classifier(
        spec, weights, target_train, cfg.transfer.lr, cfg.transfer.epochs
    )
    return loss(spec, finetuned, target_train.to_batch())


def cmd_verify_bounds(
    cfg: ExperimentConfig, out: Path, history_path: Path, model_path: Path | None
) -> list[bounds_mod.BoundReport]:
    out.mkdir(parents=True, exist_ok=True)
    records = read_history_jsonl(history_path)
    source = build_source(cfg)
    partition = build_partition(cfg, source)
    spec = cfg.model
    alpha = certified_alpha(spec, source, partition)
    initial_loss = records[0].pre_loss
    reports: list[bounds_mod.BoundReport] = []
    if cfg.bounds.round_ub:
        reports.append(bounds_mod.verify_round_bound(records, alpha, spec))
    if cfg.bounds.telescoped_source:
        reports.append(bounds_mod.verify_telescoped_source(records, alpha, initial_loss, spec))
    needs_target = cfg.bounds.theorem2 or cfg.bounds.lemma1_full or cfg.bounds.theorem1
    if needs_target:
        if model_path is None:
            raise ConfigError("theorem-level checks need --model (the pretrained model file)")
        mspec, weights = load_model(model_path)
        if mspec != spec:
            raise ConfigError("model file spec differs from config model section")
        target_train = build_target_train(cfg, source)
        target_loss = _estimated_target_loss(cfg, spec, weights, target_train)
        samples = pretraining_feature_samples(
            spec,
            {records[-1].round: weights},
            records[-1].round,
            seed=split_seed(cfg.seed, "gf-feature-draws"),
            extra_draws=cfg.bounds.feature_extra_draws,
        )
        d_est = estimate_federated_gf_discrepancy(
            spec, source, partition, target_train, samples, cfg.bounds.head_budget
        )
        if cfg.bounds.theorem2:
            for form in ("appendix", "maintext"):
                reports.append(
                    bounds_mod.verify_theorem2(
                        records, alpha, initial_loss, d_est, target_loss, form, spec
                    )
                )
        if cfg.bounds.lemma1_full:
            reports.append(
                bounds_mod.verify_lemma1_full(
                    records, alpha, initial_loss, d_est, target_loss, spec
                )
            )
        if cfg.bounds.theorem1:
            reports.append(_verify_theorem1(cfg, spec, source, partition, target_train))
    for report in reports:
        bounds_mod.write_report_jsonl(report, out / f"bound_{report.bound_id}.jsonl")
        status = "OK" if report.holds else f"{len(report.violations)} VIOLATIONS"
        mode = "certified" if report.certified else "diagnostic"
        print(f"{report.bound_id}: {status} ({mode}, {len(report.entries)} rounds)")
    return reports


def _verify_theorem1(cfg, spec, source, partition, target_train) -> bounds_mod.BoundReport:
    from .transfer import estimate_cross_client_divergence, train_head_to_optimum

    # per-client optima of the full (convex) model
    from .models import Batch

    losses, grad_norms = [], []
    for idx in partition.assignments:
        shard = source.subset(idx).to_batch()
        val, gn, _ = train_head_to_optimum(spec, shard, cfg.bounds.head_budget)
        losses.append(val)
        grad_norms.append(gn)
    disc = cfg.bounds.discrepancy
    cc = estimate_cross_client_divergence(
        spec,
        source,
        partition,
        disc.restarts,
        disc.ascent_steps,
        disc.weight_radius,
        seed=split_seed(cfg.seed, "discrepancy"),
    )
    samples = pretraining_feature_samples(
        spec,
        {},
        cfg.rounds,
        seed=split_seed(cfg.seed, "gf-feature-draws"),
        extra_draws=cfg.bounds.feature_extra_draws,
    )
    gf = estimate_federated_gf_discrepancy(
        spec, source, partition, target_train, samples, cfg.bounds.head_budget
    )
    target_loss = _estimated_target_loss(
        cfg, spec, np.zeros(spec.total_dim), target_train
    )
    return bounds_mod.verify_theorem1(losses, cc, gf, target_loss, grad_norms)


def _window_mean(records: list[RoundRecord], attr, lo: int = 10, hi: int = 100) -> float:
    vals = [attr(r) for r in records if lo <= r.round <= hi]
    if not vals:
        vals = [attr(r) for r in records]
    return float(np.mean(vals))


def cmd_compare(cfg: ExperimentConfig, out: Path, workers: int) -> None:
    out.mkdir(parents=True, exist_ok=True)
    source = build_source(cfg)
    partition = build_partition(cfg, source)
    target_train = build_target_train(cfg, source)
    target_test = build_target_test(cfg)
    spec = cfg.model
    cells = [(alg, s) for alg in cfg.compare.algorithms for s in cfg.compare.seeds]

    def run_cell(cell):
        alg, s = cell
        fed = replace(cfg.federation, algorithm=alg)
        alpha = None
        if isinstance(fed.lr_schedule, OptimalFromStats):
            alpha = certified_alpha(spec, source, partition)
        w0 = init_weights(spec, split_seed(s, "init"), cfg.init_scale)
        weights, records = run_pretraining(
            spec, w0, source, partition, fed, cfg.rounds,
            cfg.early_stop_patience, seed=s, alpha=alpha,
        )
        finetuned, used = finetune_classifier(
            spec, weights, target_train, cfg.transfer.lr, cfg.transfer.epochs
        )
        result = evaluate_target(spec, finetuned, target_test, used)
        return {
            "algorithm": alg,
            "seed": s,
            "target-accuracy": result.target_accuracy,
            "target-loss": result.target_loss,
            "sigma2-mean-r10-100": _window_mean(records, lambda r: r.stats.variance),
            "jnorm-mean-r10-100": _window_mean(records, lambda r: r.stats.avg_norm),
        }

    if workers > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]

    cell_fields = list(rows[0].keys())
    with open(out / "cells.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cell_fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)

    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [
                "algorithm",
                "seeds",
                "target-accuracy-mean",
                "target-accuracy-std",
                "sigma2-mean-r10-100",
                "jnorm-mean-r10-100",
            ]
        )
        for alg in cfg.compare.algorithms:
            sub = [r for r in rows if r["algorithm"] == alg]
            accs = np.array([r["target-accuracy"] for r in sub], dtype=float)
            writer.writerow(
                [
                    alg,
                    len(sub),
                    repr(float(accs.mean())),
                    repr(float(accs.std(ddof=1) if len(accs) > 1 else 0.0)),
                    repr(float(np.mean([r["sigma2-mean-r10-100"] for r in sub]))),
                    repr(float(np.mean([r["jnorm-mean-r10-100"] for r in sub]))),
                ]
            )
    print(f"compared {cfg.compare.algorithms} over seeds {cfg.compare.seeds}; CSVs in {out}")


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config (YAML)")
    p.add_argument("--out", default=None, help="output directory (overrides config)")
    p.add_argument("--seed", type=int, default=None, help="master seed override")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results identical)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedgtst",
        description="deterministic federated transfer-learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, doc in (
        ("gen-data", "write source/target CSVs and the partition file"),
        ("pretrain", "run federated pretraining; write metrics, history, model"),
        ("transfer", "finetune the classifier head on the target domain"),
        ("verify-bounds", "check the recorded run against the loss inequalities"),
        ("compare", "run the algorithm suite over seeds and summarize"),
    ):
        p = sub.add_parser(name, help=doc)
        _add_common(p)
        if name == "transfer":
            p.add_argument("--model", default=None, help="model file (default <out>/model.txt)")
        if name == "verify-bounds":
            p.add_argument("--history", default=None, help="history JSONL (default <out>/history.jsonl)")
            p.add_argument("--model", default=None, help="model file for theorem-level checks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed_override=args.seed, out_override=args.out)
        out = Path(cfg.output_dir)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.command == "gen-data":
            cmd_gen_data(cfg, out)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, out, args.threads)
        elif args.command == "transfer":
            model = Path(args.model) if args.model else out / "model.txt"
            cmd_transfer(cfg, out, model)
        elif args.command == "verify-bounds":
            history = Path(args.history) if args.history else out / "history.jsonl"
            model = Path(args.model) if args.model else out / "model.txt"
            if not model.exists():
                model = None
            cmd_verify_bounds(cfg, out, history, model)
        elif args.command == "compare":
            cmd_compare(cfg, out, args.threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (DataFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
