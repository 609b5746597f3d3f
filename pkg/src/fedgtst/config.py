"""Experiment configuration: one YAML file, strict schema.

Keys are kebab-case, sections mirror the engine's modules, and unknown keys
are rejected outright so a typo cannot silently fall back to a default. The
master seed expands into named streams via seeding.split_seed; the stream
names are listed in STREAMS for reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import yaml

from .errors import ConfigError
from .federation import (
    ALGORITHMS,
    FixedLR,
    LRSchedule,
    OptimalFromStats,
    RoundConfig,
    StepDecayLR,
)
from .models import ModelSpec

STREAMS = (
    "data",  # source mixture draw
    "target-test",  # held-out target mixture draw
    "shift.train",  # label-noise stream for the shifted source
    "shift.test",  # label-noise stream for the shifted held-out set
    "partition",  # client assignment
    "init",  # weight initialization
    "federation",  # participation / std-subset / minibatch streams
    "discrepancy",  # ascent restarts
    "gf-feature-draws",  # random feature blocks
)


def _typed(value, types, where):
    if types is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if not isinstance(value, types) or isinstance(value, bool):
        raise ConfigError(f"{where}: expected {types}, got {value!r}")
    return value


def _section(raw, allowed: dict, where: str) -> dict:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = set(raw) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    out = {}
    for key, default in allowed.items():
        out[key] = raw.get(key, default)
    return out


@dataclass(frozen=True)
class ShiftConfig:
    rotation_angle: float = 0.0
    mean_translation: tuple[float, ...] | None = None
    label_noise_rate: float = 0.0


@dataclass(frozen=True)
class DataConfig:
    dim: int = 12
    num_classes: int = 10
    samples_per_class: int = 100
    class_separation: float = 4.0
    target_test_samples_per_class: int = 200
    shift: ShiftConfig = ShiftConfig()


@dataclass(frozen=True)
class PartitionConfig:
    scheme: str = "label-subset"
    clients: int = 10
    classes_per_client: int = 2
    concentration: float = 0.5


@dataclass(frozen=True)
class TransferConfig:
    lr: float = 0.1
    epochs: int = 100


@dataclass(frozen=True)
class DiscrepancyConfig:
    restarts: int = 6
    ascent_steps: int = 50
    weight_radius: float = 2.0


@dataclass(frozen=True)
class BoundsConfig:
    round_ub: bool = True
    telescoped_source: bool = True
    lemma1_full: bool = False
    theorem2: bool = False
    theorem1: bool = False
    discrepancy: DiscrepancyConfig = DiscrepancyConfig()
    head_budget: int = 2000
    feature_extra_draws: int = 8


@dataclass(frozen=True)
class CompareConfig:
    algorithms: tuple[str, ...] = ("fedavg", "fedgtst", "fediir-lite")
    seeds: tuple[int, ...] = (1, 2, 3)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/out"
    rounds: int = 100
    early_stop_patience: int | None = None
    init_scale: float = 0.1
    model: ModelSpec = ModelSpec("logistic-classifier", input_dim=12, num_classes=10)
    data: DataConfig = DataConfig()
    partition: PartitionConfig = PartitionConfig()
    federation: RoundConfig = RoundConfig()
    transfer: TransferConfig = TransferConfig()
    bounds: BoundsConfig = BoundsConfig()
    compare: CompareConfig = CompareConfig()


def _parse_shift(raw) -> ShiftConfig:
    s = _section(
        raw,
        {"rotation-angle": 0.0, "mean-translation": None, "label-noise-rate": 0.0},
        "data.shift",
    )
    translation = s["mean-translation"]
    if translation is not None:
        if not isinstance(translation, list):
            raise ConfigError("data.shift.mean-translation: expected a list or null")
        translation = tuple(float(v) for v in translation)
    return ShiftConfig(
        rotation_angle=float(_typed(s["rotation-angle"], (int, float), "data.shift.rotation-angle")),
        mean_translation=translation,
        label_noise_rate=float(
            _typed(s["label-noise-rate"], (int, float), "data.shift.label-noise-rate")
        ),
    )


def _parse_data(raw) -> DataConfig:
    s = _section(
        raw,
        {
            "dim": 12,
            "num-classes": 10,
            "samples-per-class": 100,
            "class-separation": 4.0,
            "target-test-samples-per-class": 200,
            "shift": None,
        },
        "data",
    )
    return DataConfig(
        dim=_typed(s["dim"], int, "data.dim"),
        num_classes=_typed(s["num-classes"], int, "data.num-classes"),
        samples_per_class=_typed(s["samples-per-class"], int, "data.samples-per-class"),
        class_separation=float(
            _typed(s["class-separation"], (int, float), "data.class-separation")
        ),
        target_test_samples_per_class=_typed(
            s["target-test-samples-per-class"], int, "data.target-test-samples-per-class"
        ),
        shift=_parse_shift(s["shift"]),
    )


def _parse_model(raw) -> ModelSpec:
    s = _section(
        raw,
        {
            "kind": "logistic-classifier",
            "input-dim": 12,
            "num-classes": 10,
            "hidden": [],
            "activation": "tanh",
            "bias": True,
            "split-index": None,
        },
        "model",
    )
    hidden = s["hidden"] or []
    if not isinstance(hidden, list):
        raise ConfigError("model.hidden: expected a list of layer widths")
    return ModelSpec(
        kind=s["kind"],
        input_dim=_typed(s["input-dim"], int, "model.input-dim"),
        num_classes=_typed(s["num-classes"], int, "model.num-classes"),
        hidden=tuple(int(h) for h in hidden),
        activation=s["activation"],
        bias=_typed(s["bias"], bool, "model.bias"),
        split_index=s["split-index"],
    )


def _parse_partition(raw) -> PartitionConfig:
    s = _section(
        raw,
        {
            "scheme": "label-subset",
            "clients": 10,
            "classes-per-client": 2,
            "concentration": 0.5,
        },
        "partition",
    )
    if s["scheme"] not in ("label-subset", "dirichlet"):
        raise ConfigError(f"partition.scheme: unknown scheme {s['scheme']!r}")
    return PartitionConfig(
        scheme=s["scheme"],
        clients=_typed(s["clients"], int, "partition.clients"),
        classes_per_client=_typed(s["classes-per-client"], int, "partition.classes-per-client"),
        concentration=float(_typed(s["concentration"], (int, float), "partition.concentration")),
    )


def _parse_schedule(raw) -> LRSchedule:
    s = _section(
        raw,
        {"type": "fixed", "value": 0.01, "initial": 0.01, "factor": 10.0, "period": 50},
        "federation.lr-schedule",
    )
    kind = s["type"]
    if kind == "fixed":
        return FixedLR(float(_typed(s["value"], (int, float), "lr-schedule.value")))
    if kind == "step-decay":
        return StepDecayLR(
            initial=float(_typed(s["initial"], (int, float), "lr-schedule.initial")),
            factor=float(_typed(s["factor"], (int, float), "lr-schedule.factor")),
            period=_typed(s["period"], int, "lr-schedule.period"),
        )
    if kind == "optimal-from-stats":
        return OptimalFromStats()
    raise ConfigError(f"federation.lr-schedule.type: unknown type {kind!r}")


def _parse_federation(raw) -> RoundConfig:
    s = _section(
        raw,
        {
            "algorithm": "fedavg",
            "participation-fraction": 1.0,
            "std-subset-fraction": 0.0,
            "xi": 0.0,
            "lr-schedule": None,
            "local-steps": 1,
            "batch-size": None,
            "optimizer": "gd",
            "adam-beta1": 0.9,
            "adam-beta2": 0.999,
        },
        "federation",
    )
    if s["algorithm"] not in ALGORITHMS:
        raise ConfigError(f"federation.algorithm: unknown algorithm {s['algorithm']!r}")
    batch = s["batch-size"]
    if batch is not None:
        batch = _typed(batch, int, "federation.batch-size")
    return RoundConfig(
        algorithm=s["algorithm"],
        participation_fraction=float(
            _typed(s["participation-fraction"], (int, float), "federation.participation-fraction")
        ),
        std_subset_fraction=float(
            _typed(s["std-subset-fraction"], (int, float), "federation.std-subset-fraction")
        ),
        xi=float(_typed(s["xi"], (int, float), "federation.xi")),
        lr_schedule=_parse_schedule(s["lr-schedule"]),
        local_steps=_typed(s["local-steps"], int, "federation.local-steps"),
        batch_size=batch,
        optimizer=s["optimizer"],
        adam_betas=(
            float(_typed(s["adam-beta1"], (int, float), "federation.adam-beta1")),
            float(_typed(s["adam-beta2"], (int, float), "federation.adam-beta2")),
        ),
    )


def _parse_transfer(raw) -> TransferConfig:
    s = _section(raw, {"lr": 0.1, "epochs": 100}, "transfer")
    return TransferConfig(
        lr=float(_typed(s["lr"], (int, float), "transfer.lr")),
        epochs=_typed(s["epochs"], int, "transfer.epochs"),
    )


def _parse_bounds(raw) -> BoundsConfig:
    s = _section(
        raw,
        {
            "round-ub": True,
            "telescoped-source": True,
            "lemma1-full": False,
            "theorem2": False,
            "theorem1": False,
            "discrepancy": None,
            "head-budget": 2000,
            "feature-extra-draws": 8,
        },
        "bounds",
    )
    d = _section(
        s["discrepancy"],
        {"restarts": 6, "ascent-steps": 50, "weight-radius": 2.0},
        "bounds.discrepancy",
    )
    return BoundsConfig(
        round_ub=_typed(s["round-ub"], bool, "bounds.round-ub"),
        telescoped_source=_typed(s["telescoped-source"], bool, "bounds.telescoped-source"),
        lemma1_full=_typed(s["lemma1-full"], bool, "bounds.lemma1-full"),
        theorem2=_typed(s["theorem2"], bool, "bounds.theorem2"),
        theorem1=_typed(s["theorem1"], bool, "bounds.theorem1"),
        discrepancy=DiscrepancyConfig(
            restarts=_typed(d["restarts"], int, "bounds.discrepancy.restarts"),
            ascent_steps=_typed(d["ascent-steps"], int, "bounds.discrepancy.ascent-steps"),
            weight_radius=float(
                _typed(d["weight-radius"], (int, float), "bounds.discrepancy.weight-radius")
            ),
        ),
        head_budget=_typed(s["head-budget"], int, "bounds.head-budget"),
        feature_extra_draws=_typed(s["feature-extra-draws"], int, "bounds.feature-extra-draws"),
    )


def _parse_compare(raw) -> CompareConfig:
    s = _section(
        raw,
        {"algorithms": ["fedavg", "fedgtst", "fediir-lite"], "seeds": [1, 2, 3]},
        "compare",
    )
    algorithms = tuple(s["algorithms"])
    for a in algorithms:
        if a not in ALGORITHMS:
            raise ConfigError(f"compare.algorithms: unknown algorithm {a!r}")
    return CompareConfig(
        algorithms=algorithms,
        seeds=tuple(int(v) for v in s["seeds"]),
    )


def parse_config(raw: dict) -> ExperimentConfig:
    top = _section(
        raw,
        {
            "seed": 0,
            "output-dir": "runs/out",
            "rounds": 100,
            "early-stop-patience": None,
            "init-scale": 0.1,
            "model": None,
            "data": None,
            "partition": None,
            "federation": None,
            "transfer": None,
            "bounds": None,
            "compare": None,
        },
        "config",
    )
    patience = top["early-stop-patience"]
    if patience is not None:
        patience = _typed(patience, int, "early-stop-patience")
    cfg = ExperimentConfig(
        seed=_typed(top["seed"], int, "seed"),
        output_dir=str(top["output-dir"]),
        rounds=_typed(top["rounds"], int, "rounds"),
        early_stop_patience=patience,
        init_scale=float(_typed(top["init-scale"], (int, float), "init-scale")),
        model=_parse_model(top["model"]),
        data=_parse_data(top["data"]),
        partition=_parse_partition(top["partition"]),
        federation=_parse_federation(top["federation"]),
        transfer=_parse_transfer(top["transfer"]),
        bounds=_parse_bounds(top["bounds"]),
        compare=_parse_compare(top["compare"]),
    )
    if cfg.model.input_dim != cfg.data.dim:
        raise ConfigError(
            f"model.input-dim ({cfg.model.input_dim}) must equal data.dim ({cfg.data.dim})"
        )
    if cfg.model.is_classifier and cfg.model.num_classes != cfg.data.num_classes:
        raise ConfigError(
            f"model.num-classes ({cfg.model.num_classes}) must equal "
            f"data.num-classes ({cfg.data.num_classes}) for classifiers"
        )
    if cfg.rounds < 1:
        raise ConfigError("rounds must be >= 1")
    return cfg


def load_config(
    path, seed_override: int | None = None, out_override: str | None = None
) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = parse_config(raw)
    if seed_override is not None:
        cfg = replace(cfg, seed=seed_override)
    if out_override is not None:
        cfg = replace(cfg, output_dir=str(out_override))
    return cfg
