"""Strict JSON experiment configuration: unknown keys are errors.

One schema covers the four studies; each study owns one section of extra
settings and the presence of any other study's section is rejected, which
catches shift-spec typos before anything trains.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping

from .data import KAPPA_SCHEDULE, ShiftSpec
from .errors import ConfigError
from .models import TrainConfig

__all__ = [
    "ExperimentConfig",
    "ModelSettings",
    "DataSettings",
    "ScoreSettings",
    "WeightSettings",
    "load_config",
    "parse_config",
]

STUDIES = ("robustness", "group-map", "double-shift", "coverage-sanity")
_STUDY_SECTIONS = {
    "robustness": "robustness",
    "group-map": "group_map",
    "double-shift": "double_shift",
    "coverage-sanity": "coverage_sanity",
}


def _require(mapping: Mapping[str, Any], key: str, where: str) -> Any:
    if key not in mapping:
        raise ConfigError(f"missing required key {key!r} in {where}")
    return mapping[key]


def _check_keys(mapping: Mapping[str, Any], allowed: set[str], where: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(
            f"unknown key(s) {sorted(unknown)} in {where}; allowed: {sorted(allowed)}"
        )


def _typed(value: Any, kind, key: str, where: str):
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if kind is int and isinstance(value, bool):
        raise ConfigError(f"{where}.{key} must be {kind.__name__}, got bool")
    if not isinstance(value, kind):
        raise ConfigError(
            f"{where}.{key} must be {getattr(kind, '__name__', kind)}, "
            f"got {type(value).__name__}"
        )
    return value


@dataclass(frozen=True)
class DataSettings:
    classes: int = 4
    side: int = 32
    train: int = 2000
    canon: int = 1000
    calibration: int = 500
    test: int = 500


@dataclass(frozen=True)
class ModelSettings:
    arch: str = "mlp-1hidden"
    hidden: int = 64
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.1
    momentum: float = 0.9
    optimizer: str = "sgd-momentum"
    patience: int | None = None
    seed: int = 0
    temperature: float = 1.0
    path: str | None = None

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            optimizer=self.optimizer,
            momentum=self.momentum,
            patience=self.patience,
        )


@dataclass(frozen=True)
class ScoreSettings:
    kind: str = "aps"
    randomized: bool = False
    seed: int = 0


@dataclass(frozen=True)
class WeightSettings:
    metric: str = "cross-entropy"
    power: float = 2.0
    epsilon: float = 1e-6


@dataclass(frozen=True)
class ExperimentConfig:
    study: str
    seed: int
    trials: int
    alpha: float
    out: str | None
    data: DataSettings
    predictor: ModelSettings
    canonicalizer: ModelSettings
    score: ScoreSettings
    weights: WeightSettings
    methods: tuple[str, ...]
    extra: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def _parse_section(section, defaults, where: str, int_keys=(), float_keys=(), str_keys=(), bool_keys=(), nullable=()):
    allowed = set(int_keys) | set(float_keys) | set(str_keys) | set(bool_keys)
    _check_keys(section, allowed, where)
    out = dict(defaults)
    for key, value in section.items():
        if key in nullable and value is None:
            out[key] = None
            continue
        if key in int_keys:
            out[key] = _typed(value, int, key, where)
        elif key in float_keys:
            out[key] = _typed(value, float, key, where)
        elif key in bool_keys:
            out[key] = _typed(value, bool, key, where)
        else:
            out[key] = _typed(value, str, key, where)
    return out


def _parse_model(section, where: str, defaults: ModelSettings) -> ModelSettings:
    values = _parse_section(
        section,
        {
            "arch": defaults.arch,
            "hidden": defaults.hidden,
            "epochs": defaults.epochs,
            "batch_size": defaults.batch_size,
            "learning_rate": defaults.learning_rate,
            "momentum": defaults.momentum,
            "optimizer": defaults.optimizer,
            "patience": defaults.patience,
            "seed": defaults.seed,
            "temperature": defaults.temperature,
            "path": defaults.path,
        },
        where,
        int_keys=("hidden", "epochs", "batch_size", "patience", "seed"),
        float_keys=("learning_rate", "momentum", "temperature"),
        str_keys=("arch", "optimizer", "path"),
        nullable=("patience", "path"),
    )
    return ModelSettings(**values)


def parse_shift_spec(section: Mapping[str, Any], where: str) -> ShiftSpec:
    """Build a ShiftSpec from its JSON form."""
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be an object")
    variant = _require(section, "variant", where)
    if variant == "none":
        _check_keys(section, {"variant"}, where)
        return ShiftSpec.none()
    if variant == "dirac":
        _check_keys(section, {"variant", "poses"}, where)
        poses = _require(section, "poses", where)
        try:
            return ShiftSpec.dirac({int(k): int(v) for k, v in poses.items()})
        except (AttributeError, TypeError, ValueError) as exc:
            raise ConfigError(f"{where}.poses must map partition -> pose index: {exc}")
    if variant == "discrete-normal":
        _check_keys(section, {"variant", "params"}, where)
        params = _require(section, "params", where)
        try:
            return ShiftSpec.discrete_normal(
                {int(k): (float(v[0]), float(v[1])) for k, v in params.items()}
            )
        except (AttributeError, TypeError, ValueError, IndexError) as exc:
            raise ConfigError(f"{where}.params must map partition -> [mu, sigma]: {exc}")
    if variant == "uniform":
        _check_keys(section, {"variant", "partitions"}, where)
        parts = _require(section, "partitions", where)
        return ShiftSpec.uniform([int(p) for p in parts])
    if variant == "var-gauss":
        _check_keys(section, {"variant", "partitions", "sigma_seed"}, where)
        parts = _require(section, "partitions", where)
        seed = _typed(_require(section, "sigma_seed", where), int, "sigma_seed", where)
        return ShiftSpec.var_gauss([int(p) for p in parts], seed)
    if variant == "von-mises-mixture":
        _check_keys(section, {"variant", "centers", "kappa"}, where)
        centers = _require(section, "centers", where)
        kappa = _typed(_require(section, "kappa", where), float, "kappa", where)
        return ShiftSpec.von_mises_mixture([float(c) for c in centers], kappa)
    raise ConfigError(f"{where}.variant {variant!r} is not a known shift family")


def parse_config(raw: Mapping[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a JSON object")
    top_allowed = {
        "study",
        "seed",
        "trials",
        "alpha",
        "out",
        "data",
        "predictor",
        "canonicalizer",
        "score",
        "weights",
        "methods",
    } | set(_STUDY_SECTIONS.values())
    _check_keys(raw, top_allowed, "config")

    study = _typed(_require(raw, "study", "config"), str, "study", "config")
    if study not in STUDIES:
        raise ConfigError(f"study must be one of {STUDIES}, got {study!r}")
    for other, section in _STUDY_SECTIONS.items():
        if section in raw and other != study:
            raise ConfigError(
                f"section {section!r} belongs to study {other!r}, not {study!r}"
            )

    seed = _typed(_require(raw, "seed", "config"), int, "seed", "config")
    trials = _typed(_require(raw, "trials", "config"), int, "trials", "config")
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    alpha = _typed(_require(raw, "alpha", "config"), float, "alpha", "config")
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    out = raw.get("out")
    if out is not None:
        out = _typed(out, str, "out", "config")

    data_values = _parse_section(
        raw.get("data", {}),
        DataSettings().__dict__,
        "data",
        int_keys=("classes", "side", "train", "canon", "calibration", "test"),
    )
    data = DataSettings(**data_values)

    predictor = _parse_model(raw.get("predictor", {}), "predictor", ModelSettings())
    canon_defaults = ModelSettings(hidden=32, epochs=20, learning_rate=0.2)
    canonicalizer = _parse_model(raw.get("canonicalizer", {}), "canonicalizer", canon_defaults)

    score_values = _parse_section(
        raw.get("score", {}),
        ScoreSettings().__dict__,
        "score",
        int_keys=("seed",),
        str_keys=("kind",),
        bool_keys=("randomized",),
    )
    score = ScoreSettings(**score_values)
    if score.kind not in ("aps", "thr"):
        raise ConfigError(f"score.kind must be 'aps' or 'thr', got {score.kind!r}")

    weight_values = _parse_section(
        raw.get("weights", {}),
        WeightSettings().__dict__,
        "weights",
        float_keys=("power", "epsilon"),
        str_keys=("metric",),
    )
    weights = WeightSettings(**weight_values)
    if weights.metric not in ("kl", "cross-entropy"):
        raise ConfigError(
            f"weights.metric must be 'kl' or 'cross-entropy', got {weights.metric!r}"
        )

    default_methods = {
        "robustness": ["scp"],
        "group-map": ["scp", "mcp"],
        "double-shift": ["scp", "wcp"],
        "coverage-sanity": ["scp"],
    }[study]
    methods = raw.get("methods", default_methods)
    if not isinstance(methods, list) or not methods:
        raise ConfigError("methods must be a non-empty list")
    for m in methods:
        if m not in ("scp", "mcp", "wcp"):
            raise ConfigError(f"unknown method {m!r}; expected scp, mcp or wcp")

    extra = _parse_study_section(study, raw.get(_STUDY_SECTIONS[study], {}), data)

    return ExperimentConfig(
        study=study,
        seed=seed,
        trials=trials,
        alpha=alpha,
        out=out,
        data=data,
        predictor=predictor,
        canonicalizer=canonicalizer,
        score=score,
        weights=weights,
        methods=tuple(methods),
        extra=extra,
        raw=dict(raw),
    )


def _parse_study_section(study: str, section: Mapping[str, Any], data: DataSettings) -> dict:
    where = _STUDY_SECTIONS[study]
    if study == "robustness":
        _check_keys(section, {"groups", "shifts"}, where)
        groups = section.get("groups", [4, 8])
        if not isinstance(groups, list) or not all(
            isinstance(g, int) and g > 1 for g in groups
        ):
            raise ConfigError(f"{where}.groups must be a list of group orders")
        shifts = section.get("shifts", ["none", "c4", "c8"])
        for s in shifts:
            if s not in ("none", "c4", "c8"):
                raise ConfigError(f"{where}.shifts entries must be none/c4/c8, got {s!r}")
        return {"groups": list(groups), "shifts": list(shifts)}
    if study == "group-map":
        _check_keys(
            section,
            {"group", "shift", "partition", "entropy_edges", "map_mode", "confidence_threshold"},
            where,
        )
        group = section.get("group", 4)
        if not isinstance(group, int) or group < 2:
            raise ConfigError(f"{where}.group must be an integer order >= 2")
        shift_raw = section.get("shift", {"variant": "dirac", "poses": {str(k): k % group for k in range(data.classes)}})
        shift = parse_shift_spec(shift_raw, f"{where}.shift")
        partition = section.get("partition", "by-label")
        if partition not in ("by-label", "by-partition-field", "by-entropy-bins"):
            raise ConfigError(
                f"{where}.partition must be by-label, by-partition-field or by-entropy-bins"
            )
        entropy_edges = section.get("entropy_edges")
        if partition == "by-entropy-bins":
            if not isinstance(entropy_edges, list) or not entropy_edges:
                raise ConfigError(
                    f"{where}.entropy_edges must be a non-empty list of bin edges"
                )
            entropy_edges = [_typed(e, float, "entropy_edges", where) for e in entropy_edges]
            if sorted(entropy_edges) != entropy_edges:
                raise ConfigError(f"{where}.entropy_edges must be sorted ascending")
        elif entropy_edges is not None:
            raise ConfigError(
                f"{where}.entropy_edges only applies to the by-entropy-bins partition"
            )
        map_mode = section.get("map_mode", "sample")
        if map_mode not in ("sample", "argmax"):
            raise ConfigError(f"{where}.map_mode must be sample or argmax")
        threshold = section.get("confidence_threshold", 0.0)
        threshold = _typed(threshold, float, "confidence_threshold", where)
        if not 0.0 <= threshold < 1.0:
            raise ConfigError(f"{where}.confidence_threshold must lie in [0, 1)")
        return {
            "group": group,
            "shift": shift,
            "shift_raw": shift_raw,
            "partition": partition,
            "entropy_edges": entropy_edges,
            "map_mode": map_mode,
            "confidence_threshold": threshold,
        }
    if study == "double-shift":
        _check_keys(section, {"group", "kappas"}, where)
        group = section.get("group", 4)
        if not isinstance(group, int) or group < 2:
            raise ConfigError(f"{where}.group must be an integer order >= 2")
        kappas = section.get("kappas", list(KAPPA_SCHEDULE))
        if not isinstance(kappas, list) or not kappas:
            raise ConfigError(f"{where}.kappas must be a non-empty list")
        kappas = [_typed(k, float, "kappas", where) for k in kappas]
        if any(k <= 0 for k in kappas):
            raise ConfigError(f"{where}.kappas must be positive")
        return {"group": group, "kappas": kappas}
    # coverage-sanity
    _check_keys(section, {"alphas", "n_cal", "n_test", "oracle_instances"}, where)
    alphas = section.get("alphas", [0.05, 0.1])
    if not isinstance(alphas, list) or not alphas:
        raise ConfigError(f"{where}.alphas must be a non-empty list")
    alphas = [_typed(a, float, "alphas", where) for a in alphas]
    if any(not 0 < a < 1 for a in alphas):
        raise ConfigError(f"{where}.alphas must lie in (0, 1)")
    n_cal = _typed(section.get("n_cal", 500), int, "n_cal", where)
    n_test = _typed(section.get("n_test", 500), int, "n_test", where)
    oracle = _typed(section.get("oracle_instances", 1000), int, "oracle_instances", where)
    return {"alphas": alphas, "n_cal": n_cal, "n_test": n_test, "oracle_instances": oracle}


def load_config(path) -> ExperimentConfig:
    """Read and validate a JSON config file."""
    try:
        with open(path, "r") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}")
    return parse_config(raw)
