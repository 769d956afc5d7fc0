"""Experiment configuration documents: JSON schema, validation and resolution."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import jsonschema

from . import data as D
from .distillers import DistillConfig
from .errors import ConfigurationError
from .losses import MATCHING_KINDS
from .trainer import TrainConfig

SCHEMA_ID = "https://distill-lab.invalid/experiment.schema.json"

_WIDTHS = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2}
_NONNEG = {"type": "number", "minimum": 0}

SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$id": SCHEMA_ID,
    "title": "distill_lab experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "train", "output_dir"],
    "properties": {
        "dataset": {
            "oneOf": [
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"const": "spirals"},
                        "classes": {"type": "integer", "minimum": 2},
                        "per_class": {"type": "integer", "minimum": 1},
                        "noise": _NONNEG,
                        "turns": {"type": "number", "exclusiveMinimum": 0},
                        "seed": {"type": "integer"},
                        "standardize": {"type": "boolean"},
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"const": "blobs"},
                        "classes": {"type": "integer", "minimum": 2},
                        "per_class": {"type": "integer", "minimum": 1},
                        "spread": {"type": "number", "exclusiveMinimum": 0},
                        "seed": {"type": "integer"},
                        "standardize": {"type": "boolean"},
                    },
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind", "train"],
                    "properties": {
                        "kind": {"const": "files"},
                        "train": {"type": "string"},
                        "test": {"type": "string"},
                        "classes": {"type": "integer", "minimum": 2},
                    },
                },
            ]
        },
        "teacher": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "widths": _WIDTHS,
                "checkpoint": {"type": "string"},
                "seed": {"type": "integer"},
            },
        },
        "student": {
            "type": "object",
            "additionalProperties": False,
            "required": ["widths"],
            "properties": {"widths": _WIDTHS},
        },
        "distill": {
            "type": "object",
            "additionalProperties": False,
            "required": ["strategy"],
            "properties": {
                "strategy": {
                    "enum": ["ce_only", "kd", "srrl", "simkd", "ijckd_reuse", "ijckd_joint", "ijckd_penalty"]
                },
                "matching_loss": {"enum": [k.value for k in MATCHING_KINDS]},
                "lambda": _NONNEG,
                "tau": {"type": "number", "exclusiveMinimum": 0},
                "alpha": _NONNEG,
                "beta": _NONNEG,
                "alpha_ce": _NONNEG,
                "connector_depth": {"enum": [1, 2, 3]},
                "connector_hidden": {"type": ["integer", "null"], "minimum": 1},
                "connector_seed": {"type": "integer"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "nesterov": {"type": "boolean"},
                "weight_decay": _NONNEG,
                "milestones": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "gamma": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "shuffle": {"type": "boolean"},
                "decay_batchnorm": {"type": "boolean"},
            },
        },
        "output_dir": {"type": "string", "minLength": 1},
        "seeds": {
            "type": "array",
            "items": {"type": "integer", "minimum": 0},
            "minItems": 1,
            "uniqueItems": True,
        },
    },
}


def schema_json() -> str:
    return json.dumps(SCHEMA, indent=2, sort_keys=True) + "\n"


def _path_of(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


_DATASET_BRANCHES = ("spirals", "blobs", "files")


def _most_specific(err: jsonschema.ValidationError, doc) -> jsonschema.ValidationError:
    # a oneOf failure on the dataset block hides the real cause inside the
    # branch that matches the declared kind
    if not err.context or not isinstance(doc, dict) or not isinstance(doc.get("dataset"), dict):
        return err
    kind = doc["dataset"].get("kind")
    if kind not in _DATASET_BRANCHES:
        return err
    idx = _DATASET_BRANCHES.index(kind)
    inner = [e for e in err.context if e.relative_schema_path and e.relative_schema_path[0] == idx]
    return inner[0] if inner else err


def validate(doc) -> None:
    """Raise ``ConfigurationError`` naming the offending field path."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        err = _most_specific(errors[0], doc)
        raise ConfigurationError(f"config field {_path_of(err)}: {err.message}")


@dataclass
class ExperimentConfig:
    dataset: dict
    train: TrainConfig
    output_dir: Path
    seeds: list
    teacher: Optional[dict] = None
    student: Optional[dict] = None
    distill: Optional[dict] = None
    base_dir: Path = field(default_factory=Path.cwd)
    raw: dict = field(default_factory=dict)

    def distill_config(self, **overrides) -> DistillConfig:
        if self.distill is None:
            raise ConfigurationError("config field distill: required for this command")
        d = dict(self.distill)
        d.update(overrides)
        d.pop("connector_seed", None)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return DistillConfig(**d)

    def train_config(self, seed: int) -> TrainConfig:
        cfg = self.train.to_dict()
        cfg["seed"] = seed
        return TrainConfig(**cfg)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def load_data(self) -> tuple[D.Dataset, Optional[D.Dataset]]:
        spec = dict(self.dataset)
        kind = spec.pop("kind")
        if kind == "files":
            classes = spec.get("classes")
            train = D.load_dataset(self.resolve(spec["train"]), class_count=classes, split_tag="train")
            test = None
            if "test" in spec:
                test = D.load_dataset(self.resolve(spec["test"]), class_count=train.class_count, split_tag="test")
            return train, test
        standardize = spec.pop("standardize", True)
        seed = spec.pop("seed", 0)
        if kind == "spirals":
            params = dict(D.CANONICAL_SPIRALS)
            params.update(spec)
            train, test = D.make_spirals(seed=seed, **params)
        else:
            params = {"classes": 3, "per_class": 500, "spread": 1.0}
            params.update(spec)
            train, test = D.make_blobs(seed=seed, **params)
        return D.standardize(train, test) if standardize else (train, test)


def parse_experiment(doc, base_dir: Union[str, os.PathLike, None] = None) -> ExperimentConfig:
    validate(doc)
    try:
        train = TrainConfig(**doc["train"])
    except ConfigurationError as exc:
        raise ConfigurationError(f"config field train: {exc}") from None
    distill = doc.get("distill")
    if distill is not None:
        if distill["strategy"] == "ce_only" and "teacher" in doc:
            raise ConfigurationError("config field teacher: must be absent when distill.strategy is ce_only")
        probe = {k: v for k, v in distill.items() if k != "connector_seed"}
        if "lambda" in probe:
            probe["lam"] = probe.pop("lambda")
        try:
            DistillConfig(**probe)
        except ConfigurationError as exc:
            raise ConfigurationError(f"config field distill: {exc}") from None
    seeds = list(doc.get("seeds", [train.seed]))
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    out = Path(doc["output_dir"])
    return ExperimentConfig(
        dataset=doc["dataset"],
        train=train,
        output_dir=out if out.is_absolute() else base / out,
        seeds=seeds,
        teacher=doc.get("teacher"),
        student=doc.get("student"),
        distill=distill,
        base_dir=base,
        raw=doc,
    )


def load_experiment(path: Union[str, os.PathLike]) -> ExperimentConfig:
    """Read, schema-check and resolve a config file. Relative paths inside it
    are taken relative to the file's directory."""
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
    return parse_experiment(doc, base_dir=path.parent)
