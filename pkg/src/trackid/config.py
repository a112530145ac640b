"""Flat ``key = value`` run configuration.

Every key has a command-line override ``--key-name``; precedence is preset
defaults, then the config file, then flags.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, fields
from typing import Any

from .data import PAPER_DATA, DatasetSpec
from .errors import ConfigError
from .fusion import RULES
from .models import DESK_MODEL, PAPER_MODEL, ModelConfig
from .training import StagePlan

PRESETS = ("desk", "paper")

# keys that are not fields of the dataset, model or stage dataclasses
_RUN_KEYS: dict[str, Any] = {
    "preset": "desk",
    "seed": 7,
    "out": "run",
    "data_dir": "",
    "checkpoint_dir": "",
    "report_dir": "",
    "fusion_rule": "mean",
    "topn": 5,
    "classifier": "cnn",
    "threads": 1,
    "stress_tracklets_per_class": 25,
    "ramp_tracklets_per_class": 8,
    "ramp_occluded": 4,
}

_DOCS = {
    "preset": "base defaults: desk|paper",
    "seed": "global seed for data and training",
    "out": "run directory",
    "data_dir": "dataset directory (default <out>/data)",
    "checkpoint_dir": "checkpoint directory (default <out>/checkpoints)",
    "report_dir": "report directory (default <out>/reports)",
    "fusion_rule": "|".join(RULES),
    "topn": "n for the topn rule",
    "classifier": "predict decision: cnn (fusion network) or rule (fusion_rule argmax)",
    "threads": "worker and BLAS thread cap",
    "stress_tracklets_per_class": "held-out tracklets per class for the confusable-score check",
    "ramp_tracklets_per_class": "tracklets per class for the confidence-ramp check",
    "ramp_occluded": "leading frames hidden in the ramp set",
}

_DATA_SKIP = {"seed", "occlude_first"}
_MODEL_SKIP = {"num_classes"}
_PLAN_SKIP = {"seed"}


def _field_defaults(obj, skip) -> dict[str, Any]:
    return {f.name: getattr(obj, f.name) for f in fields(obj) if f.name not in skip}


def preset_defaults(preset: str) -> dict[str, Any]:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {PRESETS}")
    data = DatasetSpec() if preset == "desk" else PAPER_DATA
    model = DESK_MODEL if preset == "desk" else PAPER_MODEL
    out = dict(_RUN_KEYS, preset=preset)
    out.update(_field_defaults(data, _DATA_SKIP))
    out.update(_field_defaults(model, _MODEL_SKIP))
    out.update(_field_defaults(StagePlan(), _PLAN_SKIP))
    return out


KEYS = tuple(preset_defaults("desk"))
LOCATION_KEYS = ("out", "data_dir", "checkpoint_dir", "report_dir")


def key_doc(key: str) -> str:
    return _DOCS.get(key, "")


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, text: str, like):
    text = text.strip()
    try:
        if isinstance(like, bool):
            if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return text.lower() in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(like).__name__}") from None
    return text


def read_config_file(path) -> dict[str, str]:
    """Raw ``key = value`` pairs; ``#`` starts a comment."""
    out: dict[str, str] = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    with fh:
        for ln, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected 'key = value'")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in KEYS:
                raise ConfigError(f"{path}:{ln}: unknown key {k!r}")
            out[k] = v
    return out


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    @classmethod
    def resolve(cls, file_values: dict[str, str] | None = None,
                overrides: dict[str, Any] | None = None) -> "RunConfig":
        file_values = dict(file_values or {})
        overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
        for k in list(file_values) + list(overrides):
            if k not in KEYS:
                raise ConfigError(f"unknown key {k!r}")
        preset = overrides.get("preset", file_values.get("preset", "desk"))
        vals = preset_defaults(str(preset).strip())
        base = dict(vals)
        for source in (file_values, overrides):
            for k, v in source.items():
                vals[k] = _parse(k, v, base[k]) if isinstance(v, str) else v
        cfg = cls(vals)
        cfg.validate()
        return cfg

    @classmethod
    def default(cls, preset: str = "desk") -> "RunConfig":
        return cls.resolve(overrides={"preset": preset})

    def validate(self):
        v = self.values
        if v["fusion_rule"] not in RULES:
            raise ConfigError(f"fusion_rule must be one of {RULES}")
        if v["classifier"] not in ("cnn", "rule"):
            raise ConfigError("classifier must be cnn or rule")
        if v["topn"] < 1:
            raise ConfigError("topn must be >= 1")
        if v["threads"] < 1:
            raise ConfigError("threads must be >= 1")
        if v["seed"] < 0 or v["seed"] >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        self.dataset_spec()
        self.model_config()

    def dump(self) -> str:
        """Normalized echo; parsing it back yields the same config."""
        lines = []
        for k in KEYS:
            doc = key_doc(k)
            if doc:
                lines.append(f"# {doc}")
            lines.append(f"{k} = {_format(self.values[k])}")
        return "\n".join(lines) + "\n"

    def echo(self) -> dict[str, str]:
        """Settings recorded next to a checkpoint. Directories are left out so
        a run produces the same sidecar wherever it is written."""
        return {k: _format(self.values[k]) for k in KEYS if k not in LOCATION_KEYS}

    # -- derived objects ----------------------------------------------------

    def dataset_spec(self, **kw) -> DatasetSpec:
        names = {f.name for f in fields(DatasetSpec)}
        args = {k: self.values[k] for k in names if k in self.values}
        args["seed"] = self.values["seed"]
        args.update(kw)
        return DatasetSpec(**args)

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)} - _MODEL_SKIP
        args = {k: self.values[k] for k in names}
        return ModelConfig(num_classes=len(self.values["numbers"]) + 2, **args)

    def stage_plan(self) -> StagePlan:
        names = {f.name for f in fields(StagePlan)} - _PLAN_SKIP
        return StagePlan(seed=self.values["seed"], **{k: self.values[k] for k in names})

    def _dir(self, key: str, sub: str) -> str:
        return self.values[key] or os.path.join(self.values["out"], sub)

    @property
    def data_path(self) -> str:
        return self._dir("data_dir", "data")

    @property
    def checkpoint_path(self) -> str:
        return self._dir("checkpoint_dir", "checkpoints")

    @property
    def report_path(self) -> str:
        return self._dir("report_dir", "reports")

