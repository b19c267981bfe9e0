"""Declarative pipeline configuration (TOML) with strict key checking.

Values are resolved with the precedence flags > file > defaults. Every
section mirrors the defaults of the module that owns the parameters.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import tomli

from .align import SearchGrid
from .attention import MorphConfig
from .embed import BuiltinBackend, SpoolConfig, external_backend
from .errors import ConfigError, MissingInputError
from .evaluation import EvalConfig
from .pipeline import PipelineParams
from .synth import SynthConfig

DEFAULTS: dict = {
    "seed": 42,
    "threads": 1,
    "paths": {"dataset": "data", "work": "work", "index": ""},
    "synth": {f.name: f.default for f in fields(SynthConfig) if f.name != "seed"},
    "anfis": {"epochs": 200, "learning_rate": 0.05, "per_class": 30, "n_train": 25, "spread": 0.5},
    "align": {"thumb_magnification": 1.25, "theta_range": 15.0, "theta_step": 1.0, "scale_set": (0.95, 1.0, 1.05)},
    "attention": {
        "theta_mask": 32,
        "erode_iters": 1,
        "dilate_iters": 1,
        "element_size": 3,
        "mask_mode": "union",
        "tau": 0.5,
        "stride": 300,
        "random_count": 8,
        "min_tissue": 0.5,
        "fallback_coverage": 0.1,
    },
    "embed": {"backend": "builtin", "spool_dir": "", "timeout": 120.0, "backend_id": "external"},
    "eval": {"n_values": (1, 3, 5, 7), "ranking": "median_of_min"},
}


def _coerce(value, default, where: str):
    """Cast ``value`` to the type of ``default``; lists become tuples."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        inner = default[0] if default else None
        return tuple(_coerce(v, inner, where) if inner is not None else v for v in value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        where = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be a table")
            _merge(base[key], value, where + ".")
        else:
            base[key] = _coerce(value, base[key], where)


def parse_override(text: str) -> dict:
    """``section.key=value`` to a nested dict; the value is read as TOML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    path, raw = text.split("=", 1)
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    out: dict = {}
    node = out
    keys = path.strip().split(".")
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value
    return out


@dataclass
class PipelineConfig:
    data: dict

    @classmethod
    def load(cls, path=None, overrides=(), seed: int | None = None, threads: int | None = None) -> "PipelineConfig":
        data = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except FileNotFoundError as exc:
                raise MissingInputError(f"config file not found: {path}") from exc
            try:
                _merge(data, tomli.loads(text))
            except tomli.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        for item in overrides:
            _merge(data, parse_override(item) if isinstance(item, str) else item)
        if seed is not None:
            data["seed"] = _coerce(seed, 0, "seed")
        if threads is not None:
            data["threads"] = _coerce(threads, 0, "threads")
        cfg = cls(data)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        # constructing every typed view surfaces range errors early
        self.synth_config()
        self.params()
        self.eval_config()
        if self.data["embed"]["backend"] not in ("builtin", "spool"):
            raise ConfigError(f"embed.backend must be 'builtin' or 'spool', got {self.data['embed']['backend']!r}")

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def threads(self) -> int:
        return self.data["threads"]

    @property
    def dataset_dir(self) -> Path:
        return Path(self.data["paths"]["dataset"])

    @property
    def work_dir(self) -> Path:
        return Path(self.data["paths"]["work"])

    def index_path(self, mode: str) -> Path:
        explicit = self.data["paths"]["index"]
        return Path(explicit) if explicit else self.work_dir / f"index_{mode}.ihcx"

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**self.data["synth"], seed=self.seed)

    def params(self) -> PipelineParams:
        a, att, al = self.data["anfis"], self.data["attention"], self.data["align"]
        grid = SearchGrid(al["theta_range"], al["theta_step"], al["scale_set"])
        if grid.theta_step <= 0 or grid.theta_range < 0 or not grid.scale_set:
            raise ConfigError("align: theta_step > 0, theta_range >= 0 and a non-empty scale_set are required")
        if att["mask_mode"] not in ("union", "intersection"):
            raise ConfigError(f"attention.mask_mode must be union or intersection, got {att['mask_mode']!r}")
        if not 0 < att["tau"] <= 1 or att["stride"] < 1 or att["random_count"] < 1:
            raise ConfigError("attention: tau in (0, 1], stride >= 1 and random_count >= 1 are required")
        if not 0 < att["fallback_coverage"] <= 1:
            raise ConfigError("attention.fallback_coverage must be in (0, 1]")
        if att["element_size"] < 1 or att["element_size"] % 2 == 0:
            raise ConfigError("attention.element_size must be odd and >= 1")
        if a["epochs"] < 1 or not 0 < a["spread"] <= 1 or not 0 < a["n_train"] < a["per_class"]:
            raise ConfigError("anfis: epochs >= 1, spread in (0, 1] and 0 < n_train < per_class are required")
        return PipelineParams(
            seed=self.seed,
            anfis_epochs=a["epochs"],
            anfis_learning_rate=a["learning_rate"],
            anfis_per_class=a["per_class"],
            anfis_n_train=a["n_train"],
            anfis_spread=a["spread"],
            theta_mask=att["theta_mask"],
            morph=MorphConfig(att["erode_iters"], att["dilate_iters"], att["element_size"]),
            mask_mode=att["mask_mode"],
            tau=att["tau"],
            stride=att["stride"],
            thumb_magnification=al["thumb_magnification"],
            grid=grid,
            random_count=att["random_count"],
            min_tissue=att["min_tissue"],
            fallback_coverage=att["fallback_coverage"],
        )

    def eval_config(self, mode: str = "targeted") -> EvalConfig:
        e = self.data["eval"]
        if e["ranking"] not in ("median_of_min", "pooled"):
            raise ConfigError(f"eval.ranking must be median_of_min or pooled, got {e['ranking']!r}")
        return EvalConfig(tuple(e["n_values"]), mode, self.seed, e["ranking"])

    def backend(self):
        e = self.data["embed"]
        if e["backend"] == "builtin":
            return BuiltinBackend()
        if not e["spool_dir"]:
            raise ConfigError("embed.spool_dir is required for the spool backend")
        return external_backend(SpoolConfig(e["spool_dir"], e["timeout"], backend_id=e["backend_id"]))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.data))

    @property
    def hash(self) -> str:
        """Digest of every setting that can change an artifact (threads cannot)."""
        d = self.to_dict()
        d.pop("threads")
        canonical = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
