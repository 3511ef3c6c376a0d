"""Experiment configuration: one JSON document per run.

Every knob has a default; ``resolve`` fills in the data-dependent ones
(temperature, weight decay, noise level, learning rate) so that the
resolved document alone reproduces a run.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema

from .data import DataSpec, ZLaw, build_spec

__all__ = ["ConfigError", "ExperimentConfig", "SCHEMA", "load_config", "list_presets", "load_preset"]


class ConfigError(ValueError):
    """The configuration document is malformed or inconsistent."""


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_RATIO = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}
_NULLABLE_POS = {"oneOf": [{"type": "null"}, _POS]}
_NULLABLE_INT = {"oneOf": [{"type": "null"}, {"type": "integer", "minimum": 1}]}

SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "vitssl experiment",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "objective": {"enum": ["mae", "cl"]},
        "mode": {"enum": ["exact", "mc"]},
        "num_patches": {"type": "integer", "minimum": 4},
        "num_clusters": {"type": "integer", "minimum": 1},
        "kappa_c": {"oneOf": [{"type": "null"}, _NUM]},
        "kappa_s": {"oneOf": [{"type": "null"}, _NUM]},
        "global_size": _NULLABLE_INT,
        "local_size": _NULLABLE_INT,
        "contiguous": {"type": "boolean"},
        "z_law": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "low", "high"],
            "properties": {"kind": {"enum": ["uniform", "point"]}, "low": _NUM, "high": _NUM},
        },
        "mask_ratio": _RATIO,
        "augment_ratio": _RATIO,
        "learning_rate": {"oneOf": [{"const": "auto"}, {"type": "number", "minimum": 0}]},
        "regularization": {"oneOf": [{"type": "null"}, {"type": "number", "minimum": 0}]},
        "temperature": _NULLABLE_POS,
        "noise_variance": {"oneOf": [{"type": "null"}, {"type": "number", "minimum": 0}]},
        "num_negatives": {"type": "integer", "minimum": 1},
        "negative_pool": _NULLABLE_INT,
        "resample": {"type": "boolean"},
        "batch_size": {"type": "integer", "minimum": 1},
        "max_steps": {"type": "integer", "minimum": 0},
        "stop_when": {"enum": ["budget", "converged", "grad_norm"]},
        "grad_tol": _POS,
        "log_every": {"type": "integer", "minimum": 1},
        "checkpoints": {"type": "integer", "minimum": 0},
        "tracked_patches": {"oneOf": [{"const": "all"}, {"type": "array", "items": {"type": "integer", "minimum": 0}}]},
        "thresholds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epsilon": _POS,
                "offset": _NUM,
                "c_gap": _POS,
                "c_local": _POS,
                "c_negative": _POS,
                "c_global": _POS,
                "multipliers": {"type": "object", "additionalProperties": _POS},
            },
        },
        "epsilon": _POS,
        "locality_factor": _POS,
        "eval_masks": {"type": "integer", "minimum": 1},
        "eval_samples": {"type": "integer", "minimum": 1},
        "diversity_n": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
        "backend": {"oneOf": [{"type": "null"}, {"enum": ["cython", "numpy"]}]},
    },
}


@dataclass
class ExperimentConfig:
    """All settings of one training run; see ``docs/formats.md``."""

    name: str = "run"
    objective: str = "mae"
    mode: str = "mc"
    num_patches: int = 64
    num_clusters: int = 2
    kappa_c: float | None = 0.9
    kappa_s: float | None = 0.35
    global_size: int | None = None
    local_size: int | None = None
    contiguous: bool = False
    z_law: dict = field(default_factory=lambda: ZLaw().to_dict())
    mask_ratio: float = 0.5
    augment_ratio: float = 0.5
    learning_rate: float | str = "auto"
    regularization: float | None = None
    temperature: float | None = None
    noise_variance: float | None = None
    num_negatives: int = 32
    negative_pool: int | None = None
    resample: bool = False
    batch_size: int = 256
    max_steps: int = 1000
    stop_when: str = "budget"
    grad_tol: float = 1e-4
    log_every: int = 1
    checkpoints: int = 4
    tracked_patches: list | str = "all"
    thresholds: dict = field(default_factory=dict)
    epsilon: float = 0.05
    locality_factor: float = 2.0
    eval_masks: int = 200
    eval_samples: int = 20
    diversity_n: int = 10
    seed: int = 0
    output_dir: str = "runs/run"
    backend: str | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(doc, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {exc.message}") from None
        cfg = cls(**copy.deepcopy(doc))
        cfg.check()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def check(self) -> None:
        """Consistency rules that the schema cannot express."""
        exps = self.kappa_c is not None or self.kappa_s is not None
        sizes = self.global_size is not None or self.local_size is not None
        if exps and sizes:
            raise ConfigError("give either exponents or explicit area sizes, not both")
        if not exps and not sizes:
            raise ConfigError("give exponents or explicit area sizes")
        if isinstance(self.tracked_patches, list) and any(p >= self.num_patches for p in self.tracked_patches):
            raise ConfigError("tracked patch index out of range")
        if self.stop_when == "converged" and self.objective == "cl":
            raise ConfigError("contrastive runs stop on the gradient norm or the budget")
        try:
            self.build_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def build_spec(self) -> DataSpec:
        law = ZLaw.from_dict(self.z_law)
        if self.global_size is not None:
            return build_spec(
                self.num_patches,
                self.num_clusters,
                global_size=self.global_size,
                local_size=self.local_size,
                z_law=law,
                seed=self.seed,
                contiguous=self.contiguous,
            )
        return build_spec(
            self.num_patches, self.num_clusters, self.kappa_c, self.kappa_s, z_law=law, seed=self.seed, contiguous=self.contiguous
        )

    def patches(self) -> list[int]:
        if self.tracked_patches == "all":
            return list(range(self.num_patches))
        return sorted(set(int(p) for p in self.tracked_patches))


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read and validate a configuration file, a preset name, or ``preset:<name>``."""
    text = str(path)
    if text.startswith("preset:"):
        doc = _preset_doc(text.split(":", 1)[1])
    elif not Path(text).exists() and text in list_presets():
        doc = _preset_doc(text)
    else:
        try:
            doc = json.loads(Path(text).read_text())
        except FileNotFoundError:
            raise ConfigError(f"no such configuration file or preset: {text}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{text}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    doc.update(overrides or {})
    return ExperimentConfig.from_dict(doc)


def list_presets() -> list[str]:
    root = resources.files("vitssl") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def _preset_doc(name: str) -> dict:
    root = resources.files("vitssl") / "presets"
    path = root / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(list_presets())}")
    return json.loads(path.read_text())


def load_preset(name: str, **overrides: Any) -> ExperimentConfig:
    doc = _preset_doc(name)
    doc.update(overrides)
    return ExperimentConfig.from_dict(doc)
