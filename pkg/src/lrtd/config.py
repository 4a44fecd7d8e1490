"""Experiment manifests: strict JSON -> dataclass loading with defaults
materialised, so the echoed copy reproduces the run on its own."""
from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .alloop import StopRule
from .backbone import EncoderConfig
from .data import SyntheticSpec
from .selector import SelectionConfig
from .training import TrainConfig


class ManifestError(ValueError):
    """Invalid manifest or spec document."""


def _check_type(value, hint, where: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _check_type(value, arg, where)
            except ManifestError:
                pass
        raise ManifestError(f"{where}: unexpected value {value!r}")
    if origin is list:
        if not isinstance(value, list):
            raise ManifestError(f"{where}: expected a list, got {type(value).__name__}")
        (inner,) = typing.get_args(hint) or (typing.Any,)
        return [_check_type(v, inner, f"{where}[{i}]") for i, v in enumerate(value)]
    if hint is typing.Any:
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ManifestError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ManifestError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ManifestError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ManifestError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, doc, where: str):
    """Build dataclass ``cls`` from ``doc``, rejecting unknown keys and mistyped values."""
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ManifestError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ManifestError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {k: _check_type(v, hints[k], f"{where}.{k}") for k, v in doc.items()}
    try:
        obj = cls(**kwargs)
    except TypeError as exc:
        raise ManifestError(f"{where}: {exc}") from None
    validate = getattr(obj, "validate", None)
    if validate is not None:
        try:
            validate()
        except ValueError as exc:
            raise ManifestError(f"{where}: {exc}") from None
    return obj


@dataclass
class DatasetPaths:
    features: str
    annotations: str
    num_phases: int = 7


@dataclass
class Split:
    train: list[str]
    test: list[str]
    validation: list[str] = field(default_factory=list)


@dataclass
class Manifest:
    dataset: DatasetPaths
    split: Split
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    stop: StopRule = field(default_factory=StopRule)
    strategies: list[str] = field(default_factory=list)
    seed: int = 0
    base_dir: str = field(default=".", compare=False)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.pop("base_dir")
        doc["dataset"]["features"] = str(self.resolve(self.dataset.features).resolve())
        doc["dataset"]["annotations"] = str(self.resolve(self.dataset.annotations).resolve())
        return doc

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


_SECTIONS = {
    "dataset": DatasetPaths,
    "split": Split,
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "selection": SelectionConfig,
    "stop": StopRule,
}


def parse_manifest(doc, base_dir: str | Path = ".") -> Manifest:
    if not isinstance(doc, dict):
        raise ManifestError("manifest: expected a JSON object")
    allowed = set(_SECTIONS) | {"strategies", "seed"}
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ManifestError(f"manifest: unknown key(s) {', '.join(unknown)}")
    for required in ("dataset", "split"):
        if required not in doc:
            raise ManifestError(f"manifest: missing required key {required}")
    sections = {name: from_dict(cls, doc.get(name), name) for name, cls in _SECTIONS.items()}
    strategies = _check_type(doc.get("strategies", []), list[str], "strategies")
    seed = _check_type(doc.get("seed", 0), int, "seed")
    for s in strategies:
        from_dict(SelectionConfig, {"strategy": s}, "strategies")
    m = Manifest(**sections, strategies=strategies, seed=seed, base_dir=str(base_dir))
    overlap = set(m.split.train) & (set(m.split.test) | set(m.split.validation))
    if overlap:
        raise ManifestError(f"split: video ids in both train and held-out lists: {sorted(overlap)}")
    if set(m.split.test) & set(m.split.validation):
        raise ManifestError("split: test and validation lists overlap")
    if m.encoder.P != m.dataset.num_phases:
        raise ManifestError(f"encoder.P={m.encoder.P} but dataset.num_phases={m.dataset.num_phases}")
    return m


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"manifest {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {path}: invalid JSON ({exc})") from None
    return parse_manifest(doc, path.parent)


def load_synthetic_spec(path: str | Path | None) -> SyntheticSpec:
    if path is None:
        return SyntheticSpec()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"spec {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"spec {path}: invalid JSON ({exc})") from None
    return from_dict(SyntheticSpec, doc, "spec")


def env_overrides(seed: int | None, out: str | None) -> tuple[int | None, str | None]:
    """``LRTD_SEED`` / ``LRTD_OUT`` fill in seed and output dir when no flag is given."""
    if seed is None and os.environ.get("LRTD_SEED"):
        try:
            seed = int(os.environ["LRTD_SEED"])
        except ValueError:
            raise ManifestError(f"LRTD_SEED must be an integer, got {os.environ['LRTD_SEED']!r}") from None
    if out is None and os.environ.get("LRTD_OUT"):
        out = os.environ["LRTD_OUT"]
    return seed, out
