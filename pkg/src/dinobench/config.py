"""Run configuration: one INI file with a section per component.

Values are typed from the dataclass defaults they override. Unknown sections or
keys and unparsable values are all collected and reported together.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .augment import AugmentPolicy
from .backbone import PRESETS, BackboneConfig
from .classifiers import ProbeConfig
from .errors import ConfigError
from .harness import SweepConfig
from .trainer import TrainerConfig

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass(frozen=True)
class DataConfig:
    manifest: str | None = None
    resolution: int = 32
    channels: int = 3


@dataclass(frozen=True)
class ClassifierConfig:
    svm_C: float = 1.0
    svm_tol: float = 1e-3
    lr_l2: float = 1.0
    knn_k: int = 10
    probe_lr: float = 1e-3
    probe_backbone_lr: float | None = None
    probe_batch_size: int = 32
    probe_max_epochs: int = 200
    probe_val_fraction: float = 0.3
    probe_stop_rel_improvement: float | None = 0.005

    def probe(self, resolution: int) -> ProbeConfig:
        return ProbeConfig(lr=self.probe_lr, backbone_lr=self.probe_backbone_lr,
                           batch_size=self.probe_batch_size, max_epochs=self.probe_max_epochs,
                           val_fraction=self.probe_val_fraction,
                           stop_rel_improvement=self.probe_stop_rel_improvement, resolution=resolution)


@dataclass(frozen=True)
class SweepSection:
    grid: tuple[int, ...] = (1, 5, 10, 25, 50, 100, 250, 500, 1000)
    repeats: int = 100
    baseline_repeats: int = 5
    classifiers: tuple[str, ...] = ("svm", "lr", "knn")
    filter_250: bool = False
    threshold: int = 250
    test_fraction: float = 0.3


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str | None = None
    workers: int | None = None


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    classifiers: ClassifierConfig = field(default_factory=ClassifierConfig)
    sweep: SweepSection = field(default_factory=SweepSection)
    run: RunSection = field(default_factory=RunSection)

    def sweep_config(self, workers: int = 1) -> SweepConfig:
        s, c = self.sweep, self.classifiers
        return SweepConfig(grid=s.grid, repeats=s.repeats, baseline_repeats=s.baseline_repeats,
                           classifiers=s.classifiers, filter_250=s.filter_250, threshold=s.threshold,
                           test_fraction=s.test_fraction, seed=self.run.seed, workers=workers,
                           svm_C=c.svm_C, svm_tol=c.svm_tol, lr_l2=c.lr_l2, knn_k=c.knn_k)

    def to_dict(self) -> dict:
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in fields(self)}

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for section, values in self.to_dict().items():
            cp[section] = {k: _format(v) for k, v in values.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _scalar(raw: str, kind: str):
    if kind == "bool":
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def _kind_of(annotation: str, default) -> tuple[str, bool, bool]:
    """(element kind, is tuple, accepts none) from a field annotation string."""
    ann = str(annotation)
    nullable = "None" in ann
    is_tuple = ann.startswith("tuple")
    for kind in ("bool", "int", "float", "str"):
        if kind in ann.replace("None", ""):
            return kind, is_tuple, nullable
    return type(default).__name__, is_tuple, nullable


def coerce(raw: str, annotation: str, default):
    kind, is_tuple, nullable = _kind_of(annotation, default)
    text = raw.strip()
    if nullable and text.lower() in ("none", ""):
        return None
    if is_tuple:
        return tuple(_scalar(part.strip(), kind) for part in text.split(",") if part.strip())
    return _scalar(text, kind)


def build(values: Mapping[str, Mapping[str, str]], overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Resolve raw string values (plus typed ``section.key`` overrides) into a RunConfig."""
    problems: list[str] = []
    merged: dict[str, dict[str, Any]] = {s: dict(v) for s, v in values.items()}
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        section, _, name = key.partition(".")
        merged.setdefault(section, {})[name] = val

    for section in merged:
        if section not in SECTIONS:
            problems.append(f"unknown section [{section}]")

    built = {}
    for section, factory in SECTIONS.items():
        base = factory()
        raw = dict(merged.get(section, {}))
        if section == "backbone" and "preset" in raw:
            preset = str(raw.pop("preset"))
            if preset not in PRESETS:
                problems.append(f"backbone.preset: unknown preset {preset!r} (choose from {sorted(PRESETS)})")
            else:
                base = PRESETS[preset]
        known = {f.name: f for f in fields(base)}
        kwargs = {}
        for name, value in raw.items():
            if name not in known:
                problems.append(f"{section}.{name}: unknown key")
                continue
            f = known[name]
            default = getattr(base, name)
            try:
                if isinstance(value, str):
                    value = coerce(value, f.type, default)
                elif isinstance(value, list):
                    value = tuple(value)
                kwargs[name] = value
            except ValueError as exc:
                problems.append(f"{section}.{name}: {exc}")
        try:
            built[section] = replace(base, **kwargs)
        except (ConfigError, TypeError, ValueError) as exc:
            problems.append(f"[{section}]: {exc}")
    cfg = None
    if len(built) == len(SECTIONS):
        cfg = RunConfig(**built)
        try:
            cfg.sweep_config()
        except ConfigError as exc:
            problems.append(f"[sweep]: {exc}")
    if problems:
        raise ConfigError("; ".join(problems))
    return cfg


def from_dict(d: Mapping[str, Mapping[str, Any]]) -> RunConfig:
    """Rebuild from ``RunConfig.to_dict()`` output (e.g. a checkpoint's config echo)."""
    return build(d)


def load_config(path=None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    values: dict[str, dict[str, str]] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read(p)
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from None
        values = {s: dict(cp[s]) for s in cp.sections()}
    return build(values, overrides)


def write_echo(cfg: RunConfig, out_dir) -> Path:
    """Write the fully resolved config next to a command's outputs."""
    path = Path(out_dir) / "resolved_config.ini"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.to_ini())
    return path
