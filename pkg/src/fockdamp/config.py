"""Pipeline configuration: typed sections, INI text round-trip and a stable hash."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import re
import math
from dataclasses import dataclass, field

from .numkernel import CavityParams
from .trajsim import DEFAULT_PHASE_SETTINGS, ProbeModel

__all__ = ["ConfigError", "PipelineConfig", "load_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CavitySection:
    damping_time: float = 0.130
    n_b: float = 0.06
    n_max: int = 7

    def params(self) -> CavityParams:
        return CavityParams(kappa=1.0 / self.damping_time, n_b=self.n_b, n_max=self.n_max)


@dataclass(frozen=True)
class ProbeSection:
    phase0: float = math.pi / 4
    A: float = -0.1
    B: float = 0.7
    phase_settings: tuple = DEFAULT_PHASE_SETTINGS
    mean_interval: float = 0.24e-3
    arrival_mode: str = "poisson"
    schedule: str = "round_robin"

    def model(self, n_max: int) -> ProbeModel:
        return ProbeModel.linear(
            n_max, self.phase0, A=self.A, B=self.B, phase_settings=self.phase_settings,
            mean_interval=self.mean_interval, arrival_mode=self.arrival_mode,
            schedule=self.schedule)


@dataclass(frozen=True)
class RunSection:
    sequences: int = 2000
    duration: float = 0.650
    initial_mean: float = 4.4
    seed: int = 42


@dataclass(frozen=True)
class FilterSection:
    # "coherent_fit" takes damping time, n_b and the initial Poisson mean from
    # the coherent reconstruction; "config" uses the cavity section as given
    source: str = "coherent_fit"


@dataclass(frozen=True)
class ReconstructionSection:
    N: int = 25
    iterations: int = 20
    grid_spacing: float = 2e-3
    min_realizations: int = 20
    bootstrap: int = 0


@dataclass(frozen=True)
class SelectionSection:
    threshold: float = 0.7
    dedup_window: float = 0.010
    horizon: float = 0.400
    rearm: bool = True
    margin: float = 0.020  # extra detections kept past the horizon for the last windows


@dataclass(frozen=True)
class FitSection:
    window: float = 0.020
    constrained: bool = True
    var_floor: float = 0.03
    jacobian: str = "2-point"


@dataclass(frozen=True)
class HistogramSection:
    window_atoms: int = 110
    stride: int = 1
    max_atoms: int = 700
    bins: int = 60
    smoothing: float = 1.5
    min_rel_height: float = 0.01
    select_n: int = 3


@dataclass(frozen=True)
class ReportSection:
    snapshot_times: tuple = (0.010, 0.100, 0.250)
    prediction_horizon: float = 0.400


SECTIONS = {
    "cavity": CavitySection,
    "probe": ProbeSection,
    "run": RunSection,
    "filter": FilterSection,
    "reconstruction": ReconstructionSection,
    "selection": SelectionSection,
    "fit": FitSection,
    "histogram": HistogramSection,
    "report": ReportSection,
}


@dataclass(frozen=True)
class PipelineConfig:
    cavity: CavitySection = field(default_factory=CavitySection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    run: RunSection = field(default_factory=RunSection)
    filter: FilterSection = field(default_factory=FilterSection)
    reconstruction: ReconstructionSection = field(default_factory=ReconstructionSection)
    selection: SelectionSection = field(default_factory=SelectionSection)
    fit: FitSection = field(default_factory=FitSection)
    histogram: HistogramSection = field(default_factory=HistogramSection)
    report: ReportSection = field(default_factory=ReportSection)

    def __post_init__(self):
        try:
            self.cavity.params()
            self.probe.model(self.cavity.n_max)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        checks = [
            (self.run.sequences >= 1, "run.sequences must be >= 1"),
            (self.run.duration > 0, "run.duration must be positive"),
            (self.run.initial_mean >= 0, "run.initial_mean must be non-negative"),
            (self.run.seed >= 0, "run.seed must be non-negative"),
            (self.filter.source in ("coherent_fit", "config"),
             "filter.source must be coherent_fit or config"),
            (self.reconstruction.N >= 1, "reconstruction.N must be >= 1"),
            (self.reconstruction.iterations >= 1, "reconstruction.iterations must be >= 1"),
            (self.reconstruction.grid_spacing > 0, "reconstruction.grid_spacing must be positive"),
            (self.reconstruction.bootstrap >= 0, "reconstruction.bootstrap must be >= 0"),
            (0.5 < self.selection.threshold < 1, "selection.threshold must lie in (0.5, 1)"),
            (self.selection.dedup_window >= 0, "selection.dedup_window must be >= 0"),
            (self.selection.horizon > 0, "selection.horizon must be positive"),
            (self.selection.margin >= 0, "selection.margin must be >= 0"),
            (self.fit.window > 0, "fit.window must be positive"),
            (self.fit.var_floor > 0, "fit.var_floor must be positive"),
            (self.fit.jacobian in ("2-point", "sensitivity"),
             "fit.jacobian must be 2-point or sensitivity"),
            (self.histogram.window_atoms >= len(self.probe.phase_settings),
             "histogram.window_atoms must cover every phase setting"),
            (self.histogram.stride >= 1, "histogram.stride must be >= 1"),
            (self.histogram.bins >= 4, "histogram.bins must be >= 4"),
            (0 <= self.histogram.select_n <= self.cavity.n_max,
             "histogram.select_n outside the photon-number range"),
            (all(t >= 0 for t in self.report.snapshot_times),
             "report.snapshot_times must be non-negative"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def seed(self) -> int:
        return self.run.seed

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def to_ini(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            for key, v in values.items():
                lines.append(f"{key} = {_format(v)}")
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        """Short SHA-256 of the canonical JSON form."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def with_overrides(self, overrides) -> "PipelineConfig":
        """Apply ``section.key=value`` strings (or ``(dotted_key, value)`` pairs)."""
        values = self.to_dict()
        for item in overrides:
            if isinstance(item, str):
                if "=" not in item:
                    raise ConfigError(f"override {item!r} is not of the form section.key=value")
                key, raw = item.split("=", 1)
            else:
                key, raw = item
            section, _, name = key.strip().partition(".")
            _check_key(section, name)
            values[section][name] = raw
        return PipelineConfig.from_dict(values)

    @classmethod
    def from_dict(cls, values: dict) -> "PipelineConfig":
        kw = {}
        for section, sec_cls in SECTIONS.items():
            raw = values.get(section, {})
            defaults = sec_cls()
            args = {}
            for name, v in raw.items():
                _check_key(section, name)
                args[name] = _coerce(f"{section}.{name}", getattr(defaults, name), v)
            kw[section] = sec_cls(**args)
        unknown = set(values) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        return cls(**kw)


def _check_key(section, name):
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r}")
    names = {f.name for f in dataclasses.fields(SECTIONS[section])}
    if name not in names:
        raise ConfigError(f"unknown key {section}.{name}")


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key, default, v):
    if not isinstance(v, str):
        if isinstance(default, tuple):
            return tuple(float(x) for x in v)
        return v
    s = v.strip()
    try:
        if isinstance(default, bool):
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
        if isinstance(default, tuple):
            return tuple(float(x) for x in re.split(r"[,;]", s) if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {v!r} as {type(default).__name__}") from None
    return s


def load_config(path=None, overrides=()) -> PipelineConfig:
    """Defaults, then the INI file at ``path``, then ``overrides``."""
    values = PipelineConfig().to_dict()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"{path}: unknown config section {section!r}")
            for name, raw in parser.items(section):
                _check_key(section, name)
                values[section][name] = raw
    cfg = PipelineConfig.from_dict(values)
    return cfg.with_overrides(overrides) if overrides else cfg
