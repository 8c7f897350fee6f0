"""Experiment configuration: a flat ``key = value`` file with ``[run]``,
``[inputs]`` and ``[output]`` sections, plus command-line overrides."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigurationError
from .grids import SEASONS
from .mtnet import MODES

# latest fully observed month before the forecast is issued
DEFAULT_PREDICTOR_MONTH = {"jf": 12, "mam": 1, "jjas": 4, "ond": 7}
INPUT_KEYS = ("precip", "sst", "u850", "u200", "indices", "registry", "mask", "members")


def parse_years(text):
    """``1993-2020`` or ``1993,1995,2000-2002`` into a sorted tuple."""
    years = set()
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part:
            a, b = (int(x) for x in part.split("-", 1))
            if b < a:
                raise ConfigurationError(f"empty year range {part!r}")
            years.update(range(a, b + 1))
        else:
            years.add(int(part))
    if not years:
        raise ConfigurationError("empty year list")
    return tuple(sorted(years))


def format_years(years):
    """Compact range notation, inverse of :func:`parse_years`."""
    years = sorted(years)
    parts, start, prev = [], years[0], years[0]
    for y in years[1:] + [None]:
        if y is not None and y == prev + 1:
            prev = y
            continue
        parts.append(str(start) if start == prev else f"{start}-{prev}")
        if y is not None:
            start = prev = y
    return ",".join(parts)


def _flag(text):
    value = str(text).strip().lower()
    if value in ("on", "true", "yes", "1"):
        return True
    if value in ("off", "false", "no", "0"):
        return False
    raise ConfigurationError(f"expected on/off, got {text!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    season: str = "ond"
    predictor_month: int | None = None
    ref_years: tuple = tuple(range(1993, 2021))
    eval_years: tuple | None = None
    k: int = 7
    mode: str = "lasso"
    interactions: bool = False
    resolution_factor: int = 1
    seed: int = 0
    n_resamples: int = 1000
    correlation_test: str = "t"
    drop_fraction: float = 0.25
    workers: int = 1
    inputs: dict = field(default_factory=dict)
    out: str = "out"

    def __post_init__(self):
        if self.season not in SEASONS:
            raise ConfigurationError(f"unknown season {self.season!r}")
        if self.predictor_month is None:
            object.__setattr__(self, "predictor_month", DEFAULT_PREDICTOR_MONTH.get(self.season, 12))
        if not 1 <= int(self.predictor_month) <= 12:
            raise ConfigurationError("predictor_month must be 1..12")
        if int(self.predictor_month) in SEASONS[self.season]:
            raise ConfigurationError("predictor month must precede the season")
        if self.eval_years is None:
            object.__setattr__(self, "eval_years", tuple(self.ref_years))
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.correlation_test not in ("t", "fisher"):
            raise ConfigurationError("correlation_test must be t or fisher")
        if self.k < 1 or self.resolution_factor < 1 or self.workers < 1 or self.n_resamples < 1:
            raise ConfigurationError("k, resolution_factor, workers and n_resamples must be positive")
        if len(self.ref_years) < 12:
            raise ConfigurationError("need at least 12 reference years")
        unknown = set(self.inputs) - set(INPUT_KEYS)
        if unknown:
            raise ConfigurationError(f"unknown inputs {sorted(unknown)}")

    @property
    def season_months(self):
        return SEASONS[self.season]

    @property
    def predictor_year_offset(self):
        """Predictors for season year ``t`` come from year ``t + offset``."""
        return -1 if self.predictor_month >= self.season_months[0] else 0

    def with_overrides(self, **kw):
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw) if kw else self

    def to_dict(self):
        d = asdict(self)
        d["ref_years"] = format_years(self.ref_years)
        d["eval_years"] = format_years(self.eval_years)
        d["interactions"] = "on" if self.interactions else "off"
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown configuration keys {sorted(unknown)}")
        for key in ("ref_years", "eval_years"):
            if key in d and isinstance(d[key], str):
                d[key] = parse_years(d[key])
            elif key in d and d[key] is not None:
                d[key] = tuple(int(y) for y in d[key])
        if "interactions" in d and not isinstance(d["interactions"], bool):
            d["interactions"] = _flag(d["interactions"])
        for key in ("predictor_month", "k", "resolution_factor", "seed", "n_resamples", "workers"):
            if key in d and d[key] is not None:
                d[key] = int(d[key])
        if "drop_fraction" in d:
            d["drop_fraction"] = float(d["drop_fraction"])
        return cls(**d)


def load_config(path) -> ExperimentConfig:
    """Read a config file; relative input paths resolve against its directory."""
    path = Path(path)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    base = path.parent
    d = dict(parser["run"]) if parser.has_section("run") else {}
    if parser.has_section("inputs"):
        # ``members`` lists one CSV per ensemble member, comma separated
        d["inputs"] = {
            key: ",".join(str((base / v.strip()).resolve()) for v in value.split(","))
            for key, value in parser["inputs"].items()
            if value.strip()
        }
    if parser.has_section("output") and "dir" in parser["output"]:
        d["out"] = str((base / parser["output"]["dir"]).resolve())
    return ExperimentConfig.from_dict(d)


def write_config(config: ExperimentConfig, path):
    d = config.to_dict()
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {
        k: str(v) for k, v in d.items() if k not in ("inputs", "out") and v is not None
    }
    parser["inputs"] = {k: str(v) for k, v in d["inputs"].items()}
    parser["output"] = {"dir": str(d["out"])}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
