"""INI-style configuration with typed defaults.

Precedence is defaults < file < command-line flags. Unknown sections or keys
are rejected so a misspelt setting never goes unnoticed.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

DEFAULTS = {
    "general": {"seed": 0, "workers": 0},
    "data": {"n": 100, "faults": 1, "freq": 15.0, "grid": 32, "dx": 5.0, "sources": 3,
             "time_samples": 64, "source_delay": 0.07, "chunk": 16},
    "train": {"loss": "mae", "opt": "adamw", "epochs": 15, "batch": 32, "lr": 0.0, "n_train": 0,
              "widths": "4,8,16,32"},
    "certify": {"eta": 0.1, "draws": 1000, "loss": "mae"},
    "suite": {"snr": "inf,30,20,10,0", "sizes": "200,400,800,1600",
              "archs": "2-4-8-16,3-6-12-24,4-8-16-32", "optimizers": "sgd,adagrad,adamw",
              "steps": 600, "faults": "1,2,3,4", "freqs": "15,20,25", "n_test": 200,
              "test_seed": 2, "n_train": 1600},
}


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"config key '{key}': {message}")
        self.key = key


def _convert(key, default, raw):
    if isinstance(default, bool):
        if str(raw).lower() in ("1", "true", "yes", "on"):
            return True
        if str(raw).lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(key, f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected an integer, got {raw!r}") from None
    if isinstance(default, float):
        try:
            return float(raw)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected a number, got {raw!r}") from None
    return str(raw)


@dataclass
class CliConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, dotted):
        section, key = dotted.split(".", 1)
        return self.values[section][key]

    @property
    def seed(self):
        return self.values["general"]["seed"]

    def as_json(self):
        return json.dumps(self.values, sort_keys=True)

    def digest(self):
        """Hash of every setting that can change a result (all but the worker count)."""
        values = {s: dict(v) for s, v in self.values.items()}
        del values["general"]["workers"]
        return hashlib.sha256(json.dumps(values, sort_keys=True).encode()).hexdigest()[:16]

    def provenance(self):
        from . import __version__
        return {"config_hash": self.digest(), "seed": self.seed, "version": __version__}


def parse_config(path=None, overrides=None) -> CliConfig:
    """Merge defaults, an optional INI file and ``{"section.key": value}`` overrides."""
    values = {s: dict(v) for s, v in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(str(path), f"cannot read file ({err.strerror})") from None
        parser.read_string(text, source=str(path))
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(section, "unknown section")
            for key, raw in parser.items(section):
                _set(values, f"{section}.{key}", raw)
    for dotted, raw in (overrides or {}).items():
        if raw is not None:
            _set(values, dotted, raw)
    return CliConfig(values)


def _set(values, dotted, raw):
    section, _, key = dotted.partition(".")
    if section not in DEFAULTS or key not in DEFAULTS[section]:
        raise ConfigError(dotted, "unknown key")
    values[section][key] = _convert(dotted, DEFAULTS[section][key], raw)


def int_list(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def float_list(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())
