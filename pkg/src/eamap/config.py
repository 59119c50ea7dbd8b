"""Run configuration: INI-style ``key = value`` sections with strict key checking."""
from __future__ import annotations

import configparser
import hashlib
from pathlib import Path
from typing import Any, Optional, Union

from .errors import ConfigError

# section -> key -> default (type is taken from the default)
DEFAULTS: dict[str, dict[str, Any]] = {
    "model": {
        "image_size": 28,
        "patch_size": 7,
        "embed_dim": 64,
        "num_layers": 4,
        "num_heads": 4,
        "mlp_ratio": 4,
    },
    "data": {
        "source": "synthetic",
        "images": "",
        "labels": "",
        "test_images": "",
        "test_labels": "",
        "num_classes": 0,
        "classes": 10,
        "samples_per_class": 500,
        "noise": 0.2,
        "jitter": 0.15,
        "min_scale": 0.22,
        "max_scale": 0.36,
        "seed": 0,
        "test_fraction": 0.2,
        "split_seed": 0,
    },
    "train": {
        "epochs": 20,
        "batch_size": 64,
        "lr": 1e-3,
        "weight_decay": 0.0,
        "seed": 0,
    },
    "calibration": {
        "fraction": 0.05,
        "histogram_bits": 8,
        "modes": "fp32",
        "seed": 0,
        "workers": 1,
    },
    "quant": {
        "weight_bits": 32,
        "activation_bits": 32,
        "frozen_attention_bits": 32,
    },
    "fixing": {
        "tau": 0.1,
        "scope": "per-head",
        "method": "entropy",
        "seed": 0,
        "statistics": "fp32",
        "renormalize": False,
    },
    "eval": {
        "plan": "",
        "quantized": False,
    },
    "sweep": {
        "taus_pct": "0,10,20,30,40,50,60,70,80,90",
        "seeds": "0,1,2,3,4",
        "methods": "entropy,random",
        "quantized": False,
        "workers": 1,
    },
    "export": {
        "source": "entropy",
        "layer": -1,
        "head": -1,
        "format": "csv",
        "region": "full",
    },
    "paths": {
        "out": "runs",
        "checkpoint": "",
        "bank": "",
        "bank_quantized": "",
        "quant": "",
        "plan": "",
        "results": "",
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(section: str, key: str, raw: str) -> Any:
    default = DEFAULTS[section][key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}"
        ) from None
    return raw


class RunConfig:
    """Resolved configuration; attribute access by ``cfg[section][key]``."""

    def __init__(self, values: Optional[dict[str, dict[str, Any]]] = None) -> None:
        self.values = {s: dict(d) for s, d in DEFAULTS.items()}
        for section, kv in (values or {}).items():
            for key, value in kv.items():
                self.set(section, key, value)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        if isinstance(value, str):
            value = _coerce(section, key, value)
        self.values[section][key] = value

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str  # keep key case so typos are reported verbatim
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}".splitlines()[0]) from None
        cfg = cls()
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
        return cfg

    @classmethod
    def load(cls, path: Union[str, Path, None]) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_text(p.read_text())

    def to_text(self) -> str:
        lines = []
        for section, kv in self.values.items():
            lines.append(f"[{section}]")
            for key, value in kv.items():
                if isinstance(value, bool):
                    value = "true" if value else "false"
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace(" ", "").split(",") if t]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def parse_str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]
