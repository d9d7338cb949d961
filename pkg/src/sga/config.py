"""Run configuration: defaults, a JSON config file, then command-line flags.

Config file format (JSON, every key optional)::

    {
      "mcts": {"c": 1.41, "iterations": 50, "max_depth": 10, "lambda": 0.1},
      "store": {"beta": 0.3, "epsilon": 1e-5, "top_k": 3},
      "sampling": {"temperature": 0.6, "top_p": 0.95, "top_k": 20, "min_p": 0.0},
      "backend": {"kind": "mock", "base_url": null, "model": null},
      "seed": 0
    }
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .llm.backends import Sampling
from .mcts import MctsConfig
from .reward import RewardConfig
from .store import StoreConfig

DEFAULTS: dict[str, Any] = {
    "mcts": {"c": 1.41, "iterations": 50, "max_depth": 10, "lambda": 0.1},
    "store": {"beta": 0.3, "epsilon": 1e-5, "top_k": 3},
    "sampling": {"temperature": 0.6, "top_p": 0.95, "top_k": 20, "min_p": 0.0},
    "backend": {"kind": "mock", "base_url": None, "model": None},
    "seed": 0,
}

BACKEND_KINDS = ("mock", "remote")


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


@dataclass(frozen=True)
class Config:
    mcts: MctsConfig
    store: StoreConfig
    sampling: Sampling
    backend_kind: str
    base_url: str | None
    model: str | None
    seed: int
    raw: Mapping[str, Any]

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Config":
        m, s, p, b = data["mcts"], data["store"], data["sampling"], data["backend"]
        if b["kind"] not in BACKEND_KINDS:
            raise ConfigError(f"backend.kind must be one of {BACKEND_KINDS}")
        try:
            return cls(
                mcts=MctsConfig(float(m["c"]), int(m["iterations"]), int(m["max_depth"]), RewardConfig(float(m["lambda"]))),
                store=StoreConfig(float(s["beta"]), float(s["epsilon"]), int(s["top_k"])),
                sampling=Sampling(float(p["temperature"]), float(p["top_p"]), int(p["top_k"]), float(p["min_p"])),
                backend_kind=b["kind"],
                base_url=b["base_url"],
                model=b["model"],
                seed=int(data["seed"]),
                raw=data,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def resolve(file: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> Config:
    """Defaults, then the config file, then ``overrides`` (dotted keys, ``None`` means unset)."""
    data = copy.deepcopy(DEFAULTS)
    if file is not None:
        try:
            loaded = json.loads(Path(file).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{file}:{exc.lineno}: {exc.msg}") from None
        if not isinstance(loaded, Mapping):
            raise ConfigError("config file must hold a JSON object")
        data = _merge(data, loaded)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[leaf] = value
    return Config.from_dict(data)
