"""Layered run configuration: profile defaults, then a JSON file, then flags.

A resolved configuration is a plain JSON-compatible dict.  Every command
writes its resolved configuration next to its outputs, and passing that file
back with ``--config`` re-runs the command with identical settings.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .implicit import BackwardConfig
from .trainer import TrainConfig, full_size_train_config

__all__ = ["ConfigError", "PROFILES", "profile", "merge", "load_config_file", "resolve",
           "parse_operator", "write_snapshot"]


class ConfigError(ValueError):
    pass


def _full_size_profile(sigma_255: int) -> dict:
    kind = "cpr"
    tcfg = full_size_train_config(sigma_255, kind).to_dict()
    tcfg.pop("seed")
    return {
        "seed": 0,
        "model": {"side": 13, "p1": 200, "p2": 120, "kind": kind, "gamma": 2.0,
                  "tau0": 0.05, "beta0": 1.0},
        "train": tcfg,
        "solver": {"tol": 1e-4, "max_iters": 2000},
        "reconstruct": {"tol": 1e-5, "max_iters": 20000},
        "operator": {"kind": "identity"},
        "noise_sigma": sigma_255 / 255.0,
    }


def _desk_profile() -> dict:
    tcfg = TrainConfig(
        batch_size=16, lr_dict=1e-2, lr_reg=1e-2, epochs=1, batches_per_epoch=200,
        decay_factor=0.9, sigma=25 / 255, crop_size=9,
        backward=BackwardConfig(solver="broyden", iters=50),
    ).to_dict()
    tcfg.pop("seed")
    return {
        "seed": 0,
        "model": {"side": 3, "p1": 8, "p2": 3, "kind": "ncpr", "gamma": 2.0,
                  "tau0": 0.05, "beta0": 1.0},
        "train": tcfg,
        "solver": {"tol": 1e-4, "max_iters": 2000},
        "reconstruct": {"tol": 1e-5, "max_iters": 20000},
        "operator": {"kind": "identity"},
        "noise_sigma": 25 / 255,
    }


PROFILES = {
    "paper-denoise-5": lambda: _full_size_profile(5),
    "paper-denoise-25": lambda: _full_size_profile(25),
    "desk": _desk_profile,
}


def profile(name: str) -> dict:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def merge(base: dict, override: dict) -> dict:
    """Recursive dict merge; ``None`` values in ``override`` are ignored."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if v is None:
            continue
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def resolve(command: str, profile_name: str | None, file: str | Path | None, flags: dict) -> dict:
    """Combine the layers; a config file may name its own profile."""
    from_file = load_config_file(file) if file else {}
    name = profile_name or from_file.get("profile") or "paper-denoise-25"
    cfg = merge(profile(name), from_file)
    cfg = merge(cfg, flags)
    cfg["profile"] = name
    cfg["command"] = command
    return cfg


def parse_operator(text: str) -> dict:
    """``identity``, ``sr[:sigma=2,size=16,stride=4]`` or ``mri[:acc=8,seed=0,center_fraction=...]``."""
    name, _, rest = text.partition(":")
    opts: dict = {}
    if rest:
        for item in rest.split(","):
            key, eq, val = item.partition("=")
            if not eq:
                raise ConfigError(f"bad operator option {item!r}; expected key=value")
            try:
                opts[key.strip()] = json.loads(val)
            except json.JSONDecodeError:
                opts[key.strip()] = val
    if name not in ("identity", "sr", "mri"):
        raise ConfigError(f"unknown operator {name!r}; choose identity, sr or mri")
    return {"kind": name, **opts}


def write_snapshot(cfg: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return path
