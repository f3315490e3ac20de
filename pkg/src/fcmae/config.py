"""Plain key-value/section config files and their mapping onto run settings.

Files use INI syntax: ``[synth]``, ``[mae]``, ``[eval]``, ``[ablate]``
sections whose keys mirror the corresponding dataclass fields.  Unknown
keys are configuration errors, named explicitly.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .mae import MAEConfig
from .stats import LAMBDA_GRID, STRATIFY_BINS
from .synth import SynthSpec


def read_config(path) -> dict:
    """Parse an INI file into {section: {key: raw string}}."""
    parser = configparser.ConfigParser()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return {s: dict(parser.items(s)) for s in parser.sections()}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"field {key!r}: expected a boolean, got {raw!r}")


def _parse_pairs(raw: str, key: str) -> tuple:
    pairs = []
    for item in raw.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            l, m = item.split(":")
            pairs.append((int(l), int(m)))
        except ValueError:
            raise ConfigError(f"field {key!r}: expected 'l:m' pairs, got {item!r}") from None
    return tuple(pairs)


def _parse_ints(raw: str, key: str) -> tuple:
    try:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"field {key!r}: expected comma-separated integers") from None


def _parse_floats(raw: str, key: str) -> tuple:
    try:
        return tuple(float(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"field {key!r}: expected comma-separated numbers") from None


def _coerce_dataclass(cls, section: str, entries: dict, special=None):
    special = special or {}
    by_name = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, raw in entries.items():
        if key in special:
            kwargs[key] = special[key](raw, key)
            continue
        f = by_name.get(key)
        if f is None:
            raise ConfigError(f"unknown field {key!r} in [{section}]")
        try:
            if f.type == "int":
                kwargs[key] = int(raw)
            elif f.type == "float":
                kwargs[key] = float(raw)
            elif f.type == "bool":
                kwargs[key] = _parse_bool(raw, key)
            else:
                kwargs[key] = raw
        except ValueError:
            raise ConfigError(
                f"field {key!r} in [{section}]: cannot parse {raw!r} as {f.type}"
            ) from None
    return kwargs


def synth_spec_from(entries: dict, seed=None) -> SynthSpec:
    kwargs = _coerce_dataclass(
        SynthSpec, "synth", entries,
        special={
            "network_sizes": _parse_ints,
            "signal_blocks": _parse_pairs,
        },
    )
    if seed is not None:
        kwargs["seed"] = int(seed)
    try:
        return SynthSpec(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid [synth] section: {exc}") from exc


def mae_config_from(entries: dict, seed=None, tokenizer=None) -> MAEConfig:
    kwargs = _coerce_dataclass(MAEConfig, "mae", entries)
    if seed is not None:
        kwargs["seed"] = int(seed)
    if tokenizer is not None:
        kwargs["tokenizer"] = tokenizer
    try:
        return MAEConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid [mae] section: {exc}") from exc


@dataclass(frozen=True)
class EvalSettings:
    k: int = 10
    bins: int = STRATIFY_BINS
    kernel: str = "linear"
    lambda_grid: tuple = LAMBDA_GRID
    inner_k: int = 5
    n_boot: int = 1000
    seed: int = 0
    pooling: str = "cls"
    residualize_features: bool = False


def eval_settings_from(entries: dict, seed=None) -> EvalSettings:
    kwargs = _coerce_dataclass(
        EvalSettings, "eval", entries, special={"lambda_grid": _parse_floats}
    )
    if seed is not None:
        kwargs["seed"] = int(seed)
    return EvalSettings(**kwargs)


@dataclass(frozen=True)
class AblateSettings:
    perms: int = 20
    square_side: int = 12
    coarse_merge: int = 2
    perm_seed: int = 777


def ablate_settings_from(entries: dict) -> AblateSettings:
    kwargs = _coerce_dataclass(AblateSettings, "ablate", entries)
    return AblateSettings(**kwargs)
