"""Flat key=value run configuration.

One namespace covers the network toggles and the training hyperparameters.
Values come from, in rising precedence: built-in defaults, a config file
(``key=value`` lines, ``#`` comments), then ``--set key=value`` command-line
overrides; a ``--seed`` flag finally overrides ``seed``. Unknown keys are
rejected everywhere.
"""

from __future__ import annotations

from .arch import NetworkConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad key, bad value, or unparseable config line."""


def _parse_bool(text: str) -> bool:
    if text == "true":
        return True
    if text == "false":
        return False
    raise ValueError(f"expected true or false, got {text!r}")


# key -> (parser, default); iteration order is the echo order
SCHEMA: dict = {
    "base_channels": (int, 36),
    "hda_enabled": (_parse_bool, True),
    "fdpa_enabled": (_parse_bool, True),
    "sdca_enabled": (_parse_bool, True),
    "lka_enabled": (_parse_bool, True),
    "csc_enabled": (_parse_bool, True),
    "epochs": (int, 500),
    "batch_size": (int, 16),
    "patch_size": (int, 256),
    "lr_max": (float, 2e-4),
    "lr_min": (float, 1e-6),
    "weight_decay": (float, 1e-4),
    "seed": (int, 0),
    "input_size": (int, 256),
}

_NETWORK_KEYS = (
    "base_channels",
    "hda_enabled",
    "fdpa_enabled",
    "sdca_enabled",
    "lka_enabled",
    "csc_enabled",
)


def parse_assignment(text: str) -> tuple[str, object]:
    """One ``key=value`` string -> (key, typed value)."""
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    raw = raw.strip()
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parser, _ = SCHEMA[key]
    try:
        return key, parser(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def read_config_file(path: str) -> dict:
    """Typed values from a config file; later lines override earlier ones."""
    values: dict = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    for lineno, line in enumerate(lines, 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            key, value = parse_assignment(stripped)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
        values[key] = value
    return values


def resolve_config(path: str | None, overrides: list[str], seed: int | None = None) -> tuple[dict, set]:
    """Merge defaults, file, and overrides; returns (values, explicit keys)."""
    values = {key: default for key, (_, default) in SCHEMA.items()}
    explicit: set = set()
    if path is not None:
        from_file = read_config_file(path)
        values.update(from_file)
        explicit |= set(from_file)
    for text in overrides:
        key, value = parse_assignment(text)
        values[key] = value
        explicit.add(key)
    if seed is not None:
        values["seed"] = int(seed)
        explicit.add("seed")
    return values, explicit


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def effective_lines(values: dict) -> list[str]:
    return [f"# {key}={format_value(values[key])}" for key in SCHEMA]


def network_config(values: dict) -> NetworkConfig:
    cfg = NetworkConfig(**{key: values[key] for key in _NETWORK_KEYS})
    cfg.validate()
    return cfg


def train_config(values: dict) -> TrainConfig:
    cfg = TrainConfig(
        epochs=values["epochs"],
        batch_size=values["batch_size"],
        patch_size=values["patch_size"],
        lr_max=values["lr_max"],
        lr_min=values["lr_min"],
        weight_decay=values["weight_decay"],
        seed=values["seed"],
    )
    cfg.validate()
    return cfg


def network_keys_differ(values: dict, explicit: set, other: NetworkConfig) -> list[str]:
    """Explicitly-set network keys whose values disagree with ``other``."""
    other_dict = other.to_dict()
    return [
        key
        for key in _NETWORK_KEYS
        if key in explicit and values[key] != other_dict[key]
    ]
