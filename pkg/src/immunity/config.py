"""Flat key=value run configuration with strict unknown-key rejection.

Config files hold one ``key = value`` per line with ``#`` comments;
command-line overrides use the same syntax. Every run echoes its fully
resolved configuration so experiments stay auditable and diffable.
"""

from __future__ import annotations

from fractions import Fraction

from .attacks import AttackSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Raised for usage-level problems: bad keys, values, or flags."""


def parse_fraction(text: str) -> float:
    """Accept plain decimals or fractions like 8/255."""
    text = str(text).strip()
    try:
        if "/" in text:
            return float(Fraction(text))
        return float(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"cannot parse number {text!r}: {exc}") from None


def _parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"cannot parse boolean {text!r}")


def _parse_int(text: str) -> int:
    try:
        return int(str(text).strip())
    except ValueError:
        raise ConfigError(f"cannot parse integer {text!r}") from None


def _parse_channels(text: str) -> tuple:
    try:
        return tuple(int(p) for p in str(text).split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"cannot parse channel list {text!r}; expected e.g. 8,16,32") from None


# key -> (parser, default)
SCHEMA: dict = {
    "n_experts": (_parse_int, 5),
    "conv_channels": (_parse_channels, (8, 16, 32)),
    "learning_rate": (parse_fraction, 0.001),
    "weight_decay": (parse_fraction, 5e-4),
    "momentum": (parse_fraction, 0.5),
    "epochs": (_parse_int, 20),
    "batch_size": (_parse_int, 32),
    "alpha": (parse_fraction, 1.0),
    "beta": (parse_fraction, 1.0),
    "gamma": (parse_fraction, 0.1),
    "mode": (str, "standard"),
    "seed": (_parse_int, 0),
    "rsg_train_mode": (str, "identity"),
    "rsg_eval_mode": (str, "fresh_permutation"),
    "augment": (_parse_bool, False),
    "inner_attack_kind": (str, "pgd"),
    "inner_attack_eps": (parse_fraction, 8 / 255),
    "inner_attack_step_size": (parse_fraction, 2 / 255),
    "inner_attack_iterations": (_parse_int, 10),
    "inner_attack_random_start": (_parse_bool, True),
}


class RunConfig:
    """Resolved flat configuration for a training run."""

    def __init__(self, values: dict | None = None):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}
        if values:
            self.update(values)

    def update(self, raw: dict) -> None:
        errors = []
        for key, text in raw.items():
            if key not in SCHEMA:
                errors.append(f"unknown config key {key!r}")
                continue
            parser, _ = SCHEMA[key]
            try:
                self.values[key] = parser(text) if isinstance(text, str) else text
            except ConfigError as exc:
                errors.append(f"{key}: {exc}")
        if errors:
            raise ConfigError("; ".join(errors))

    def __getitem__(self, key: str):
        return self.values[key]

    def echo(self) -> dict:
        """Fully resolved configuration for reports and logs."""
        out = dict(self.values)
        out["conv_channels"] = list(out["conv_channels"])
        return out

    def train_config(self) -> TrainConfig:
        v = self.values
        inner = None
        if v["mode"] == "adversarial":
            inner = AttackSpec(kind=v["inner_attack_kind"], epsilon=v["inner_attack_eps"],
                               step_size=v["inner_attack_step_size"],
                               iterations=v["inner_attack_iterations"],
                               random_start=v["inner_attack_random_start"],
                               rsg_handling="identity")
        problems = []
        try:
            cfg = TrainConfig(learning_rate=v["learning_rate"], weight_decay=v["weight_decay"],
                              momentum=v["momentum"], epochs=v["epochs"],
                              batch_size=v["batch_size"], alpha=v["alpha"], beta=v["beta"],
                              gamma=v["gamma"], mode=v["mode"], inner_attack=inner,
                              seed=v["seed"], rsg_train_mode=v["rsg_train_mode"],
                              rsg_eval_mode=v["rsg_eval_mode"], augment=v["augment"])
        except ValueError as exc:
            problems.append(str(exc))
        if v["n_experts"] < 1:
            problems.append(f"n_experts must be >= 1, got {v['n_experts']}")
        if problems:
            raise ConfigError("; ".join(problems))
        return cfg


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into a raw string dict; all syntax errors
    are gathered and reported together."""
    raw: dict = {}
    errors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected 'key = value', got {stripped!r}")
            continue
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key in raw:
            errors.append(f"line {lineno}: duplicate key {key!r}")
            continue
        raw[key] = value
    if errors:
        raise ConfigError("; ".join(errors))
    return raw


def load_config(path: str | None, overrides: list[str] | None = None) -> RunConfig:
    """File config plus ``key=value`` override strings; later wins."""
    config = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            config.update(parse_config_text(fh.read()))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        config.update({key.strip(): value.strip()})
    return config
