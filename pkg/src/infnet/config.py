"""Run configuration: ``key = value`` files with ``[section]`` headers plus command-line overrides."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable


class ConfigError(ValueError):
    """Invalid, unknown, or inconsistent configuration."""


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(" ", "").split(",") if v)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        text = text.strip()
        if text not in options:
            raise ValueError(f"{text!r} is not one of {', '.join(options)}")
        return text

    return parse


_INPUT_PATH = "input-path"

# section -> key -> (parser, default); parser _INPUT_PATH marks files that must exist
SCHEMA: dict[str, dict[str, tuple[Any, Any]]] = {
    "run": {
        "task": (_choice("mlc", "seq"), "seq"),
        "seed": (int, 0),
        "output_dir": (str, ""),
        "model": (_INPUT_PATH, ""),
        "tlm_model": (_INPUT_PATH, ""),
        "split": (_choice("train", "dev", "test"), "test"),
        "debug": (_bool, False),
    },
    "data": {
        "train": (_INPUT_PATH, ""),
        "dev": (_INPUT_PATH, ""),
        "test": (_INPUT_PATH, ""),
        "unlabeled": (_INPUT_PATH, ""),
        "embeddings": (_INPUT_PATH, ""),
        "embedding_dim": (int, 50),
        "bioes": (_bool, False),
    },
    "model": {
        "hidden": (_int_list, (150, 150)),
        "hidden_dim": (int, 100),
        "energy_hidden": (int, 16),
        "tlm_weight": (float, 0.0),
        "tlm_layers": (int, 1),
        "tlm_hidden": (int, 50),
        "tlm_dropout": (float, 0.5),
    },
    "train": {
        "hinge": (_choice("margin-rescaled", "slack-rescaled", "perceptron", "contrastive"), "margin-rescaled"),
        "cost": (_choice("l2", "l1", "zero", "one"), ""),
        "normalize_cost": (_bool, False),
        "l2_phi": (float, 0.0),
        "entropy": (float, 0.0),
        "cross_entropy": (float, 0.0),
        "anchor": (float, 0.0),
        "l2_theta": (float, 0.0),
        "phi_optimizer": (_choice("adam", "sgd"), "adam"),
        "phi_lr": (float, 0.001),
        "phi_momentum": (float, 0.9),
        "theta_optimizer": (_choice("adam", "sgd"), "adam"),
        "theta_lr": (float, 0.001),
        "batch_size": (int, 32),
        "epochs": (int, 100),
        "patience": (int, 10),
        "pretrain_epochs": (int, 10),
        "pretrain_lr": (float, 0.001),
        "pretrained_init": (_bool, True),
        "retune_epochs": (int, 20),
        "retune_lr": (float, 1e-5),
        "optimizer": (_choice("adam", "sgd"), "adam"),
        "lr": (float, 0.001),
        "momentum": (float, 0.9),
        "l2": (float, 0.0),
        "stabilizer": (_choice("cross-entropy", "entropy", "l2", "none"), "cross-entropy"),
        "stabilizer_weight": (float, 1.0),
        "clip": (float, 5.0),
    },
    "bench": {
        "batch_size": (int, 32),
        "repeats": (int, 3),
    },
    "synth": {
        "n_states": (int, 8),
        "n_symbols": (int, 50),
        "n_train": (int, 5000),
        "n_dev": (int, 1000),
        "n_test": (int, 1000),
        "min_length": (int, 5),
        "max_length": (int, 20),
        "embedding_dim": (int, 20),
        "n_labels": (int, 12),
        "n_features": (int, 40),
    },
}


@dataclass
class RunConfig:
    """Typed configuration values addressed as ``cfg["section.key"]`` or ``cfg.section("train")``."""

    values: dict[str, dict[str, Any]] = field(default_factory=dict)
    explicit: set[str] = field(default_factory=set)

    def __getitem__(self, dotted: str) -> Any:
        section, key = _split_key(dotted)
        return self.values[section][key]

    def section(self, name: str) -> dict[str, Any]:
        return dict(self.values[name])

    def is_set(self, dotted: str) -> bool:
        return dotted in self.explicit

    def require(self, *dotted: str) -> None:
        for key in dotted:
            if not self[key]:
                raise ConfigError(f"config key {key} is required for this command")

    def as_lines(self) -> list[str]:
        return [f"{s}.{k}\t{_render(v)}" for s in sorted(self.values) for k, v in sorted(self.values[s].items())]


def _render(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _split_key(dotted: str) -> tuple[str, str]:
    section, sep, key = dotted.partition(".")
    if not sep or section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"unknown config key {dotted!r}")
    return section, key


def _parse_value(dotted: str, text: str, base: Path) -> Any:
    section, key = _split_key(dotted)
    parser, _ = SCHEMA[section][key]
    if parser is _INPUT_PATH:
        text = text.strip()
        if not text:
            return ""
        path = Path(text)
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ConfigError(f"config key {dotted}: path {str(path)!r} does not exist")
        return str(path)
    try:
        return parser(text)
    except ValueError as err:
        raise ConfigError(f"config key {dotted}: {err}") from None


def load_config(path=None, overrides: Iterable[str] = (), seed: int | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``section.key=value`` overrides, then ``seed``.

    Relative input paths in a file resolve against the file's directory;
    those in overrides resolve against the working directory.
    """
    values = {s: {k: default for k, (_, default) in keys.items()} for s, keys in SCHEMA.items()}
    explicit: set[str] = set()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {str(path)!r} does not exist")
        parser = configparser.ConfigParser(interpolation=None, strict=True, delimiters=("=",))
        parser.optionxform = str
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as err:
            raise ConfigError(f"{path}: {err}") from None
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{path}: unknown config section [{section}]")
            for key, text in parser.items(section):
                dotted = f"{section}.{key}"
                values[section][key] = _parse_value(dotted, text, path.parent)
                explicit.add(dotted)
    for item in overrides:
        dotted, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted = dotted.strip()
        section, key = _split_key(dotted)
        values[section][key] = _parse_value(dotted, text, Path.cwd())
        explicit.add(dotted)
    if seed is not None:
        values["run"]["seed"] = int(seed)
        explicit.add("run.seed")
    return RunConfig(values, explicit)
