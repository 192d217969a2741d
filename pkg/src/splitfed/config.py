"""Experiment configuration as flat ``key=value`` text with dotted keys."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping

from .errors import ConfigError


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("on", "true", "yes", "1"):
        return True
    if low in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {text!r}")


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if value is None:
        return "none"
    return str(value)


@dataclass(frozen=True)
class Key:
    default: Any
    parse: Callable[[str], Any]
    help: str = ""


KEYS: dict[str, Key] = {
    "model.preset": Key("tiny", str, "tiny or paper-shape"),
    "model.max_len": Key(64, int, "token positions per URL, including [CLS] and [SEP]"),
    "data.source": Key("synth", str, "'synth' or a path to a url,label CSV"),
    "data.synth.n": Key(5000, int),
    "data.synth.p": Key(0.98, float, "planted-token signal strength"),
    "data.scenario": Key("iid", str, "iid, noniid2 or noniid3"),
    "data.alpha": Key(0.7, float, "Dirichlet concentration"),
    "data.pretrain_fraction": Key(0.5, float, "share of records held out for pre-training"),
    "data.test_fraction": Key(0.2, float, "share of fine-tuning records used for testing"),
    "vocab.size": Key(1000, int),
    "vocab.min_count": Key(2, int),
    "fed.clients": Key(10, int),
    "fed.fraction": Key(0.5, float),
    "fed.local_epochs": Key(5, int),
    "fed.rounds": Key(30, int),
    "fed.ala": Key(False, _bool),
    "fed.ala.lr": Key(0.1, float),
    "fed.ala.window": Key(5, int),
    "fed.ala.tau": Key(1e-4, float),
    "fed.ala.fraction": Key(0.2, float),
    "fed.ala.cap": Key(50, int),
    "pretrain.rounds": Key(10, int),
    "pretrain.fraction": Key(1.0, float),
    "pretrain.local_epochs": Key(1, int),
    "pretrain.steps": Key(None, _opt_int, "cap on batches per client per round"),
    "pretrain.batch": Key(64, int),
    "pretrain.lr": Key(5e-5, float),
    "finetune.batch": Key(32, int),
    "finetune.lr": Key(2e-6, float),
    "freeze.layers": Key("none", str, "none, all-encoder, or ranges like 0-2,4"),
    "transport": Key("inproc", str, "inproc or socket"),
    "transport.listen": Key("127.0.0.1:0", str),
    "workers": Key(1, int),
    "seed": Key(0, int),
}


class ExperimentConfig(Mapping[str, Any]):
    """Resolved values for every known key."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        self._values = {k: spec.default for k, spec in KEYS.items()}
        for k, v in (values or {}).items():
            if k not in KEYS:
                raise ConfigError(f"unknown config key {k!r}")
            self._values[k] = v

    def __getitem__(self, key: str) -> Any:
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def updated(self, pairs: Iterable[str], origin: str = "--set") -> ExperimentConfig:
        values = dict(self._values)
        for lineno, line in enumerate(pairs, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{lineno}: expected key=value, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in KEYS:
                raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = KEYS[key].parse(raw)
            except ValueError as exc:
                raise ConfigError(f"{origin}:{lineno}: bad value for {key}: {exc}") from None
        return ExperimentConfig(values)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(self._values[k])}\n" for k in sorted(self._values))

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)


def load_config(path: str | os.PathLike | None = None,
                overrides: Iterable[str] = ()) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        cfg = cfg.updated(text.splitlines(), origin=str(path))
    return cfg.updated(overrides)
