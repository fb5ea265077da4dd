"""Experiment configuration: a sectioned ``key = value`` text file.

Every recognised key, its type and its default live in :data:`SCHEMA`; a key
outside the schema is an error, never silently ignored. Example::

    [run]
    seed = 0
    out = runs/demo

    [data]
    kind = synth
    per_class = 100

    [eval]
    kinds = pgd, opgd, spgd
    n_list = 1, 5, 10
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Optional

from .attacks import ATTACK_KINDS, AttackConfig
from .data import SynthConfig
from .nets import ARCHITECTURES
from .radar import TrainConfig


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (CLI exit code 1)."""


def _number(text: str) -> float:
    # accepts "0.0627", "1e-3" and exact ratios such as "16/255"
    return float(Fraction(text.strip())) if "/" in text else float(text)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {text!r}")
        return text
    return parse


def _list(item: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            raise ValueError("empty list")
        return tuple(item(p) for p in parts)
    return parse


_train_keys = {
    "epochs": (int, None), "batch_size": (int, 32), "lr": (_number, None),
    "schedule": (_choice("cosine", "plateau", "constant"), None), "t_max": (int, None),
    "patience": (int, 3), "factor": (_number, 0.1),
}

SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], Any]]] = {
    "run": {"seed": (int, None), "out": (str, "out")},
    "data": {
        "kind": (_choice("synth", "cifar10"), "synth"),
        "path": (str, ""),
        "num_classes": (int, 10), "per_class": (int, 100), "test_per_class": (int, 10),
        "image_size": (int, 16), "channels": (int, 3), "blobs": (int, 3),
        "contrast": (_number, 0.1), "sigma": (_number, 0.05),
        "train_fraction": (_number, 0.7), "train_limit": (int, 0), "test_limit": (int, 0),
    },
    "classifier": {"arch": (_choice(*ARCHITECTURES), "cnn-small"),
                   **{k: (t, d) for k, (t, d) in _train_keys.items()},
                   "epochs": (int, 10), "lr": (_number, 1e-3),
                   "schedule": (_choice("cosine", "plateau", "constant"), "cosine"), "t_max": (int, 10)},
    "detector": {"arch": (_choice(*ARCHITECTURES), "cnn-small"),
                 **{k: (t, d) for k, (t, d) in _train_keys.items()},
                 "epochs": (int, 30), "lr": (_number, 3e-3),
                 "schedule": (_choice("cosine", "plateau", "constant"), "cosine"), "t_max": (int, 30),
                 "attack_iters": (int, 10)},
    "radar": {**{k: (t, d) for k, (t, d) in _train_keys.items()},
              "epochs": (int, 20), "lr": (_number, 3e-4),
              "schedule": (_choice("cosine", "plateau", "constant"), "plateau"), "t_max": (int, 20),
              "attack": (_list(_choice("opgd", "spgd")), ("opgd",)), "attack_iters": (int, 10),
              "val_limit": (int, 100)},
    "attack": {
        "epsilon": (_number, 16 / 255), "alpha": (_number, 0.03), "iters": (int, 100),
        "kind": (_choice(*ATTACK_KINDS), "opgd"), "detector": (_choice("pre", "radar"), "radar"),
        "early_stop": (_bool, False), "detector_threshold": (_number, 0.5),
        "batch_size": (int, 256), "limit": (int, 0),
    },
    "eval": {
        "kinds": (_list(_choice(*ATTACK_KINDS)), ("pgd", "opgd", "spgd")),
        "n_list": (_list(_number), (1.0, 5.0, 10.0)),
        "trajectory_images": (int, 20),
        "test_limit": (int, 0),
    },
}


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, Any]]
    source: Optional[Path] = None
    lines: dict[tuple[str, str], int] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["run"]["seed"]

    @property
    def out(self) -> Path:
        return Path(self.values["run"]["out"])

    def synth(self, seed: int, per_class: Optional[int] = None) -> SynthConfig:
        d = self.values["data"]
        return SynthConfig(num_classes=d["num_classes"], per_class=per_class or d["per_class"],
                           image_size=d["image_size"], channels=d["channels"], blobs=d["blobs"],
                           contrast=d["contrast"], sigma=d["sigma"], seed=seed)

    def train_config(self, section: str, seed: int) -> TrainConfig:
        s = self.values[section]
        return TrainConfig(epochs=s["epochs"], batch_size=s["batch_size"], lr=s["lr"],
                           schedule=s["schedule"], t_max=s["t_max"], patience=s["patience"],
                           factor=s["factor"], seed=seed)

    def attack_config(self, kind: Optional[str] = None, iters: Optional[int] = None,
                      record: bool = False) -> AttackConfig:
        a = self.values["attack"]
        return AttackConfig(epsilon=a["epsilon"], alpha=a["alpha"],
                            iters=a["iters"] if iters is None else iters,
                            kind=kind or a["kind"], record_loss_trajectory=record,
                            detector_threshold=a["detector_threshold"], early_stop=a["early_stop"])

    def dump(self) -> str:
        """Canonical text form of the resolved config (all defaults filled in).

        ``[run] out`` is left out so that reruns into different directories
        produce identical text.
        """
        out = []
        for section, keys in SCHEMA.items():
            out.append(f"[{section}]")
            for key in keys:
                if (section, key) == ("run", "out"):
                    continue
                v = self.values[section][key]
                if isinstance(v, tuple):
                    v = ", ".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
                elif isinstance(v, float):
                    v = repr(v)
                out.append(f"{key} = {v}")
            out.append("")
        return "\n".join(out)


def _line_numbers(text: str) -> dict[tuple[str, str], int]:
    where, section = {}, None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.fullmatch(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
        elif section and s and s[0] not in "#;":
            key = re.split(r"[=:]", s, maxsplit=1)[0].strip().lower()
            where.setdefault((section, key), no)
    return where


def parse_config(text: str, source: Optional[Path] = None, seed_override: Optional[int] = None,
                 out_override: Optional[str] = None) -> ExperimentConfig:
    name = str(source) if source else "<config>"
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        parser.read_string(text, source=name)
    except configparser.Error as exc:
        raise ConfigError(f"{name}: {exc}".replace("\n", " ")) from exc
    lines = _line_numbers(text)
    values = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{name}: unknown section [{section}]; known: {', '.join(SCHEMA)}")
        for key, raw in parser.items(section):
            at = f"{name}:{lines.get((section, key), '?')}"
            if key not in SCHEMA[section]:
                raise ConfigError(f"{at}: unknown key '{key}' in section [{section}]")
            conv = SCHEMA[section][key][0]
            try:
                values[section][key] = conv(raw)
            except (ValueError, ZeroDivisionError) as exc:
                raise ConfigError(f"{at}: bad value for [{section}] {key}: {exc}") from exc
    if seed_override is not None:
        values["run"]["seed"] = seed_override
    if out_override is not None:
        values["run"]["out"] = out_override
    cfg = ExperimentConfig(values, source, lines)
    _check(cfg, name)
    return cfg


def load_config(path, seed_override: Optional[int] = None, out_override: Optional[str] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, path, seed_override, out_override)


def _check(cfg: ExperimentConfig, name: str) -> None:
    v = cfg.values
    if v["run"]["seed"] is None:
        raise ConfigError(f"{name}: a seed is required ([run] seed or --seed)")
    if not 0 <= v["run"]["seed"] < 2 ** 64:
        raise ConfigError(f"{name}: seed must be an unsigned 64-bit integer")
    if v["data"]["kind"] == "cifar10" and not v["data"]["path"]:
        raise ConfigError(f"{name}: [data] kind = cifar10 needs [data] path")
    if v["data"]["kind"] == "cifar10":
        # CIFAR-10 records are fixed at 3 x 32 x 32
        v["data"]["image_size"], v["data"]["channels"] = 32, 3
    for section in ("classifier", "detector", "radar"):
        try:
            cfg.train_config(section, 0)
        except ValueError as exc:
            raise ConfigError(f"{name}: [{section}] {exc}") from exc
    try:
        cfg.attack_config().validate()
        cfg.synth(0)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    for sec, key in (("detector", "attack_iters"), ("radar", "attack_iters")):
        if v[sec][key] < 0:
            raise ConfigError(f"{name}: [{sec}] {key} must be >= 0")
    if any(not 0 < n < 100 for n in v["eval"]["n_list"]):
        raise ConfigError(f"{name}: [eval] n_list entries must lie in (0, 100)")
