"""Flat ``key = value`` run configuration with ``[train]``, ``[env]`` and ``[eval]`` sections.

Every key has a default reproducing the lava experiment; unknown keys and
malformed lines are hard errors that name the offending line.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

from . import __version__
from .training import TrainConfig, default_ballcatch_betas, default_lava_betas

ENV_KEYS = ("env", "u_max", "image_size", "sensor_noise", "texture", "init_low", "init_high")
RUN_KEYS = {"out_dir": str, "label": str, "betas": str}
EVAL_KEYS = {"checkpoint": str, "compare": str, "scenarios": str, "n_eval": int, "eval_seed": int, "bins": int}
SECTIONS = ("train", "env", "eval")


class ConfigError(ValueError):
    pass


def _train_types() -> Dict[str, Any]:
    hints = typing.get_type_hints(TrainConfig)
    out = {}
    for f in dataclasses.fields(TrainConfig):
        t = hints[f.name]
        args = [a for a in typing.get_args(t) if a is not type(None)]
        out[f.name] = (args[0], True) if args else (t, False)
    return out


TRAIN_TYPES = _train_types()


def section_of(key: str) -> str:
    if key in ENV_KEYS:
        return "env"
    if key in EVAL_KEYS:
        return "eval"
    if key in TRAIN_TYPES or key in RUN_KEYS:
        return "train"
    raise KeyError(key)


def parse_value(key: str, text: str) -> Any:
    text = text.strip()
    if key in RUN_KEYS or key in EVAL_KEYS:
        kind, optional = {**RUN_KEYS, **EVAL_KEYS}[key], False
    else:
        kind, optional = TRAIN_TYPES[key]
    if optional and text.lower() in ("", "none"):
        return None
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        if "/" in text:
            num, den = text.split("/", 1)
            return float(num) / float(den)
        return float(text)
    return text


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str, source: str = "<config>") -> Dict[str, Tuple[str, int]]:
    """Raw ``{key: (value, line)}`` pairs, checking sections and key names."""
    out: Dict[str, Tuple[str, int]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or line[1:-1].strip() not in SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section {line!r}; expected one of {', '.join(SECTIONS)}")
            section = line[1:-1].strip()
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key {key!r} appears before any section header")
        try:
            home = section_of(key)
        except KeyError:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}") from None
        if home != section:
            raise ConfigError(f"{source}:{lineno}: key {key!r} belongs in [{home}], not [{section}]")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {out[key][1]})")
        out[key] = (value.strip(), lineno)
    return out


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig.lava)
    out_dir: str = "runs/default"
    label: str = ""
    betas: List[float] = field(default_factory=default_lava_betas)
    checkpoint: str = ""
    compare: str = ""
    scenarios: str = "paper"
    n_eval: int = 1000
    eval_seed: int = 0
    bins: int = 30

    def to_text(self, header: Optional[Mapping[str, str]] = None) -> str:
        """Fully resolved config in the same format the parser reads."""
        lines = [f"# {k} = {v}" for k, v in (header or {}).items()]
        values = {f.name: getattr(self.train, f.name) for f in dataclasses.fields(TrainConfig)}
        values.update(out_dir=self.out_dir, label=self.label, betas=",".join(repr(b) for b in self.betas))
        values.update(checkpoint=self.checkpoint, compare=self.compare, scenarios=self.scenarios, n_eval=self.n_eval, eval_seed=self.eval_seed, bins=self.bins)
        for sec in SECTIONS:
            lines.append(f"[{sec}]")
            lines += [f"{k} = {format_value(v)}" for k, v in values.items() if section_of(k) == sec]
        return "\n".join(lines) + "\n"


def build(raw: Mapping[str, Tuple[str, int]], source: str = "<config>") -> RunConfig:
    typed: Dict[str, Any] = {}
    for key, (text, lineno) in raw.items():
        try:
            typed[key] = parse_value(key, text)
        except ValueError as exc:
            where = f"{source}:{lineno}" if lineno else source
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    env = typed.pop("env", "lava")
    run_fields = {k: typed.pop(k) for k in list(typed) if k in RUN_KEYS or k in EVAL_KEYS}
    try:
        train = TrainConfig.for_env(env, **typed)
        train.validate()
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    betas_text = run_fields.pop("betas", None)
    if betas_text:
        try:
            betas = [parse_value("beta", b) for b in betas_text.split(",") if b.strip()]
        except ValueError as exc:
            raise ConfigError(f"{source}: bad beta list: {exc}") from None
    else:
        betas = default_lava_betas() if env == "lava" else default_ballcatch_betas()
    return RunConfig(train=train, betas=betas, **run_fields)


def load(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Read ``path`` (if any) and apply ``overrides`` (already split ``key -> value`` strings)."""
    raw: Dict[str, Tuple[str, int]] = {}
    source = "<defaults>"
    if path:
        source = str(path)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        raw = parse_text(text, source)
    for key, value in (overrides or {}).items():
        key = key.replace("-", "_")
        try:
            section_of(key)
        except KeyError:
            raise ConfigError(f"--{key}: unknown option") from None
        raw[key] = (value, 0)
    return build(raw, source)


def manifest_header(command: str, seed: int) -> Dict[str, str]:
    return {"taskdriven_version": __version__, "command": command, "seed": str(seed)}
