"""Hyperparameters, ablation toggles and the optimisation recipe.

Configs are frozen dataclasses. On disk they live in a flat ``key=value``
text file (one key per line, ``#`` starts a comment); keys are the field
names of :class:`TorsdConfig` and :class:`OptimConfig`. Unspecified keys
take the defaults below.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ConfigSyntaxError, ConfigValidationError

SCHEDULERS = ("one_cycle", "constant")

# one-cycle interior parameters
WARMUP_FRACTION = 0.3
DIV_FACTOR = 25.0
FINAL_DIV_FACTOR = 1e4


@dataclass(frozen=True)
class TorsdConfig:
    alpha: float = 0.01
    beta: float = 0.01
    gamma_p: float = 0.2
    gamma_n: float = 0.05
    lambda_mix: float = 0.8
    sigma: float = 0.01
    margin: float = 1.0
    embed_dim: int = 64
    kl_temperature: float = 1.0
    # squash each logit relation through tanh before differencing; the raw
    # difference is unbounded below and runs away under SGD
    bounded_logit_cal: bool = True
    enable_rn: bool = True
    enable_ac: bool = True
    enable_ld: bool = True
    enable_handcrafted_rd: bool = False
    seed: int = 0


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    epochs: int = 300
    batch_size: int = 129
    scheduler: str = "one_cycle"
    grad_clip: float = 0.0  # max global gradient norm; 0 disables clipping


@dataclass(frozen=True)
class Violation:
    key: str
    message: str

    def __str__(self):
        return f"{self.key}: {self.message}"


def best_setting_config() -> TorsdConfig:
    """The best-performing loss weights, margin and toggles (all defaults)."""
    return TorsdConfig()


def validate_config(cfg: TorsdConfig, opt: OptimConfig | None = None) -> list[Violation]:
    """Return every invariant violation; an empty list means the configs are valid."""
    report = []
    for key in ("alpha", "beta", "gamma_p", "gamma_n", "sigma", "margin"):
        if not getattr(cfg, key) >= 0:
            report.append(Violation(key, "must be >= 0"))
    if not 0.0 <= cfg.lambda_mix <= 1.0:
        report.append(Violation("lambda_mix", "must lie in [0, 1]"))
    if cfg.embed_dim < 1:
        report.append(Violation("embed_dim", "must be >= 1"))
    if not cfg.kl_temperature > 0:
        report.append(Violation("kl_temperature", "must be > 0"))
    if cfg.seed < 0:
        report.append(Violation("seed", "must be >= 0"))
    if cfg.enable_ac and not cfg.enable_rn:
        report.append(Violation("enable_ac", "requires enable_rn=true"))
    if cfg.enable_rn and cfg.enable_handcrafted_rd:
        report.append(Violation("enable_handcrafted_rd", "is mutually exclusive with enable_rn"))

    if opt is not None:
        if not opt.peak_lr > 0:
            report.append(Violation("peak_lr", "must be > 0"))
        if not 0.0 <= opt.momentum < 1.0:
            report.append(Violation("momentum", "must lie in [0, 1)"))
        if not opt.weight_decay >= 0:
            report.append(Violation("weight_decay", "must be >= 0"))
        if opt.epochs < 1:
            report.append(Violation("epochs", "must be >= 1"))
        if opt.batch_size < 1 or opt.batch_size % 3:
            report.append(Violation("batch_size", f"must be a positive multiple of 3, got {opt.batch_size}"))
        if opt.scheduler not in SCHEDULERS:
            report.append(Violation("scheduler", f"must be one of {SCHEDULERS}"))
        if not opt.grad_clip >= 0:
            report.append(Violation("grad_clip", "must be >= 0"))
    return report


def check_config(cfg: TorsdConfig, opt: OptimConfig | None = None) -> None:
    """Raise ConfigValidationError on the first violation."""
    report = validate_config(cfg, opt)
    if report:
        raise ConfigValidationError(report[0].key, report[0].message)


# ---------------------------------------------------------------------------
# key=value text format
# ---------------------------------------------------------------------------

_TORSD_KEYS = {f.name: f.type for f in fields(TorsdConfig)}
_OPTIM_KEYS = {f.name: f.type for f in fields(OptimConfig)}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(key: str, ftype: str, text: str):
    if ftype == "bool":
        return _parse_bool(text)
    if ftype == "int":
        return int(text)
    if ftype == "float":
        return float(text)
    return text.strip()


def parse_assignments(lines: Iterable[str], source: str = "<string>") -> dict[str, str]:
    """Split ``key=value`` lines into a dict, dropping blanks and comments."""
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigSyntaxError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigSyntaxError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigSyntaxError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def configs_from_mapping(
    values: Mapping[str, str],
    base: tuple[TorsdConfig, OptimConfig] | None = None,
    source: str = "<mapping>",
) -> tuple[TorsdConfig, OptimConfig]:
    cfg, opt = base if base is not None else (TorsdConfig(), OptimConfig())
    torsd_updates, optim_updates = {}, {}
    for key, text in values.items():
        if key in _TORSD_KEYS:
            target, ftype = torsd_updates, _TORSD_KEYS[key]
        elif key in _OPTIM_KEYS:
            target, ftype = optim_updates, _OPTIM_KEYS[key]
        else:
            raise ConfigValidationError(key, "unknown config key")
        try:
            target[key] = _convert(key, ftype, text)
        except ValueError as exc:
            raise ConfigSyntaxError(f"{source}: bad value for {key}: {exc}") from None
    cfg = dataclasses.replace(cfg, **torsd_updates)
    opt = dataclasses.replace(opt, **optim_updates)
    check_config(cfg, opt)
    return cfg, opt


def loads_config(text: str, source: str = "<string>") -> tuple[TorsdConfig, OptimConfig]:
    return configs_from_mapping(parse_assignments(text.splitlines(), source), source=source)


def load_config(path) -> tuple[TorsdConfig, OptimConfig]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigSyntaxError(f"{path}: not UTF-8 ({exc})") from None
    return loads_config(text, source=str(path))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps_config(cfg: TorsdConfig, opt: OptimConfig | None = None) -> str:
    lines = [f"{f.name}={_format(getattr(cfg, f.name))}" for f in fields(cfg)]
    if opt is not None:
        lines += [f"{f.name}={_format(getattr(opt, f.name))}" for f in fields(opt)]
    return "\n".join(lines) + "\n"


def save_config(path, cfg: TorsdConfig, opt: OptimConfig | None = None) -> None:
    Path(path).write_text(dumps_config(cfg, opt), encoding="utf-8")


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------


def package_version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:
        return "0.1.0"


@dataclass
class RunManifest:
    """Everything needed to rebuild a model from a checkpoint directory."""

    cfg: TorsdConfig
    opt: OptimConfig
    dataset: str = ""
    backbone: str = "toy_cnn"
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    norm_mean: tuple[float, ...] = ()
    norm_std: tuple[float, ...] = ()
    started: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))
    version: str = field(default_factory=package_version)
    stripped: bool = False

    def to_text(self) -> str:
        lines = ["# run manifest"]
        lines += [f"config.{line}" for line in dumps_config(self.cfg).splitlines()]
        lines += [f"optim.{f.name}={_format(getattr(self.opt, f.name))}" for f in fields(self.opt)]
        lines += [
            f"dataset={self.dataset}",
            f"backbone={self.backbone}",
            f"num_classes={self.num_classes}",
            "input_shape=" + ",".join(str(v) for v in self.input_shape),
            "norm_mean=" + ",".join(repr(float(v)) for v in self.norm_mean),
            "norm_std=" + ",".join(repr(float(v)) for v in self.norm_std),
            f"started={self.started}",
            f"version={self.version}",
            f"stripped={_format(self.stripped)}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "manifest") -> "RunManifest":
        # '#' may not appear in values here, so the generic splitter is safe
        values = parse_assignments(text.splitlines(), source)
        cfg_values = {k[len("config."):]: v for k, v in values.items() if k.startswith("config.")}
        opt_values = {k[len("optim."):]: v for k, v in values.items() if k.startswith("optim.")}
        cfg, opt = configs_from_mapping({**cfg_values, **opt_values}, source=source)

        def floats(key):
            raw = values.get(key, "")
            return tuple(float(v) for v in raw.split(",") if v)

        try:
            return cls(
                cfg=cfg,
                opt=opt,
                dataset=values.get("dataset", ""),
                backbone=values.get("backbone", "toy_cnn"),
                num_classes=int(values["num_classes"]),
                input_shape=tuple(int(v) for v in values["input_shape"].split(",")),
                norm_mean=floats("norm_mean"),
                norm_std=floats("norm_std"),
                started=values.get("started", ""),
                version=values.get("version", ""),
                stripped=_parse_bool(values.get("stripped", "false")),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigSyntaxError(f"{source}: malformed manifest ({exc})") from None
