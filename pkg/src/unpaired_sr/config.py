"""Run configuration: a TOML document with sections ``[data]``, ``[stage1]``,
``[stage2]``, ``[networks]``, ``[weights]`` and ``[run]``.

Every value the training recipe specifies is pre-filled; unknown keys and
type errors are rejected with the offending key and line number.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError
from .losses import LossWeights
from .networks import GeneratorSpec, PatchDiscSpec, SRNetSpec
from .stage1 import Stage1Config
from .stage2 import Stage2Config

LOG_LEVELS = ("quiet", "info", "debug")

# key -> (type, default); total_steps has no default on purpose
_SCHEMA: dict[str, dict[str, tuple[type | tuple, Any]]] = {
    "data": {
        "root": (str, None),
        "lr_dir": (str, None),
        "hr_dir": (str, None),
        "scale": (int, 4),
        "split": (str, "basic"),
        "n_prime": (int, 0),
    },
    "stage1": {
        "total_steps": (int, None),
        "batch": (int, 8),
        "patch_lr": (int, 64),
        "lr0": (float, 1e-4),
        "halve_every": (int, 1_600_000),
        "d_steps_per_g_step": (int, 1),
        "ablation": (str, "full"),
        "history_pool": (int, 0),
        "augment": (bool, False),
        "log_every": (int, 100),
        "checkpoint_every": (int, 0),
    },
    "stage2": {
        "total_steps": (int, None),
        "batch": (int, 8),
        "patch_lr": (int, 64),
        "lr0": (float, 1e-4),
        "halve_every": (int, 1_600_000),
        "d_steps_per_g_step": (int, 1),
        "ablation": (str, "full"),
        "augment": (bool, False),
        "log_every": (int, 100),
        "checkpoint_every": (int, 0),
    },
    "networks": {
        "sr_preset": (str, "default"),
        "g_blocks": (int, 8),
        "g_channels": (int, 64),
        "sr_groups": (int, 5),
        "sr_blocks": (int, 10),
        "sr_channels": (int, 64),
        "sr_reduction": (int, 16),
        "sr_tap": ((int, str), 1),
        "d_base": (int, 64),
        "d_down": (int, 3),
        "d_norm": (bool, True),
        "d_lr_base": (int, None),
        "d_lr_down": (int, None),
        "d_feat_base": (int, None),
        "d_feat_down": (int, None),
    },
    "weights": {name: (float, getattr(LossWeights(), name))
                for name in ("w1", "w2", "w3", "lambda1", "lambda2", "lambda3", "lambda4")},
    "run": {
        "seed": (int, 0),
        "out_dir": (str, "runs/default"),
        "log": (str, "info"),
    },
}


@dataclass(frozen=True)
class DataConfig:
    lr_dir: Path | None
    hr_dir: Path | None
    scale: int
    split: str
    n_prime: int


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    stage1: Stage1Config | None
    stage2: Stage2Config | None
    seed: int
    out_dir: Path
    log: str
    raw: dict

    def require_stage1(self) -> Stage1Config:
        if self.stage1 is None:
            raise ConfigError("stage1.total_steps is required for stage-one training")
        return self.stage1

    def require_stage2(self) -> Stage2Config:
        if self.stage2 is None:
            raise ConfigError("stage2.total_steps is required for stage-two training")
        return self.stage2


def _key_lines(text: str) -> dict[str, int]:
    lines: dict[str, int] = {}
    section = ""
    for n, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"^\[([^\]]+)\]", stripped)
        if m:
            section = m.group(1).strip()
            lines.setdefault(section, n)
            continue
        m = re.match(r"^([A-Za-z0-9_\-\"']+)\s*=", stripped)
        if m:
            lines[f"{section}.{m.group(1).strip(chr(34) + chr(39))}"] = n
    return lines


def _where(key: str, lines: dict[str, int]) -> str:
    return f" (line {lines[key]})" if key in lines else ""


def _coerce(key: str, value, typ, lines) -> Any:
    types = typ if isinstance(typ, tuple) else (typ,)
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if bool not in types and isinstance(value, bool):
        raise ConfigError(f"{key}{_where(key, lines)}: expected {typ}, got a boolean")
    if not isinstance(value, types):
        raise ConfigError(f"{key}{_where(key, lines)}: expected "
                          f"{'/'.join(t.__name__ for t in types)}, got {type(value).__name__}")
    return value


def _parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key, value


def _resolve(doc: dict, lines: dict[str, int]) -> dict[str, dict[str, Any]]:
    out: dict[str, dict[str, Any]] = {}
    for section, body in doc.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]{_where(section, lines)}")
        if not isinstance(body, dict):
            raise ConfigError(f"{section}{_where(section, lines)}: expected a table")
        for key in body:
            if key not in _SCHEMA[section]:
                full = f"{section}.{key}"
                raise ConfigError(f"unknown key {full}{_where(full, lines)}")
    for section, keys in _SCHEMA.items():
        body = doc.get(section, {})
        out[section] = {}
        for key, (typ, default) in keys.items():
            if key in body:
                out[section][key] = _coerce(f"{section}.{key}", body[key], typ, lines)
            else:
                out[section][key] = default
    return out


def _pick(section: dict, key: str, fallback: str):
    return section[fallback] if section[key] is None else section[key]


def _build(values: dict[str, dict[str, Any]], lines: dict[str, int]) -> RunConfig:
    data, net, run = values["data"], values["networks"], values["run"]
    seed = run["seed"]
    if run["log"] not in LOG_LEVELS:
        raise ConfigError(f"run.log{_where('run.log', lines)} must be one of {LOG_LEVELS}")
    root = Path(data["root"]) if data["root"] else None
    lr_dir = Path(data["lr_dir"]) if data["lr_dir"] else (root / "lr" if root else None)
    hr_dir = Path(data["hr_dir"]) if data["hr_dir"] else (root / "hr" if root else None)
    if data["split"] not in ("basic", "non_overlapping"):
        raise ConfigError(f"data.split{_where('data.split', lines)} must be "
                          "'basic' or 'non_overlapping'")
    if data["split"] == "non_overlapping" and data["n_prime"] < 1:
        raise ConfigError("data.n_prime must be positive for the non-overlapping split")
    dcfg = DataConfig(lr_dir, hr_dir, data["scale"], data["split"], data["n_prime"])

    try:
        weights = LossWeights(**values["weights"])
        gspec = GeneratorSpec(n_res_blocks=net["g_blocks"], channels=net["g_channels"])
        if net["sr_preset"] == "rcan":
            sr = SRNetSpec.rcan(scale=data["scale"])
        elif net["sr_preset"] == "default":
            sr = SRNetSpec(n_groups=net["sr_groups"], n_blocks_per_group=net["sr_blocks"],
                           channels=net["sr_channels"], ca_reduction=net["sr_reduction"],
                           scale=data["scale"], tap_point=net["sr_tap"])
        else:
            raise ConfigError("networks.sr_preset must be 'default' or 'rcan'")
        if sr.ca_reduction > sr.channels or sr.channels // sr.ca_reduction < 1:
            raise ConfigError("networks.sr_reduction exceeds networks.sr_channels")
        d_image = PatchDiscSpec(base_channels=net["d_base"], n_down=net["d_down"],
                                norm=net["d_norm"])
        d_lr = PatchDiscSpec(base_channels=_pick(net, "d_lr_base", "d_base"),
                             n_down=_pick(net, "d_lr_down", "d_down"), norm=net["d_norm"])
        d_feat = PatchDiscSpec(base_channels=_pick(net, "d_feat_base", "d_base"),
                               n_down=_pick(net, "d_feat_down", "d_down"),
                               input_kind="feature", in_channels=sr.channels,
                               norm=net["d_norm"])
        s1 = values["stage1"]
        stage1 = None
        if s1["total_steps"] is not None:
            stage1 = Stage1Config(weights=weights, seed=seed, generator=gspec,
                                  discriminator=d_lr, out_dir=str(run["out_dir"]),
                                  **s1)
        s2 = values["stage2"]
        stage2 = None
        if s2["total_steps"] is not None:
            stage2 = Stage2Config(weights=weights, seed=seed, sr=sr, d_image=d_image,
                                  d_feature=d_feat, out_dir=str(run["out_dir"]), **s2)
    except ConfigError:
        raise
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err)) from err
    return RunConfig(dcfg, stage1, stage2, seed, Path(run["out_dir"]), run["log"], values)


def parse_config(path=None, overrides=(), text: str | None = None) -> RunConfig:
    """Read and fully validate a run configuration.

    ``overrides`` are ``section.key=value`` strings applied on top of the file.
    """
    if text is None:
        if path is None:
            text = ""
        else:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            text = path.read_text()
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"syntax error: {err}") from err
    lines = _key_lines(text)
    for item in overrides:
        key, value = _parse_override(item)
        if "." not in key:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, name = key.split(".", 1)
        doc.setdefault(section, {})[name] = value
    return _build(_resolve(doc, lines), lines)


def _weights(d: dict) -> LossWeights:
    return LossWeights(**d)


def stage1_from_dict(d: dict) -> Stage1Config:
    """Rebuild a stage-one config from its checkpoint-header form."""
    d = dict(d)
    d["weights"] = _weights(d["weights"])
    d["generator"] = GeneratorSpec(**d["generator"])
    d["discriminator"] = PatchDiscSpec(**d["discriminator"])
    return Stage1Config(**d)


def stage2_from_dict(d: dict) -> Stage2Config:
    d = dict(d)
    d["weights"] = _weights(d["weights"])
    d["sr"] = SRNetSpec(**d["sr"])
    d["d_image"] = PatchDiscSpec(**d["d_image"])
    d["d_feature"] = PatchDiscSpec(**d["d_feature"])
    return Stage2Config(**d)


def schema() -> dict[str, dict[str, tuple]]:
    """Section -> key -> (type, default); used to document the grammar."""
    return _SCHEMA
