"""Flat ``key = value`` run configuration.

Lines are ``key = value``; ``#`` starts a comment. Keys are dotted names
(``scene.complexity``, ``acaq.iters``...). Unknown keys are rejected, and the
hash of the normalized key/value set identifies a run in every output.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .field import FieldConfig
from .train import AcaqConfig, FpConfig


class ConfigError(ValueError):
    """Invalid or incomplete run configuration (CLI exit code 2)."""


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


# key -> (type, default); None default marks a required key
SCHEMA: dict[str, tuple[type | object, object]] = {
    "scene.kind": (str, None),
    "scene.complexity": (int, None),
    "scene.seed": (int, 0),
    "scene.dim": (int, 2),
    "scene.size": (int, 0),             # 0 = default for the dimension
    "scene.views": (int, 8),
    "model.levels": (int, 8),
    "model.log2_table": (int, 14),
    "model.features": (int, 2),
    "model.base_resolution": (float, 16.0),
    "model.growth": (float, 1.5),
    "model.width": (int, 64),
    "mode": (str, "mdl"),
    "target": (float, 1.0),
    "penalty_total": (float, 1e-3),
    "codebook_weight": (float, 1.0),
    "seed": (int, 0),
    "n_samples": (int, 64),
    "fp.iters": (int, 2000),
    "fp.batch": (int, 4096),
    "fp.lr": (float, 1e-2),
    "fp.anneal_frac": (float, 0.25),
    "fp.anneal_lr": (float, 1e-3),
    "fp.warmup": (int, 300),
    "acaq.iters": (int, 3000),
    "acaq.batch": (int, 0),             # 0 = 4096 pixels in 2D, 1024 rays in 3D
    "acaq.lr_q": (float, 1e-3),
    "acaq.lr_b": (float, 1e-2),
    "acaq.update_bits": (_bool, True),
    "acaq.update_q": (_bool, True),
    "acaq.bit_loss_reduction": (str, "sum"),
    "acaq.metric_reference": (str, "fixed"),
    "eval.views": (int, 4),
    "output_dir": (str, ""),
}

SCENE_KINDS = ("synthetic",)
DEFAULT_SIZE = {2: 512, 3: 64}
DEFAULT_BATCH = {2: 4096, 3: 1024}


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    # -- derived blocks -------------------------------------------------
    @property
    def dim(self) -> int:
        return int(self["scene.dim"])

    @property
    def image_size(self) -> int:
        return int(self["scene.size"]) or DEFAULT_SIZE[self.dim]

    def field_config(self) -> FieldConfig:
        return FieldConfig(dim=self.dim, levels=self["model.levels"],
                           log2_table=self["model.log2_table"], features=self["model.features"],
                           base_resolution=self["model.base_resolution"],
                           growth=self["model.growth"], width=self["model.width"],
                           seed=self["seed"])

    def architecture(self) -> dict:
        return {k: v for k, v in self.values.items() if k.startswith("model.")} | {
            "scene.dim": self.dim}

    def fp_config(self) -> FpConfig:
        return FpConfig(iters=self["fp.iters"], batch=self["fp.batch"], lr=self["fp.lr"],
                        seed=self["seed"], n_samples=self["n_samples"],
                        anneal_frac=self["fp.anneal_frac"], anneal_lr=self["fp.anneal_lr"],
                        warmup=self["fp.warmup"])

    def acaq_config(self) -> AcaqConfig:
        return AcaqConfig(iters=self["acaq.iters"],
                          batch=self["acaq.batch"] or DEFAULT_BATCH[self.dim],
                          lr_q=self["acaq.lr_q"], lr_b=self["acaq.lr_b"],
                          penalty_total=self["penalty_total"],
                          codebook_weight=self["codebook_weight"], seed=self["seed"],
                          update_bits=self["acaq.update_bits"], update_q=self["acaq.update_q"],
                          n_samples=self["n_samples"],
                          bit_loss_reduction=self["acaq.bit_loss_reduction"],
                          metric_reference=self["acaq.metric_reference"])

    # -- identity -------------------------------------------------------
    def canonical(self) -> str:
        return "\n".join(f"{k} = {_render(self.values[k])}" for k in sorted(self.values)) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def with_overrides(self, **kv) -> "RunConfig":
        raw = {k: _render(v) for k, v in self.values.items()}
        raw.update({k: _render(v) for k, v in kv.items()})
        return from_mapping(raw)

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True)


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_text(text: str) -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def from_mapping(raw: dict[str, str]) -> RunConfig:
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values: dict[str, object] = {}
    for key, (typ, default) in SCHEMA.items():
        if key not in raw:
            if default is None:
                raise ConfigError(f"missing required config key: {key}")
            values[key] = default
            continue
        try:
            values[key] = typ(raw[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw[key]!r} ({exc})") from None
    _validate(values)
    return RunConfig(values)


def _validate(v: dict) -> None:
    if v["scene.kind"] not in SCENE_KINDS:
        raise ConfigError(f"scene.kind must be one of {SCENE_KINDS}, got {v['scene.kind']!r}")
    if v["scene.dim"] not in (2, 3):
        raise ConfigError("scene.dim must be 2 or 3")
    if v["scene.complexity"] < 0:
        raise ConfigError("scene.complexity must be non-negative")
    v["mode"] = str(v["mode"]).lower()
    if v["mode"] not in ("mdl", "mgl"):
        raise ConfigError(f"mode must be mdl or mgl, got {v['mode']!r}")
    if v["mode"] == "mgl" and not v["target"] > 1.0:
        raise ConfigError("mgl mode needs a target multiplier > 1")
    if v["mode"] == "mdl" and v["target"] != 1.0:
        raise ConfigError("mdl mode uses the full-precision loss; target must be 1")
    if v["penalty_total"] < 0:
        raise ConfigError("penalty_total must be non-negative")
    if v["acaq.bit_loss_reduction"] not in ("sum", "mean"):
        raise ConfigError("acaq.bit_loss_reduction must be sum or mean")
    if v["acaq.metric_reference"] not in ("fixed", "batch"):
        raise ConfigError("acaq.metric_reference must be fixed or batch")
    for key in ("fp.iters", "acaq.iters", "n_samples", "fp.batch", "eval.views"):
        if v[key] <= 0:
            raise ConfigError(f"{key} must be positive")
    for key in ("fp.lr", "acaq.lr_q", "acaq.lr_b"):
        if not v[key] > 0:
            raise ConfigError(f"{key} must be positive")


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_mapping(parse_text(text))


def default_config(**overrides) -> RunConfig:
    raw = {"scene.kind": "synthetic", "scene.complexity": "3"}
    raw.update({k: _render(v) for k, v in overrides.items()})
    return from_mapping(raw)
