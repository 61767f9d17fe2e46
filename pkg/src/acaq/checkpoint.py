"""Checkpoints: model parameters plus (optionally) quantizer states, in one .npz."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .field import Component, ComponentRegistry, FieldConfig, FieldModel
from .quant import QuantizerState


@dataclass
class Checkpoint:
    model: FieldModel
    registry: ComponentRegistry | None = None
    meta: dict = field(default_factory=dict)

    @property
    def quantized(self) -> bool:
        return self.registry is not None


def registry_to_list(registry: ComponentRegistry) -> list[dict]:
    return [{"name": c.name, "role": c.role, "param": c.param, "count": c.count,
             "scheme": c.state.scheme.value, "b": c.state.b, "r_v": c.state.r_v,
             "v_max": c.state.v_max, "frozen_exempt": c.state.frozen_exempt}
            for c in registry]


def registry_from_list(items: list[dict]) -> ComponentRegistry:
    return ComponentRegistry([
        Component(d["name"], d["role"], d["param"],
                  QuantizerState(d["scheme"], d["b"], d["r_v"], d["v_max"], d["frozen_exempt"]),
                  d["count"]) for d in items])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = dict(ckpt.meta)
    meta["field_config"] = asdict(ckpt.model.cfg)
    meta["registry"] = registry_to_list(ckpt.registry) if ckpt.registry else None
    arrays = {f"param/{k}": v for k, v in ckpt.model.params.items()}
    path = Path(path)
    try:
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8),
                     **arrays)
    except OSError as exc:
        raise ValueError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            params = {k[len("param/"):]: data[k].copy() for k in data.files
                      if k.startswith("param/")}
    except (OSError, ValueError, KeyError) as exc:
        raise ValueError(f"not a valid checkpoint: {path} ({exc})") from exc
    model = FieldModel(FieldConfig(**meta.pop("field_config")), params)
    reg_items = meta.pop("registry", None)
    registry = registry_from_list(reg_items) if reg_items else None
    return Checkpoint(model, registry, meta)
