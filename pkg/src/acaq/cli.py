"""Command line: train, acaq, eval, export-int, check-int, sweep, report.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime failure.
Outputs go to ``<root>/<command>-<config hash>/`` (plus the input checkpoint's
digest for acaq and eval) where the root is
``$ACAQ_OUTPUT_ROOT``, else the config's ``output_dir``, else ``./runs``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .field import build_registry
from .intinfer import ContainerError, consistency_check, export_integer_model, import_integer_model
from .metrics import (avg_image_gradient, bitops, emit_report, fqr, mac_workload,
                      storage_bytes)
from .scene import SyntheticScene
from .train import (Dataset, MetricTarget, TrainingDiverged, evaluate, held_out_views, ptq_init,
                    run_acaq, train_full_precision)

log = logging.getLogger("acaq")
ENV_OUTPUT_ROOT = "ACAQ_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class RuntimeFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def output_root(cfg: RunConfig | None) -> Path:
    env = os.environ.get(ENV_OUTPUT_ROOT)
    if env:
        return Path(env)
    if cfg is not None and cfg["output_dir"]:
        return Path(cfg["output_dir"])
    return Path("runs")


def file_digest(path) -> str:
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:8]
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None


def run_dir(cfg: RunConfig, command: str, checkpoint=None) -> Path:
    """``<root>/<command>-<config hash>[-<checkpoint digest>]``."""
    name = f"{command}-{cfg.hash()}"
    if checkpoint is not None:
        name += f"-{file_digest(checkpoint)}"
    d = output_root(cfg) / name
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def build_scene(cfg: RunConfig) -> SyntheticScene:
    return SyntheticScene.generate(cfg["scene.complexity"], cfg["scene.seed"])


def build_dataset(cfg: RunConfig, scene: SyntheticScene | None = None) -> Dataset:
    scene = scene or build_scene(cfg)
    fcfg = cfg.field_config()
    if cfg.dim == 2:
        return Dataset.scene_2d(scene, fcfg, size=cfg.image_size)
    return Dataset.scene_3d(scene, fcfg, views=cfg["scene.views"], size=cfg.image_size)


def scene_record(cfg: RunConfig) -> dict:
    return {"kind": cfg["scene.kind"], "complexity": cfg["scene.complexity"],
            "seed": cfg["scene.seed"], "dim": cfg.dim, "size": cfg.image_size}


def check_architecture(ckpt: Checkpoint, cfg: RunConfig) -> None:
    want, have = cfg.field_config(), ckpt.model.cfg
    keys = ("dim", "levels", "log2_table", "features", "base_resolution", "growth", "width")
    diff = [k for k in keys if getattr(want, k) != getattr(have, k)]
    if diff:
        raise ConfigError("checkpoint architecture does not match the config: "
                          + ", ".join(f"{k} ({getattr(have, k)} != {getattr(want, k)})"
                                      for k in diff))


def write_telemetry(path: Path, rows: list[dict], m: int) -> None:
    cols = ["iter", "loss_nerf", "loss_bit", "fqr"] + [f"b_{i}" for i in range(1, m + 1)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([r["iter"]] + [f"{float(r[c]):.9g}" for c in cols[1:]])


def accounting(model, registry, dim: int, size: int, n_samples: int) -> dict:
    samples = size * size * (n_samples if dim == 3 else 1)
    work = mac_workload(registry, model, samples)
    ops = bitops(registry, work)
    return {"fqr": fqr(registry.bits()), "bitops": ops, "tera_bitops": ops / 1e12,
            "storage_bytes": storage_bytes(registry), "bits": registry.bits(),
            "components": registry.names(), "bitops_samples": samples}


def full_precision_registry(model):
    reg = build_registry(model)
    reg.set_bits(32)
    return reg


# ---------------------------------------------------------------------------
# pipeline steps (also used by sweeps)
# ---------------------------------------------------------------------------

def do_train(cfg: RunConfig, out: Path) -> Path:
    ds = build_dataset(cfg)
    try:
        model, fp_loss, history = train_full_precision(ds, cfg.field_config(), cfg.fp_config())
    except TrainingDiverged as exc:
        write_json(out / "diverged.json", {"config_hash": cfg.hash(), "error": str(exc),
                                           "telemetry": exc.telemetry[-100:]})
        raise RuntimeFailure(str(exc)) from exc
    ckpt_path = out / "fp.npz"
    meta = {"kind": "full_precision", "config_hash": cfg.hash(), "fp_loss": fp_loss,
            "scene": scene_record(cfg)}
    save_checkpoint(Checkpoint(model, None, meta), ckpt_path)
    write_json(out / "fp_loss.json", {"config_hash": cfg.hash(), "fp_loss": fp_loss,
                                      "iters": cfg["fp.iters"], "scene": scene_record(cfg),
                                      "final_batch_loss": history[-1]})
    return ckpt_path


def do_acaq(cfg: RunConfig, ckpt_path: Path, out: Path) -> Path:
    try:
        ckpt = load_checkpoint(ckpt_path)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from exc
    check_architecture(ckpt, cfg)
    fp_loss = ckpt.meta.get("fp_loss")
    if fp_loss is None:
        raise ConfigError(f"{ckpt_path} carries no full-precision loss record")
    target = (MetricTarget.mdl(fp_loss) if cfg["mode"] == "mdl"
              else MetricTarget.mgl(fp_loss, cfg["target"]))
    ds = build_dataset(cfg)
    registry = ptq_init(ckpt.model, ds)
    init_fqr = fqr(registry.bits())
    run = run_acaq(ckpt.model, ds, target, cfg.acaq_config(), registry=registry)
    if run.incidents:
        log.warning("%d skipped steps", len(run.incidents))
    qpath = out / "acaq.npz"
    meta = {"kind": "quantized", "config_hash": cfg.hash(), "fp_loss": fp_loss,
            "target": {"mode": target.mode, "value": target.value},
            "scene": scene_record(cfg), "init_fqr": init_fqr}
    save_checkpoint(Checkpoint(run.model, run.registry, meta), qpath)
    write_telemetry(out / "telemetry.csv", run.telemetry, run.registry.M)
    write_json(out / "telemetry.json", {
        "config_hash": cfg.hash(), "components": run.registry.names(),
        "columns": "b_i is the soft bitwidth of components[i-1]; loss_nerf is the current "
                   "batch mean squared error",
        "init_fqr": init_fqr, "final_fqr": run.fqr(), "final_bits": run.registry.bits(),
        "incidents": run.incidents})
    return qpath


def do_eval(cfg: RunConfig, ckpt_path: Path, out: Path) -> dict:
    ckpt = load_checkpoint(ckpt_path)
    check_architecture(ckpt, cfg)
    scene = build_scene(cfg)
    ds = build_dataset(cfg, scene)
    mode = "fake_quantized" if ckpt.quantized else "full_precision"
    views = None if cfg.dim == 2 else held_out_views(scene, cfg["eval.views"], cfg.image_size)
    value = evaluate(ckpt.model, ckpt.registry, ds, mode, views)
    reg = ckpt.registry if ckpt.quantized else full_precision_registry(ckpt.model)
    target = ckpt.meta.get("target", {})
    record = {
        "config_hash": cfg.hash(), "checkpoint": str(ckpt_path),
        "scene": f"k{cfg['scene.complexity']}-s{cfg['scene.seed']}",
        "complexity": avg_image_gradient(ds.images), "mode": target.get("mode", "FP"),
        "target": (target.get("value", 0.0) / ckpt.meta["fp_loss"]) if target else 0.0,
        "penalty": cfg["penalty_total"] if ckpt.quantized else 0.0,
        "psnr": value, "quantized": ckpt.quantized,
    }
    record.update(accounting(ckpt.model, reg, cfg.dim, cfg.image_size, cfg["n_samples"]))
    write_json(out / "eval.json", record)
    return record


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
        if args.mode == "mdl" and getattr(args, "target", None) is None:
            overrides["target"] = "1.0"
    if getattr(args, "target", None) is not None:
        overrides["target"] = args.target
    if getattr(args, "penalty_total", None) is not None:
        overrides["penalty_total"] = args.penalty_total
    return cfg.with_overrides(**overrides) if overrides else cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    out = run_dir(cfg, "train")
    path = do_train(cfg, out)
    print(json.dumps({"checkpoint": str(path), "fp_loss_json": str(out / "fp_loss.json"),
                      "config_hash": cfg.hash()}))
    return EXIT_OK


def cmd_acaq(args) -> int:
    cfg = _config(args)
    out = run_dir(cfg, "acaq", args.checkpoint)
    path = do_acaq(cfg, Path(args.checkpoint), out)
    summary = json.loads((out / "telemetry.json").read_text())
    print(json.dumps({"checkpoint": str(path), "telemetry": str(out / "telemetry.csv"),
                      "final_fqr": summary["final_fqr"], "config_hash": cfg.hash()}))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = run_dir(cfg, "eval", args.checkpoint)
    rec = do_eval(cfg, Path(args.checkpoint), out)
    print(json.dumps({k: rec[k] for k in ("psnr", "fqr", "bitops", "storage_bytes")}))
    return EXIT_OK


def cmd_export_int(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if not ckpt.quantized:
        raise ConfigError("export-int needs a quantized checkpoint (run acaq first)")
    path = Path(args.output)
    im = export_integer_model(ckpt.model, ckpt.registry, path)
    size = path.stat().st_size
    info = {"container": str(path), "bytes": size, "payload_bytes": im.payload_bytes(),
            "storage_bytes": storage_bytes(ckpt.registry),
            "config_hash": ckpt.meta.get("config_hash")}
    write_json(path.with_suffix(path.suffix + ".json"), info)
    print(json.dumps(info))
    return EXIT_OK


def cmd_check_int(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if not ckpt.quantized:
        raise ConfigError("check-int needs a quantized checkpoint")
    try:
        im = import_integer_model(args.container)
    except ContainerError as exc:
        raise RuntimeFailure(f"container rejected: {exc}") from exc
    if im.names() != ckpt.registry.names() or im.cfg != _same_seed(ckpt.model.cfg, im.cfg):
        print(json.dumps({"passed": False, "reason": "container does not match checkpoint"}))
        return EXIT_RUNTIME
    rep = consistency_check(ckpt.model, im, args.probes, ckpt.registry)
    print(json.dumps({"passed": rep.passed, "max_deviation": rep.max_deviation,
                      "offending_component": rep.offending_component,
                      "probes": rep.probes, "container_bytes": Path(args.container).stat().st_size}))
    return EXIT_OK if rep.passed else EXIT_RUNTIME


def _same_seed(a, b):
    from dataclasses import replace
    return replace(a, seed=b.seed)


def _sweep_one(cfg_text_items: dict) -> dict:
    """Train (cached by config hash), quantize and evaluate one sweep point."""
    from .config import from_mapping
    cfg = from_mapping(cfg_text_items)
    fp_cfg = cfg.with_overrides(mode="mdl", target=1.0, penalty_total=1e-3)
    fp_dir = run_dir(fp_cfg, "train")
    ckpt = fp_dir / "fp.npz"
    if not ckpt.exists():
        do_train(fp_cfg, fp_dir)
    qpath = do_acaq(cfg, ckpt, run_dir(cfg, "acaq", ckpt))
    return do_eval(cfg, qpath, run_dir(cfg, "eval", qpath))


def cmd_sweep(args) -> int:
    base = _config(args)
    if len(args.values) < 2:
        raise ConfigError("a sweep needs at least two values")
    points = []
    for v in args.values:
        if args.axis == "complexity":
            points.append(base.with_overrides(**{"scene.complexity": int(v)}))
        elif args.axis == "target":
            t = float(v)
            points.append(base.with_overrides(mode="mdl" if t == 1.0 else "mgl", target=t))
        else:
            points.append(base.with_overrides(penalty_total=float(v)))
    items = [{k: _raw(val) for k, val in p.values.items()} for p in points]
    records, failures = [], []
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_sweep_one, it) for it in items]
            outcomes = []
            for f in futures:
                try:
                    outcomes.append(f.result())
                except Exception as exc:  # noqa: BLE001 - recorded, sweep continues
                    outcomes.append(exc)
    else:
        outcomes = []
        for it in items:
            try:
                outcomes.append(_sweep_one(it))
            except Exception as exc:  # noqa: BLE001
                outcomes.append(exc)
    for v, res in zip(args.values, outcomes):
        if isinstance(res, Exception):
            failures.append({"value": v, "error": f"{type(res).__name__}: {res}"})
            log.error("sweep point %s failed: %s", v, res)
        else:
            records.append(res)
    out = run_dir(base, f"sweep-{args.axis}")
    if records:
        emit_report(records, out)
    write_json(out / "sweep.json", {"config_hash": base.hash(), "axis": args.axis,
                                    "values": args.values, "failures": failures,
                                    "completed": len(records)})
    print(json.dumps({"report_dir": str(out), "completed": len(records),
                      "failed": len(failures)}))
    return EXIT_OK if not failures else EXIT_RUNTIME


def _raw(v) -> str:
    from .config import _render
    return _render(v)


def cmd_report(args) -> int:
    records = []
    for p in args.inputs:
        p = Path(p)
        files = sorted(p.rglob("eval.json")) if p.is_dir() else [p]
        for f in files:
            records.append(json.loads(f.read_text()))
    if not records:
        raise ConfigError("no eval.json records found in the given inputs")
    out = Path(args.out) if args.out else output_root(None) / "report"
    paths = emit_report(records, out)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="acaq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", required=True, help="flat key = value run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    sp = sub.add_parser("train", help="full-precision training")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("acaq", help="PTQ init + adversarial bitwidth learning")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=("mdl", "mgl"))
    sp.add_argument("--target", type=float, help="MGL multiplier of the full-precision loss")
    sp.add_argument("--penalty-total", type=float, help="sum of bit penalties (default 1e-3)")
    sp.set_defaults(func=cmd_acaq)

    sp = sub.add_parser("eval", help="PSNR, FQR, BitOps and storage of a checkpoint")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export-int", help="write the integer container")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--output", required=True)
    sp.set_defaults(func=cmd_export_int)

    sp = sub.add_parser("check-int", help="integer path vs fake-quantized path")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--container", required=True)
    sp.add_argument("--probes", type=int, default=100)
    sp.set_defaults(func=cmd_check_int)

    sp = sub.add_parser("sweep", help="run the pipeline over one axis and report")
    with_config(sp)
    sp.add_argument("--axis", required=True, choices=("complexity", "target", "penalty"))
    sp.add_argument("--values", required=True, nargs="+")
    sp.add_argument("--jobs", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="aggregate eval.json records")
    sp.add_argument("inputs", nargs="+", help="eval.json files or directories to search")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RuntimeFailure, ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
