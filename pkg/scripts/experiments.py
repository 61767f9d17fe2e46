"""Experiment driver for the A-CAQ studies.

Each study trains full-precision baselines (cached in memory for the run),
quantizes them and writes a report directory (CSV, JSON, SVG plots) plus a
``rows.json`` with every raw number.

    python scripts/experiments.py complexity --seeds 0 1 2
    python scripts/experiments.py target --multipliers 1 2 4 8
    python scripts/experiments.py penalty --penalties 1e-4 1e-3 1e-2
    python scripts/experiments.py qat-vs-ptq --bits 4 6

Runs are single-process and slow (about three minutes per A-CAQ run at the
default 512x512 resolution); pass ``--size 128 --fp-iters 500 --iters 300``
for a quick look.
"""
from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

from acaq.cli import accounting
from acaq.config import default_config
from acaq.metrics import avg_image_gradient, emit_report
from acaq.scene import SyntheticScene
from acaq.train import (Dataset, MetricTarget, evaluate, ptq_init, run_acaq,
                        train_full_precision)

log = logging.getLogger("experiments")


class Baselines:
    def __init__(self, size: int, overrides: dict):
        self.size = size
        self.overrides = overrides
        self.cache = {}

    def get(self, k: int, seed: int):
        key = (k, seed)
        if key not in self.cache:
            cfg = default_config(**{"scene.complexity": k, "scene.seed": seed, "seed": seed,
                                    "scene.size": self.size, **self.overrides})
            ds = Dataset.scene_2d(SyntheticScene.generate(k, seed), cfg.field_config(),
                                  cfg.image_size)
            t = time.perf_counter()
            model, fp_loss, _ = train_full_precision(ds, cfg.field_config(), cfg.fp_config())
            log.info("fp k=%d seed=%d loss=%.3g (%.0fs)", k, seed, fp_loss,
                     time.perf_counter() - t)
            self.cache[key] = (cfg, ds, model, fp_loss)
        return self.cache[key]


def quantize(base: Baselines, k: int, seed: int, mult: float = 1.0, penalty: float = 1e-3,
             fixed_bits: float | None = None) -> dict:
    cfg, ds, model, fp_loss = base.get(k, seed)
    acfg = cfg.acaq_config()
    acfg.penalty_total = penalty
    if fixed_bits is None:
        reg = ptq_init(model, ds)
    else:
        reg = ptq_init(model, ds, bits=fixed_bits)
        acfg.update_bits = False
    ptq_psnr = evaluate(model, reg, ds)
    target = MetricTarget.mdl(fp_loss) if mult == 1.0 else MetricTarget.mgl(fp_loss, mult)
    t = time.perf_counter()
    run = run_acaq(model, ds, target, acfg, registry=reg)
    row = {
        "scene": f"k{k}-s{seed}", "complexity": avg_image_gradient(ds.images),
        "mode": "MDL" if mult == 1.0 else "MGL", "target": mult, "penalty": penalty,
        "fqr": run.fqr(), "psnr": evaluate(run.model, run.registry, ds),
        "bits": run.registry.bits(), "ptq_psnr": ptq_psnr,
        "fp_psnr": evaluate(model, None, ds, "full_precision"),
        "seconds": time.perf_counter() - t,
    }
    row.update(accounting(run.model, run.registry, 2, cfg.image_size, cfg["n_samples"]))
    log.info("%s mult=%g penalty=%g -> FQR %.2f PSNR %.2f", row["scene"], mult, penalty,
             row["fqr"], row["psnr"])
    return row


def study_complexity(base, args):
    return [quantize(base, k, s) for s in args.seeds for k in args.scenes]


def study_target(base, args):
    return [quantize(base, args.scene, args.seeds[0], mult=m) for m in args.multipliers]


def study_penalty(base, args):
    return [quantize(base, args.scene, args.seeds[0], penalty=p) for p in args.penalties]


def study_qat_vs_ptq(base, args):
    rows = []
    for b in args.bits:
        r = quantize(base, args.scene, args.seeds[0], fixed_bits=b)
        r["mode"] = f"QAT{b}"
        r["gain_db"] = r["psnr"] - r["ptq_psnr"]
        rows.append(r)
    return rows


STUDIES = {"complexity": study_complexity, "target": study_target,
           "penalty": study_penalty, "qat-vs-ptq": study_qat_vs_ptq}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("study", choices=sorted(STUDIES))
    ap.add_argument("--scenes", type=int, nargs="+", default=[1, 3, 5])
    ap.add_argument("--scene", type=int, default=3, help="complexity for single-scene studies")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--multipliers", type=float, nargs="+", default=[1.0, 2.0, 4.0, 8.0])
    ap.add_argument("--penalties", type=float, nargs="+", default=[1e-4, 1e-3, 1e-2])
    ap.add_argument("--bits", type=int, nargs="+", default=[4])
    ap.add_argument("--size", type=int, default=0, help="image size (0 = default)")
    ap.add_argument("--iters", type=int, default=0, help="A-CAQ iterations (0 = default)")
    ap.add_argument("--fp-iters", type=int, default=0,
                    help="full-precision iterations (0 = default)")
    ap.add_argument("--out", default="results")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    overrides = {}
    if args.iters:
        overrides["acaq.iters"] = args.iters
    if args.fp_iters:
        overrides["fp.iters"] = args.fp_iters
    rows = STUDIES[args.study](Baselines(args.size, overrides), args)
    out = Path(args.out) / args.study
    emit_report(rows, out)
    (out / "rows.json").write_text(json.dumps(rows, indent=2, default=float) + "\n")
    for r in rows:
        print(f"{r['scene']:8s} {r['mode']:5s} target={r['target']:<4g} penalty={r['penalty']:<7g}"
              f" FQR={r['fqr']:.2f} PSNR={r['psnr']:.2f} (PTQ {r['ptq_psnr']:.2f})")
    print(f"report: {out}")


if __name__ == "__main__":
    main()
