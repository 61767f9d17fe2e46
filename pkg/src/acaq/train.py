"""Full-precision training, PTQ initialization and adversarial bitwidth learning.

The A-CAQ loop alternates two disjoint updates per iteration from the same
fake-quantized forward pass: model weights plus quantizer ranges/offsets
follow the reconstruction loss, soft bitwidths follow the bit loss.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .engine import AdamState, Tape, adam_update
from .field import (ComponentRegistry, FieldConfig, FieldModel, RangeRecorder, build_registry,
                    encode_plan, field_forward, EncodePlan)
from .metrics import fqr, psnr
from .quant import MIN_RANGE, QuantScheme, clamp_soft_bitwidth, ptq_calibrate
from .scene import (Camera, Rays, SyntheticScene, generate_rays, oracle_render_rays,
                    pixel_coords, render_image, render_rays, target_image_2d)

log = logging.getLogger(__name__)

PTQ_BITS = 8
EXP_PTQ_BITS = 32


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, telemetry: list[dict] | None = None):
        super().__init__(msg)
        self.telemetry = telemetry or []


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    colors: np.ndarray
    plan: EncodePlan | None = None          # 2D
    rays: Rays | None = None                 # 3D

    def __len__(self) -> int:
        return len(self.colors)


class Dataset:
    """Pixels of one image (2D) or rays of several oracle views (3D)."""

    def __init__(self, dim: int, colors: np.ndarray, *, plan: EncodePlan | None = None,
                 rays: Rays | None = None, images: list[np.ndarray] | None = None,
                 cameras: list[Camera] | None = None, field_cfg: FieldConfig | None = None):
        if len(colors) == 0:
            raise ValueError("dataset is empty")
        self.dim = dim
        self.colors = colors.astype(np.float32)
        self.plan = plan
        self.rays = rays
        self.images = images or []
        self.cameras = cameras or []
        self.field_cfg = field_cfg

    def __len__(self) -> int:
        return len(self.colors)

    @classmethod
    def image_2d(cls, image: np.ndarray, cfg: FieldConfig) -> "Dataset":
        h, w, _ = image.shape
        plan = encode_plan(pixel_coords(h, w), cfg)
        return cls(2, image.reshape(-1, 3), plan=plan, images=[image], field_cfg=cfg)

    @classmethod
    def scene_2d(cls, scene: SyntheticScene, cfg: FieldConfig, size: int = 128) -> "Dataset":
        return cls.image_2d(target_image_2d(scene, size), cfg)

    @classmethod
    def scene_3d(cls, scene: SyntheticScene, cfg: FieldConfig, views: int = 8,
                 size: int = 64) -> "Dataset":
        cams = [Camera.orbit(2 * math.pi * i / views, elevation=0.35 * (-1) ** i,
                             width=size, height=size) for i in range(views)]
        all_rays, images = [], []
        for cam in cams:
            r = generate_rays(cam)
            images.append(oracle_render_rays(scene, r).reshape(size, size, 3))
            all_rays.append(r)
        rays = Rays(*(np.concatenate([getattr(r, f) for r in all_rays])
                      for f in ("origins", "dirs", "near", "far")))
        colors = np.concatenate([im.reshape(-1, 3) for im in images])
        return cls(3, colors, rays=rays, images=images, cameras=cams, field_cfg=cfg)

    def batch(self, rows: np.ndarray) -> Batch:
        if self.dim == 2:
            return Batch(self.colors[rows], plan=self.plan.take(rows))
        r = self.rays
        return Batch(self.colors[rows], rays=Rays(r.origins[rows], r.dirs[rows],
                                                  r.near[rows], r.far[rows]))

    def sample(self, rng: np.random.Generator, size: int) -> Batch:
        size = min(size, len(self))
        return self.batch(rng.integers(0, len(self), size))

    def chunks(self, size: int):
        for start in range(0, len(self), size):
            yield self.batch(np.arange(start, min(start + size, len(self))))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def predict(batch: Batch, model: FieldModel, registry: ComponentRegistry | None,
            mode: str, tape: Tape, n_samples: int = 64,
            rng: np.random.Generator | None = None, hook=None):
    if batch.plan is not None:
        return field_forward(model, batch.plan, None, registry, mode, tape, hook)[1]
    return render_rays(model, registry, batch.rays, mode, n_samples, rng, tape, hook)


def nerf_loss(batch: Batch, model: FieldModel, registry: ComponentRegistry | None,
              mode: str = "fake_quantized", tape: Tape | None = None,
              rng: np.random.Generator | None = None, n_samples: int = 64):
    """Batch-mean squared color error. Returns the loss Var (on ``tape``)."""
    if tape is None:
        tape = Tape(grad=False)
    pred = predict(batch, model, registry, mode, tape, n_samples, rng)
    return tape.mse(pred, batch.colors.astype(tape.dtype))


def dataset_loss(dataset: Dataset, model: FieldModel, registry: ComponentRegistry | None,
                 mode: str, chunk: int = 8192, n_samples: int = 64) -> float:
    """Mean squared error over the whole dataset (deterministic ray samples)."""
    total = 0.0
    for batch in dataset.chunks(chunk):
        loss = nerf_loss(batch, model, registry, mode, Tape(grad=False), None, n_samples)
        total += float(loss.value) * len(batch)
    return total / len(dataset)


def bit_loss(loss_nerf: float, metric: float, bits, penalties) -> float:
    bits = list(bits)
    penalties = list(penalties)
    if len(bits) != len(penalties):
        raise ValueError("bits and penalties must align")
    return math.sqrt(abs(loss_nerf - metric)) + sum(e * b for e, b in zip(penalties, bits))


def sqrt_term_factor(loss_nerf: float, metric: float) -> float:
    """d sqrt(|L - L_metric|) / dL, defined as 0 at the cusp."""
    diff = loss_nerf - metric
    if diff == 0:
        return 0.0
    return math.copysign(1.0, diff) / (2.0 * math.sqrt(abs(diff)))


def bit_loss_backward(loss_nerf: float, metric: float, grad_nerf_b, penalties) -> np.ndarray:
    """Gradient of the bit loss w.r.t. each soft bitwidth (dB/db = 1 through rounding)."""
    return sqrt_term_factor(loss_nerf, metric) * np.asarray(grad_nerf_b, dtype=np.float64) \
        + np.asarray(penalties, dtype=np.float64)


# ---------------------------------------------------------------------------
# targets and penalties
# ---------------------------------------------------------------------------

@dataclass
class MetricTarget:
    mode: str
    value: float
    fp_loss: float

    def __post_init__(self):
        self.mode = self.mode.upper()
        if self.mode not in ("MDL", "MGL"):
            raise ValueError(f"unknown target mode {self.mode}")
        if self.value < 0:
            raise ValueError("metric target must be non-negative")
        if self.mode == "MDL" and self.value != self.fp_loss:
            raise ValueError("MDL target must equal the full-precision loss")
        if self.mode == "MGL" and not self.value > self.fp_loss:
            raise ValueError("MGL target must exceed the full-precision loss")

    @classmethod
    def mdl(cls, fp_loss: float) -> "MetricTarget":
        return cls("MDL", fp_loss, fp_loss)

    @classmethod
    def mgl(cls, fp_loss: float, multiplier: float) -> "MetricTarget":
        if not multiplier > 1:
            raise ValueError("MGL needs a target multiplier > 1")
        return cls("MGL", multiplier * fp_loss, fp_loss)


@dataclass
class PenaltyConfig:
    weights: dict[str, float]

    @classmethod
    def uniform(cls, registry: ComponentRegistry, total: float = 1e-3,
                codebook_weight: float = 1.0) -> "PenaltyConfig":
        """Split ``total`` over non-exempt components; ``codebook_weight`` scales
        the codebook's share relative to the others."""
        share = {}
        for c in registry:
            if c.state.frozen_exempt:
                share[c.name] = 0.0
            else:
                share[c.name] = codebook_weight if c.role == "codebook" else 1.0
        norm = sum(share.values())
        return cls({k: total * v / norm if norm else 0.0 for k, v in share.items()})

    def vector(self, registry: ComponentRegistry) -> np.ndarray:
        return np.array([self.weights.get(c.name, 0.0) for c in registry])

    @property
    def total(self) -> float:
        return sum(self.weights.values())


# ---------------------------------------------------------------------------
# full-precision training and PTQ
# ---------------------------------------------------------------------------

@dataclass
class FpConfig:
    iters: int = 2000
    batch: int = 4096
    lr: float = 1e-2
    seed: int = 0
    n_samples: int = 64
    # the last ``anneal_frac`` of iterations run at ``anneal_lr`` so the baseline
    # is settled at the rate later used for quantization-aware fine-tuning
    anneal_frac: float = 0.25
    anneal_lr: float = 1e-3
    warmup: int = 300           # linear ramp; keeps early Adam steps from saturating outputs

    def lr_at(self, it: int) -> float:
        if it >= self.iters * (1.0 - self.anneal_frac):
            return self.anneal_lr
        if it < self.warmup:
            return self.lr * (it + 1) / self.warmup
        return self.lr


def train_full_precision(dataset: Dataset, field_cfg: FieldConfig,
                         cfg: FpConfig | None = None, model: FieldModel | None = None):
    """Train a float model for a fixed iteration budget.

    Returns ``(model, fp_loss, history)`` where ``fp_loss`` is the mean
    training-set MSE of the final model.
    """
    cfg = cfg or FpConfig()
    model = model or FieldModel(field_cfg)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState()
    history = []
    for it in range(cfg.iters):
        batch = dataset.sample(rng, cfg.batch)
        tape = Tape()
        loss = nerf_loss(batch, model, None, "full_precision", tape, rng, cfg.n_samples)
        value = float(loss.value)
        history.append(value)
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value} at iteration {it}",
                                   [{"iter": i, "loss": v} for i, v in enumerate(history)])
        grads = tape.backward(loss)
        adam_update(model.params, {k: grads[k] for k in model.params}, opt, cfg.lr_at(it),
                    eps=1e-15, telemetry=tape.telemetry)
    fp_loss = dataset_loss(dataset, model, None, "full_precision", n_samples=cfg.n_samples)
    return model, fp_loss, history


def calibrate_ranges(model: FieldModel, dataset: Dataset, registry: ComponentRegistry,
                     max_samples: int = 16384, n_samples: int = 64) -> RangeRecorder:
    if len(dataset) == 0:
        raise ValueError("empty calibration set")
    rec = RangeRecorder()
    rows = np.arange(min(len(dataset), max_samples))
    if len(rows) < len(dataset):
        rows = np.linspace(0, len(dataset) - 1, max_samples).astype(np.int64)
    for start in range(0, len(rows), 8192):
        batch = dataset.batch(rows[start:start + 8192])
        predict(batch, model, registry, "full_precision", Tape(grad=False), n_samples, hook=rec)
    return rec


def ptq_init(model: FieldModel, dataset: Dataset, registry: ComponentRegistry | None = None,
             bits: float = PTQ_BITS, exp_bits: float = EXP_PTQ_BITS) -> ComponentRegistry:
    """Min/max calibration of every component; 8-bit everywhere, 32-bit for exp outputs."""
    registry = registry or build_registry(model)
    rec = calibrate_ranges(model, dataset, registry)
    for c in registry:
        if c.name not in rec.lo:
            raise ValueError(f"component {c.name} saw no values during calibration")
        b = exp_bits if c.role == "exp_act" else bits
        st = ptq_calibrate(np.array([rec.lo[c.name], rec.hi[c.name]]), c.state.scheme, b)
        st.frozen_exempt = c.state.frozen_exempt or c.role == "exp_act"
        c.state = st
    return registry


# ---------------------------------------------------------------------------
# A-CAQ
# ---------------------------------------------------------------------------

@dataclass
class AcaqConfig:
    iters: int = 3000
    batch: int = 4096
    lr_q: float = 1e-3
    lr_b: float = 1e-2
    penalty_total: float = 1e-3
    codebook_weight: float = 1.0
    seed: int = 0
    update_bits: bool = True
    update_q: bool = True
    n_samples: int = 64
    # "sum": the bit loss sees the batch-summed squared error (per ray and channel);
    # "mean": it sees the batch-mean MSE
    bit_loss_reduction: str = "sum"
    # "batch": the metric is rescaled by the full-precision model's loss on the
    # current batch (same rays and samples), so batch-to-batch noise cancels;
    # "fixed": the recorded scalar is used as is
    metric_reference: str = "fixed"


@dataclass
class TrainRun:
    model: FieldModel
    registry: ComponentRegistry
    target: MetricTarget
    penalties: PenaltyConfig
    cfg: AcaqConfig
    opt_q: AdamState = field(default_factory=AdamState)
    opt_b: AdamState = field(default_factory=AdamState)
    iteration: int = 0
    telemetry: list[dict] = field(default_factory=list)
    incidents: list[str] = field(default_factory=list)
    reference: FieldModel | None = None     # frozen full-precision model

    def batch_metric(self, batch: Batch, rng: np.random.Generator | None) -> float:
        """Metric target for this batch (see ``AcaqConfig.metric_reference``)."""
        if self.cfg.metric_reference == "fixed" or self.reference is None:
            return self.target.value
        ref = float(nerf_loss(batch, self.reference, None, "full_precision", Tape(grad=False),
                              rng, self.cfg.n_samples).value)
        return self.target.value * ref / self.target.fp_loss if self.target.fp_loss > 0 else ref

    @property
    def soft_bits(self) -> np.ndarray:
        return np.array([c.state.b for c in self.registry])

    def fqr(self) -> float:
        return fqr(self.registry.bits())


def quant_param_names(registry: ComponentRegistry) -> tuple[list[str], list[str]]:
    """Leaf names of (range/offset parameters, soft bitwidths)."""
    ranges, bits = [], []
    for c in registry:
        ranges.append(f"q.{c.name}.r_v")
        if c.state.scheme is QuantScheme.ASYMMETRIC:
            ranges.append(f"q.{c.name}.v_max")
        bits.append(f"q.{c.name}.b")
    return ranges, bits


def acaq_step(batch: Batch, run: TrainRun, rng: np.random.Generator | None = None) -> dict:
    """One iteration: shared forward, disjoint updates of Q and b."""
    ref_rng = copy.deepcopy(rng) if rng is not None else None
    tape = Tape()
    loss = nerf_loss(batch, run.model, run.registry, "fake_quantized", tape, rng,
                     run.cfg.n_samples)
    L = float(loss.value)
    metric = run.batch_metric(batch, ref_rng)
    grads = tape.backward(loss)
    reg = run.registry
    range_names, bit_names = quant_param_names(reg)

    scale = batch.colors.size if run.cfg.bit_loss_reduction == "sum" else 1
    g_b = scale * np.array([float(grads[n]) for n in bit_names])
    eps = run.penalties.vector(reg)
    g_bit = bit_loss_backward(scale * L, scale * metric, g_b, eps)
    loss_bit = bit_loss(scale * L, scale * metric, reg.bits(), eps)

    finite = math.isfinite(L) and np.all(np.isfinite(g_bit)) and all(
        np.all(np.isfinite(grads[n])) for n in list(run.model.params) + range_names)
    if not finite:
        msg = f"non-finite gradient at iteration {run.iteration}; step skipped"
        log.warning(msg)
        run.incidents.append(msg)
    else:
        if run.cfg.update_q:
            q_params = dict(run.model.params)
            scalars = {}
            for c in reg:
                scalars[f"q.{c.name}.r_v"] = np.array(c.state.r_v)
                if c.state.scheme is QuantScheme.ASYMMETRIC:
                    scalars[f"q.{c.name}.v_max"] = np.array(c.state.v_max)
            q_params.update(scalars)
            q_grads = {n: grads[n] for n in run.model.params}
            q_grads.update({n: np.asarray(grads[n], dtype=np.float64) for n in scalars})
            adam_update(q_params, q_grads, run.opt_q, run.cfg.lr_q)
            for c in reg:
                c.state.r_v = max(float(scalars[f"q.{c.name}.r_v"]), MIN_RANGE)
                if c.state.scheme is QuantScheme.ASYMMETRIC:
                    c.state.v_max = float(scalars[f"q.{c.name}.v_max"])
        if run.cfg.update_bits:
            b_params = {n: np.array(c.state.b) for n, c in zip(bit_names, reg)}
            adam_update(b_params, dict(zip(bit_names, g_bit)), run.opt_b, run.cfg.lr_b)
            for n, c in zip(bit_names, reg):
                c.state.b = clamp_soft_bitwidth(float(b_params[n]))

    row = {"iter": run.iteration, "loss_nerf": L, "loss_bit": loss_bit, "fqr": run.fqr()}
    for i, c in enumerate(reg, start=1):
        row[f"b_{i}"] = c.state.b
    run.telemetry.append(row)
    run.iteration += 1
    return row


def start_run(model: FieldModel, registry: ComponentRegistry, target: MetricTarget,
              cfg: AcaqConfig, reference: FieldModel | None = None) -> TrainRun:
    penalties = PenaltyConfig.uniform(registry, cfg.penalty_total, cfg.codebook_weight)
    return TrainRun(model, registry, target, penalties, cfg, reference=reference)


def run_acaq(model: FieldModel, dataset: Dataset, target: MetricTarget,
             cfg: AcaqConfig | None = None, registry: ComponentRegistry | None = None) -> TrainRun:
    """PTQ-initialize (unless a registry is given) and run the A-CAQ iterations."""
    if model is None:
        raise ValueError("run_acaq needs a trained full-precision model")
    cfg = cfg or AcaqConfig()
    reference = model
    model = model.copy()
    if registry is None:
        registry = ptq_init(model, dataset)
    run = start_run(model, registry, target, cfg, reference)
    rng = np.random.default_rng(cfg.seed + 1)
    for _ in range(cfg.iters):
        acaq_step(dataset.sample(rng, cfg.batch), run, rng)
    return run


def held_out_views(scene: SyntheticScene, count: int = 4, size: int = 64,
                   n_samples: int = 512) -> list[tuple[Camera, np.ndarray]]:
    """Oracle views at azimuths halfway between the training orbit's cameras."""
    views = []
    for i in range(count):
        cam = Camera.orbit(2 * math.pi * (i + 0.5) / count, elevation=0.2,
                           width=size, height=size)
        views.append((cam, oracle_render_rays(scene, generate_rays(cam), n_samples)
                      .reshape(size, size, 3)))
    return views


def evaluate(model: FieldModel, registry: ComponentRegistry | None, dataset: Dataset,
             mode: str = "fake_quantized",
             views: list[tuple[Camera, np.ndarray]] | None = None) -> float:
    """Mean PSNR over ``views`` (camera, reference) pairs.

    Defaults: the target image in 2D, the training views in 3D.
    """
    if dataset.dim == 2:
        img = dataset.images[0]
        pred = render_image(model, registry, mode=mode, size=img.shape[0])
        return psnr(np.clip(pred, 0, 1), img)
    if views is None:
        views = list(zip(dataset.cameras, dataset.images))
    vals = [psnr(np.clip(render_image(model, registry, cam, mode=mode), 0, 1), ref)
            for cam, ref in views]
    return float(np.mean(vals))
