"""Quantizable neural field: hash-grid codebook, SH direction encoding, MLPs.

``FieldModel`` owns the float parameters (codebook and bias-free weight
matrices). ``ComponentRegistry`` owns one ``QuantizerState`` per quantized
component, in pipeline order. ``field_forward`` evaluates the pipeline on a
tape, routing every parameter and inter-layer activation through the
registry's quantizer hook.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engine import Tape, Var
from .quant import QuantizerState, QuantScheme, derive_params, fake_quantize, round_half_away

PRIMES = (1, 2654435761, 805459861)

ROLE_SCHEME = {
    "codebook": QuantScheme.ASYMMETRIC,
    "pe_other": QuantScheme.ASYMMETRIC,
    "weight": QuantScheme.SIGNED_SYMMETRIC,
    "relu_act": QuantScheme.UNSIGNED_SYMMETRIC,
    "exp_act": QuantScheme.UNSIGNED_SYMMETRIC,
}
SH_DIM = 9


@dataclass
class FieldConfig:
    dim: int = 2
    levels: int = 8
    log2_table: int = 14
    features: int = 2
    base_resolution: float = 16.0
    growth: float = 1.5
    width: int = 64
    seed: int = 0

    @property
    def table_size(self) -> int:
        return 2 ** self.log2_table

    @property
    def encoded_dim(self) -> int:
        return self.levels * self.features

    def resolutions(self) -> list[int]:
        return [int(math.floor(self.base_resolution * self.growth ** l)) for l in range(self.levels)]

    def layer_shapes(self) -> dict[str, tuple[int, int]]:
        """(out, in) shape of every weight matrix, in pipeline order."""
        w, e = self.width, self.encoded_dim
        if self.dim == 2:
            return {"mlp.0": (w, e), "mlp.1": (w, w), "mlp.2": (w, w), "mlp.3": (3, w)}
        geo = 15
        return {"density.0": (w, e), "density.1": (1 + geo, w),
                "color.0": (w, geo + SH_DIM), "color.1": (w, w), "color.2": (3, w)}


# ---------------------------------------------------------------------------
# hash grid
# ---------------------------------------------------------------------------

@dataclass
class EncodePlan:
    """Corner indices into the flattened (levels*T, F) table and their weights."""

    index: np.ndarray    # (N, L, 2**dim) int64
    weight: np.ndarray   # (N, L, 2**dim)
    clamped: int = 0

    def take(self, rows) -> "EncodePlan":
        return EncodePlan(self.index[rows], self.weight[rows])


def encode_plan(x: np.ndarray, cfg: FieldConfig, dtype=np.float32) -> EncodePlan:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.dim:
        raise ValueError(f"expected coordinates of shape (N, {cfg.dim}), got {x.shape}")
    outside = (x < 0) | (x > 1)
    clamped = int(outside.any(axis=1).sum())
    x = np.clip(x, 0.0, 1.0)
    n, dim, T = x.shape[0], cfg.dim, cfg.table_size
    corners = np.array(np.meshgrid(*[[0, 1]] * dim, indexing="ij")).reshape(dim, -1).T
    index = np.empty((n, cfg.levels, len(corners)), dtype=np.int64)
    weight = np.empty((n, cfg.levels, len(corners)), dtype=np.float64)
    for l, res in enumerate(cfg.resolutions()):
        pos = x * (res - 1)
        base = np.minimum(np.floor(pos), res - 2).astype(np.int64)
        frac = pos - base
        direct = res ** dim <= T
        for c, offs in enumerate(corners):
            coord = base + offs
            w = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=1)
            if direct:
                strides = res ** np.arange(dim, dtype=np.int64)
                idx = coord @ strides
            else:
                h = np.zeros(n, dtype=np.uint64)
                for i in range(dim):
                    h ^= coord[:, i].astype(np.uint64) * np.uint64(PRIMES[i])
                idx = (h & np.uint64(T - 1)).astype(np.int64)
            index[:, l, c] = idx + l * T
            weight[:, l, c] = w
    return EncodePlan(index, weight.astype(dtype), clamped)


def interpolate(table_flat: np.ndarray, plan: EncodePlan) -> np.ndarray:
    """Multilinear interpolation of corner features, concatenated over levels."""
    feats = table_flat[plan.index]                       # (N, L, C, F)
    out = np.einsum("nlc,nlcf->nlf", plan.weight, feats)
    return out.reshape(out.shape[0], -1)


def hash_encode(tape: Tape, table: Var, plan: EncodePlan) -> Var:
    """Tape op: table of shape (L, T, F) -> features (N, L*F)."""
    L, T, F = table.value.shape
    flat = table.value.reshape(L * T, F)
    out = interpolate(flat, plan).astype(table.value.dtype)
    if plan.clamped:
        tape.telemetry.clamped_inputs += plan.clamped

    def backward(g):
        g = g.reshape(g.shape[0], L, 1, F) * plan.weight[..., None]
        idx = plan.index.ravel()
        grad = np.empty((L * T, F), dtype=table.value.dtype)
        for f in range(F):
            grad[:, f] = np.bincount(idx, weights=g[..., f].ravel(), minlength=L * T)
        return [grad.reshape(L, T, F)]

    return tape.custom(out, (table,), backward)


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------

def sh_encode(d: np.ndarray) -> np.ndarray:
    """Real spherical harmonics up to degree 2 for unit directions (N, 3) -> (N, 9)."""
    d = np.asarray(d, dtype=np.float64)
    if d.ndim == 1:
        d = d[None]
    norm = np.linalg.norm(d, axis=1)
    if np.any(norm == 0):
        raise ValueError("zero-length view direction")
    if np.any(np.abs(norm - 1) > 1e-4):
        raise ValueError("view directions must be unit length")
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    return np.stack([
        np.full_like(x, 0.28209479177387814),
        -0.48860251190291987 * y,
        0.48860251190291987 * z,
        -0.48860251190291987 * x,
        1.0925484305920792 * x * y,
        -1.0925484305920792 * y * z,
        0.31539156525252005 * (3 * z * z - 1),
        -1.0925484305920792 * x * z,
        0.5462742152960396 * (x * x - y * y),
    ], axis=1)


# ---------------------------------------------------------------------------
# model + registry
# ---------------------------------------------------------------------------

class FieldModel:
    def __init__(self, cfg: FieldConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg
        if params is None:
            params = self._init_params()
        self.params = params

    def _init_params(self) -> dict[str, np.ndarray]:
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        params = {"codebook": rng.uniform(-1e-4, 1e-4, (cfg.levels, cfg.table_size, cfg.features))}
        for name, (n_out, n_in) in cfg.layer_shapes().items():
            bound = math.sqrt(6.0 / n_in)
            params[name] = rng.uniform(-bound, bound, (n_out, n_in))
        return {k: v.astype(np.float32) for k, v in params.items()}

    def copy(self) -> "FieldModel":
        return FieldModel(self.cfg, {k: v.copy() for k, v in self.params.items()})

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass
class Component:
    name: str
    role: str
    param: str | None
    state: QuantizerState
    count: int = 0          # stored parameter values; 0 for activation-only components

    @property
    def scheme(self) -> QuantScheme:
        return self.state.scheme


@dataclass
class ComponentRegistry:
    components: list[Component] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def __getitem__(self, name: str) -> Component:
        for c in self.components:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def M(self) -> int:
        return len(self.components)

    def names(self) -> list[str]:
        return [c.name for c in self.components]

    def bits(self) -> list[int]:
        return [c.state.bits for c in self.components]

    def copy(self) -> "ComponentRegistry":
        return ComponentRegistry([
            Component(c.name, c.role, c.param,
                      QuantizerState(c.state.scheme, c.state.b, c.state.r_v,
                                     c.state.v_max, c.state.frozen_exempt), c.count)
            for c in self.components])

    def set_bits(self, b: float) -> None:
        for c in self.components:
            c.state.b = float(b)


def build_registry(model: FieldModel, mode_2d: bool | None = None) -> ComponentRegistry:
    """Enumerate quantized components in pipeline order."""
    if mode_2d is None:
        mode_2d = model.cfg.dim == 2
    if mode_2d != (model.cfg.dim == 2):
        raise ValueError("mode_2d does not match the model dimensionality")
    entries: list[tuple[str, str, str | None]] = [("codebook", "codebook", "codebook")]
    if mode_2d:
        layers = list(model.cfg.layer_shapes())
        for i, name in enumerate(layers):
            entries.append((name, "weight", name))
            if i < len(layers) - 1:
                entries.append((f"{name}.relu", "relu_act", None))
    else:
        entries += [
            ("sh", "pe_other", None),
            ("density.0", "weight", "density.0"), ("density.0.relu", "relu_act", None),
            ("density.1", "weight", "density.1"), ("density.out", "pe_other", None),
            ("sigma", "exp_act", None),
            ("color.0", "weight", "color.0"), ("color.0.relu", "relu_act", None),
            ("color.1", "weight", "color.1"), ("color.1.relu", "relu_act", None),
            ("color.2", "weight", "color.2"),
        ]
    entries.append(("rgb", "pe_other", None))
    return ComponentRegistry([
        Component(name, role, param, QuantizerState(ROLE_SCHEME[role]),
                  model.params[param].size if param else 0)
        for name, role, param in entries])


# ---------------------------------------------------------------------------
# quantizer hooks
# ---------------------------------------------------------------------------

def fake_quant_op(tape: Tape, v: Var, comp: Component) -> Var:
    """Tape op for the fake quantizer; gradients reach v and the component's
    trainable scalars (leaves ``q.<name>.r_v``, ``q.<name>.b``, ``q.<name>.v_max``)."""
    st = comp.state
    p = derive_params(st)
    x = v.value
    out = fake_quantize(x, p)
    inputs = [v]
    if tape.grad_enabled:
        inputs.append(tape.leaf(f"q.{comp.name}.r_v", st.r_v))
        inputs.append(tape.leaf(f"q.{comp.name}.b", st.b))
        if st.scheme is QuantScheme.ASYMMETRIC:
            inputs.append(tape.leaf(f"q.{comp.name}.v_max", st.v_max))

    def backward(g):
        over = x > p.v_max
        under = x < p.v_min
        inside = ~(over | under)
        s = np.asarray(p.s, dtype=x.dtype)
        resid = x - s * round_half_away(x / s)
        g_in = np.where(inside, g, 0).astype(x.dtype)
        g_inside_resid = float(np.sum(g * resid * inside, dtype=np.float64))
        g_over = float(np.sum(g * over, dtype=np.float64))
        g_under = float(np.sum(g * under, dtype=np.float64))
        r_v = p.s * p.r_q
        k = 2.0 ** p.B * math.log(2.0) / p.r_q
        if st.scheme is QuantScheme.SIGNED_SYMMETRIC:
            d_rv = -g_inside_resid / r_v + g_over * p.q_max / p.r_q + g_under * p.q_min / p.r_q
            d_b = k * (g_inside_resid + g_over * (p.v_max - p.q_max * p.s)
                       + g_under * (p.v_min - p.q_min * p.s))
        elif st.scheme is QuantScheme.UNSIGNED_SYMMETRIC:
            d_rv = -g_inside_resid / r_v + g_over
            d_b = k * g_inside_resid
        else:
            base = -p.v_max / r_v - p.Z / p.r_q
            d_rv = -g_inside_resid / r_v + g_over * (1 + base) + g_under * base
            d_b = k * (g_inside_resid + (g_over + g_under) * (p.v_min + p.s * p.Z))
        grads = [g_in, np.asarray(d_rv), np.asarray(d_b)]
        if st.scheme is QuantScheme.ASYMMETRIC:
            grads.append(np.asarray(g_over + g_under))
        return grads

    return tape.custom(out, inputs, backward)


QuantHook = Callable[[Tape, str, Var], Var]


def identity_hook(tape: Tape, name: str, v: Var) -> Var:
    return v


def fake_quant_hook(registry: ComponentRegistry) -> QuantHook:
    lookup = {c.name: c for c in registry}

    def hook(tape: Tape, name: str, v: Var) -> Var:
        return fake_quant_op(tape, v, lookup[name])

    return hook


class RangeRecorder:
    """Hook that records per-component min/max while passing values through."""

    def __init__(self):
        self.lo: dict[str, float] = {}
        self.hi: dict[str, float] = {}
        self.seen: dict[str, int] = {}

    def __call__(self, tape: Tape, name: str, v: Var) -> Var:
        x = v.value
        if x.size:
            lo, hi = float(x.min()), float(x.max())
            self.lo[name] = min(lo, self.lo.get(name, lo))
            self.hi[name] = max(hi, self.hi.get(name, hi))
            self.seen[name] = self.seen.get(name, 0) + x.size
        return v


def make_hook(registry: ComponentRegistry | None, mode: str) -> QuantHook:
    if mode == "full_precision":
        return identity_hook
    if mode == "fake_quantized":
        if registry is None:
            raise ValueError("fake_quantized mode needs a registry")
        return fake_quant_hook(registry)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def field_forward(model: FieldModel, plan: EncodePlan, dirs: np.ndarray | None,
                  registry: ComponentRegistry | None = None, mode: str = "full_precision",
                  tape: Tape | None = None, hook: QuantHook | None = None):
    """Evaluate the field on pre-planned coordinates.

    Returns ``(sigma, rgb)`` Vars; ``sigma`` is None in 2D mode. ``dirs`` are
    unit view directions (3D only; ignored in 2D).
    """
    if tape is None:
        tape = Tape(grad=False)
    q = hook if hook is not None else make_hook(registry, mode)
    cfg = model.cfg
    params = {name: tape.leaf(name, value) for name, value in model.params.items()}

    table = q(tape, "codebook", params["codebook"])
    y = q(tape, "codebook", hash_encode(tape, table, plan))

    def dense(name, h, act=None):
        out = tape.linear(q(tape, name, params[name]), h)
        if act == "relu":
            out = q(tape, f"{name}.relu", tape.activation("relu", out))
        return out

    if cfg.dim == 2:
        h = y
        layers = list(cfg.layer_shapes())
        for name in layers[:-1]:
            h = dense(name, h, "relu")
        rgb = q(tape, "rgb", tape.activation("sigmoid", dense(layers[-1], h)))
        return None, rgb

    if dirs is None:
        raise ValueError("3D mode needs view directions")
    y_d = q(tape, "sh", tape.constant(sh_encode(dirs)))
    h = dense("density.0", y, "relu")
    o = q(tape, "density.out", dense("density.1", h))
    sigma = q(tape, "sigma", tape.activation("exponential", tape.columns(o, 0, 1)))
    geo = tape.columns(o, 1, o.value.shape[1])
    h = tape.concat([geo, y_d], axis=1)
    h = dense("color.0", h, "relu")
    h = dense("color.1", h, "relu")
    rgb = q(tape, "rgb", tape.activation("sigmoid", dense("color.2", h)))
    return tape.reshape(sigma, (-1,)), rgb
