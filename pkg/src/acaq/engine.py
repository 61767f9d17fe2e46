"""Tape-based reverse-mode gradients over dense numpy arrays.

Only the primitives the neural-field pipeline needs are provided. Custom
primitives (quantizers, hash lookups, volume rendering) register their own
backward closures through :meth:`Tape.custom`.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "exponential", "sigmoid")


class Var:
    """A node value on the tape. Leaves carry a name so gradients can be looked up."""

    __slots__ = ("value", "name")

    def __init__(self, value: np.ndarray, name: str | None = None):
        self.value = value
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"<Var{tag} shape={self.value.shape}>"


@dataclass
class _Node:
    out: Var
    inputs: tuple[Var, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Telemetry:
    exp_overflow: int = 0
    skipped_steps: int = 0
    clamped_inputs: int = 0
    incidents: list[str] = field(default_factory=list)


class Tape:
    """Records primitive applications so :meth:`backward` can replay them in reverse.

    With ``grad=False`` nothing is recorded, which makes evaluation passes cheap.
    """

    def __init__(self, dtype=np.float32, grad: bool = True):
        self.dtype = np.dtype(dtype)
        self.grad_enabled = grad
        self.nodes: list[_Node] = []
        self.leaves: dict[str, Var] = {}
        self.telemetry = Telemetry()

    # -- leaves -----------------------------------------------------------
    def leaf(self, name: str, value) -> Var:
        """Trainable leaf. Repeated calls with the same name return the same Var."""
        var = self.leaves.get(name)
        if var is None:
            arr = np.asarray(value, dtype=self.dtype)
            var = Var(arr, name)
            self.leaves[name] = var
        return var

    def constant(self, value) -> Var:
        return Var(np.asarray(value, dtype=self.dtype))

    def custom(self, out_value: np.ndarray, inputs: Sequence[Var], backward) -> Var:
        out = Var(out_value)
        if self.grad_enabled:
            self.nodes.append(_Node(out, tuple(inputs), backward))
        return out

    # -- primitives -------------------------------------------------------
    def linear(self, weights: Var, x: Var, bias: Var | None = None) -> Var:
        w, a = weights.value, x.value
        if w.ndim != 2 or a.ndim != 2 or a.shape[1] != w.shape[1]:
            raise ValueError(
                f"linear: input {a.shape} incompatible with weights {w.shape}")
        if bias is not None and bias.value.shape != (w.shape[0],):
            raise ValueError(
                f"linear: bias {bias.value.shape} does not match weights {w.shape}")
        out = a @ w.T
        if bias is not None:
            out = out + bias.value

        def backward(g):
            grads = [g.T @ a, g @ w]
            if bias is not None:
                grads.append(g.sum(axis=0))
            return grads

        inputs = (weights, x) if bias is None else (weights, x, bias)
        return self.custom(out, inputs, backward)

    def activation(self, kind: str, x: Var) -> Var:
        v = x.value
        if kind == "relu":
            mask = v > 0
            out = np.where(mask, v, 0).astype(v.dtype)
            return self.custom(out, (x,), lambda g: [g * mask])
        if kind == "exponential":
            limit = math.log(np.finfo(v.dtype).max)
            over = v > limit
            if over.any():
                self.telemetry.exp_overflow += int(over.sum())
                log.warning("exponential overflow on %d values, clamped", int(over.sum()))
            with np.errstate(over="ignore"):    # the float32 limit itself rounds up
                out = np.minimum(np.exp(np.minimum(v, limit)), np.finfo(v.dtype).max)
            return self.custom(out, (x,), lambda g: [g * out * ~over])
        if kind == "sigmoid":
            with np.errstate(over="ignore"):    # exp(-v) -> inf gives the exact limit 0
                out = (1.0 / (1.0 + np.exp(-v))).astype(v.dtype)
            return self.custom(out, (x,), lambda g: [g * out * (1 - out)])
        raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")

    def mse(self, pred: Var, target) -> Var:
        p = pred.value
        t = target.value if isinstance(target, Var) else np.asarray(target, dtype=p.dtype)
        if p.shape != t.shape:
            raise ValueError(f"mse: shape mismatch {p.shape} vs {t.shape}")
        if p.size == 0:
            raise ValueError("mse: empty batch")
        diff = p - t
        out = np.asarray(np.mean(diff * diff), dtype=p.dtype)
        scale = 2.0 / p.size
        return self.custom(out, (pred,), lambda g: [g * scale * diff])

    def mul(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        return self.custom(av * bv, (a, b), lambda g: [_unbroadcast(g * bv, av.shape),
                                                       _unbroadcast(g * av, bv.shape)])

    def add(self, a: Var, b: Var) -> Var:
        av, bv = a.value, b.value
        return self.custom(av + bv, (a, b), lambda g: [_unbroadcast(g, av.shape),
                                                       _unbroadcast(g, bv.shape)])

    def sum(self, a: Var) -> Var:
        shape = a.value.shape
        return self.custom(np.asarray(a.value.sum(), dtype=a.value.dtype), (a,),
                           lambda g: [np.broadcast_to(g, shape)])

    def concat(self, parts: Sequence[Var], axis: int = -1) -> Var:
        values = [p.value for p in parts]
        out = np.concatenate(values, axis=axis)
        bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
        return self.custom(out, tuple(parts), lambda g: np.split(g, bounds, axis=axis))

    def columns(self, x: Var, start: int, stop: int) -> Var:
        """Slice ``x[:, start:stop]``."""
        shape = x.value.shape

        def backward(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[:, start:stop] = g
            return [full]

        return self.custom(x.value[:, start:stop], (x,), backward)

    def reshape(self, x: Var, shape) -> Var:
        old = x.value.shape
        return self.custom(x.value.reshape(shape), (x,), lambda g: [g.reshape(old)])

    # -- backward ---------------------------------------------------------
    def backward(self, loss: Var, seed: float = 1.0) -> dict[str, np.ndarray]:
        """Propagate ``seed`` from ``loss`` back to every named leaf.

        Returns gradients keyed by leaf name; leaves not reached get zeros.
        """
        if not self.nodes:
            raise RuntimeError("backward called before any recorded forward pass")
        grads: dict[int, np.ndarray] = {id(loss): np.full(loss.value.shape, seed,
                                                          dtype=loss.value.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = {}
        for name, var in self.leaves.items():
            g = grads.get(id(var))
            out[name] = (np.zeros_like(var.value) if g is None
                         else np.asarray(g, dtype=var.value.dtype).reshape(var.value.shape))
        return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: AdamState, lr: float, beta1: float = 0.9,
                beta2: float = 0.999, eps: float = 1e-8,
                telemetry: Telemetry | None = None) -> bool:
    """One bias-corrected Adam step, applied in place to ndarray parameters.

    Returns False (and leaves everything untouched) when any gradient is
    non-finite.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        if name not in params:
            continue
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"adam: gradient shape {np.shape(g)} != parameter "
                             f"shape {np.shape(params[name])} for {name}")
        if not np.all(np.isfinite(g)):
            msg = f"non-finite gradient for {name}; step skipped"
            log.warning(msg)
            if telemetry is not None:
                telemetry.skipped_steps += 1
                telemetry.incidents.append(msg)
            return False
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        if name not in params:
            continue
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p -= update.astype(p.dtype)
    return True
