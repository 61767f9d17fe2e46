"""Integer export (CARF container) and the integer-code forward path.

Container layout, all little-endian:

* header, 64 bytes: magic ``CARF``, u16 version, u8 dim, u8 levels,
  u8 log2_table, u8 features, u16 width, f64 base_resolution, f64 growth,
  u16 component count M, u32 seed, u32 CRC-32 of everything after the header,
  zero padding.
* M records of 96 bytes each, in pipeline order: 32-byte UTF-8 name (NUL
  padded), u8 role, u8 scheme, u8 B, u8 ndim, f64 s, i64 Z, f64 r_v,
  f64 v_max (NaN for symmetric schemes), f64 soft b, u64 count, 3 x u32 shape.
* payloads for components with count > 0, in record order: ``count`` codes of
  ``ceil(B/8)`` bytes each (two's complement for signed codes, no bit packing).

The forward path keeps hash interpolation weights, the exponential and the
sigmoid in float64. Parameters and inter-layer activations travel as integer
codes; each linear layer accumulates ``q_w * (q_x - Z_x)`` in int64 when the
worst-case sum fits, and in float64 otherwise.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field import (Component, ComponentRegistry, FieldConfig, FieldModel, encode_plan,
                    fake_quant_op, field_forward, interpolate, sh_encode)
from .engine import Tape
from .metrics import HEADER_BYTES, RECORD_BYTES
from .quant import (QuantizerState, QuantParams, QuantScheme, derive_params, fake_quantize,
                    integer_quantize)

MAGIC = b"CARF"
VERSION = 1
TOLERANCE = 1e-5

_HEADER = struct.Struct("<4sHBBBBHddHII")
_RECORD = struct.Struct("<32sBBBBdqdddQ3I")
assert _HEADER.size <= HEADER_BYTES and _RECORD.size == RECORD_BYTES

ROLES = ("codebook", "pe_other", "weight", "relu_act", "exp_act")
SCHEMES = tuple(QuantScheme)
# int64 accumulation is used while the worst-case |sum| stays below this
_INT_ACC_LIMIT = 2 ** 62


class ContainerError(ValueError):
    pass


@dataclass(frozen=True)
class RequantRecord:
    name: str
    role: str
    scheme: QuantScheme
    B: int
    s: float
    Z: int
    r_v: float
    v_max: float | None
    b: float
    count: int
    shape: tuple[int, ...]

    def state(self) -> QuantizerState:
        return QuantizerState(self.scheme, self.b, self.r_v, self.v_max, self.role == "exp_act")

    def params(self) -> QuantParams:
        return derive_params(self.state())


@dataclass
class IntegerModel:
    cfg: FieldConfig
    records: list[RequantRecord]
    codes: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> RequantRecord:
        for r in self.records:
            if r.name == name:
                return r
        raise KeyError(name)

    def names(self) -> list[str]:
        return [r.name for r in self.records]

    def registry(self) -> ComponentRegistry:
        """Quantizer states as exported, for accounting or re-running the float path."""
        return ComponentRegistry([Component(r.name, r.role, r.name if r.count else None,
                                            r.state(), r.count) for r in self.records])

    def payload_bytes(self) -> int:
        return sum(_code_bytes(r.B) * r.count for r in self.records)


def _code_bytes(B: int) -> int:
    return math.ceil(B / 8)


# ---------------------------------------------------------------------------
# export / import
# ---------------------------------------------------------------------------

def to_integer_model(model: FieldModel, registry: ComponentRegistry) -> IntegerModel:
    records, codes = [], {}
    for c in registry:
        p = derive_params(c.state)
        shape: tuple[int, ...] = ()
        if c.param is not None:
            value = np.asarray(model.params[c.param], dtype=np.float64)
            shape = value.shape
            if len(shape) > 3:
                raise ValueError(f"component {c.name}: at most 3 dimensions supported")
            codes[c.name] = integer_quantize(value, p)
        v_max = c.state.v_max if c.scheme is QuantScheme.ASYMMETRIC else None
        records.append(RequantRecord(c.name, c.role, c.scheme, p.B, p.s, p.Z, float(c.state.r_v),
                                     None if v_max is None else float(v_max), float(c.state.b),
                                     int(np.prod(shape)) if c.param else 0, tuple(shape)))
    return IntegerModel(model.cfg, records, codes)


def _pack(codes: np.ndarray, nbytes: int) -> bytes:
    raw = codes.astype("<i8").reshape(-1).view(np.uint8).reshape(-1, 8)
    return raw[:, :nbytes].tobytes()


def _unpack(buf: bytes, count: int, nbytes: int, signed: bool) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(count, nbytes)
    full = np.zeros((count, 8), dtype=np.uint8)
    full[:, :nbytes] = raw
    out = full.view("<u8").reshape(-1).astype(np.int64)
    if signed and nbytes < 8:
        bits = 8 * nbytes
        out = np.where(out >= 2 ** (bits - 1), out - 2 ** bits, out)
    return out


def encode_container(im: IntegerModel) -> bytes:
    cfg = im.cfg
    body = bytearray()
    for r in im.records:
        name = r.name.encode("utf-8")
        if len(name) > 32:
            raise ValueError(f"component name too long for container: {r.name}")
        shape = list(r.shape) + [0] * (3 - len(r.shape))
        body += _RECORD.pack(name, ROLES.index(r.role), SCHEMES.index(r.scheme), r.B,
                             len(r.shape), r.s, r.Z, r.r_v,
                             math.nan if r.v_max is None else r.v_max, r.b, r.count, *shape)
    for r in im.records:
        if r.count:
            body += _pack(im.codes[r.name], _code_bytes(r.B))
    header = _HEADER.pack(MAGIC, VERSION, cfg.dim, cfg.levels, cfg.log2_table, cfg.features,
                          cfg.width, float(cfg.base_resolution), float(cfg.growth),
                          len(im.records), cfg.seed, zlib.crc32(bytes(body)))
    return header.ljust(HEADER_BYTES, b"\0") + bytes(body)


def decode_container(data: bytes) -> IntegerModel:
    if len(data) < HEADER_BYTES:
        raise ContainerError("file too short for a CARF header")
    (magic, version, dim, levels, log2_table, features, width, base_res, growth, m, seed,
     crc) = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    body = data[HEADER_BYTES:]
    if zlib.crc32(body) != crc:
        raise ContainerError("checksum mismatch; container is corrupted")
    cfg = FieldConfig(dim=dim, levels=levels, log2_table=log2_table, features=features,
                      base_resolution=base_res, growth=growth, width=width, seed=seed)
    if len(body) < m * RECORD_BYTES:
        raise ContainerError("truncated component table")
    records = []
    for i in range(m):
        (name, role, scheme, B, ndim, s, Z, r_v, v_max, b, count,
         *shape) = _RECORD.unpack_from(body, i * RECORD_BYTES)
        if role >= len(ROLES) or scheme >= len(SCHEMES):
            raise ContainerError(f"record {i}: unknown role/scheme code")
        records.append(RequantRecord(name.rstrip(b"\0").decode("utf-8"), ROLES[role],
                                     SCHEMES[scheme], B, s, Z, r_v,
                                     None if math.isnan(v_max) else v_max, b, count,
                                     tuple(shape[:ndim])))
    codes = {}
    offset = m * RECORD_BYTES
    for r in records:
        if not r.count:
            continue
        n = _code_bytes(r.B) * r.count
        if offset + n > len(body):
            raise ContainerError(f"payload of {r.name} is truncated")
        p = r.params()
        arr = _unpack(body[offset:offset + n], r.count, _code_bytes(r.B), p.q_min < 0)
        if arr.min() < p.q_min or arr.max() > p.q_max:
            raise ContainerError(f"codes of {r.name} fall outside [{p.q_min}, {p.q_max}]")
        codes[r.name] = arr.reshape(r.shape)
        offset += n
    if offset != len(body):
        raise ContainerError("trailing bytes after payloads")
    return IntegerModel(cfg, records, codes)


def export_integer_model(model: FieldModel, registry: ComponentRegistry, path) -> IntegerModel:
    im = to_integer_model(model, registry)
    data = encode_container(im)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise ValueError(f"cannot write {path}: {exc}") from exc
    return im


def import_integer_model(path) -> IntegerModel:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ValueError(f"cannot read {path}: {exc}") from exc
    return decode_container(data)


# ---------------------------------------------------------------------------
# integer forward
# ---------------------------------------------------------------------------

@dataclass
class Codes:
    """An activation stream as integer codes plus the record that produced them."""

    q: np.ndarray
    rec: RequantRecord

    def centered(self) -> np.ndarray:
        return self.q - self.rec.Z

    def dequantize(self) -> np.ndarray:
        return self.rec.s * self.centered().astype(np.float64)


def _requant(v: np.ndarray, rec: RequantRecord) -> Codes:
    return Codes(integer_quantize(np.asarray(v, dtype=np.float64), rec.params()), rec)


def _matmul(w_codes: np.ndarray, w_rec: RequantRecord, parts: list[Codes]) -> np.ndarray:
    """float64 result of W_hat @ x_hat computed from codes."""
    wp = w_rec.params()
    out = None
    col = 0
    for part in parts:
        width = part.q.shape[1]
        wq = w_codes[:, col:col + width]
        col += width
        xp = part.rec.params()
        x_bound = max(abs(xp.q_min - xp.Z), abs(xp.q_max - xp.Z))
        w_bound = max(abs(wp.q_min), abs(wp.q_max))
        if width * w_bound * x_bound < _INT_ACC_LIMIT:
            acc = (part.centered() @ wq.T).astype(np.float64)
        else:
            acc = part.centered().astype(np.float64) @ wq.T.astype(np.float64)
        term = acc * (w_rec.s * part.rec.s)
        out = term if out is None else out + term
    return out


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def integer_forward(x, d, im: IntegerModel, trace: dict | None = None):
    """Evaluate the exported model. Returns ``(sigma, rgb)`` in float64.

    ``sigma`` is None in 2D. When ``trace`` is a dict it receives every
    activation stream's ``Codes`` keyed by component name.
    """
    cfg = im.cfg
    x = np.asarray(x, dtype=np.float64)
    plan = encode_plan(x, cfg, dtype=np.float64)

    def keep(c: Codes) -> Codes:
        if trace is not None:
            trace.setdefault(c.rec.name, []).append(c)
        return c

    def linear(name: str, parts: list[Codes]) -> np.ndarray:
        return _matmul(im.codes[name], im[name], parts)

    cb = im["codebook"]
    table = cb.s * (im.codes["codebook"] - cb.Z).astype(np.float64)
    flat = table.reshape(cfg.levels * cfg.table_size, cfg.features)
    h = keep(_requant(interpolate(flat, plan), cb))

    if cfg.dim == 2:
        layers = list(cfg.layer_shapes())
        for name in layers[:-1]:
            h = keep(_requant(np.maximum(linear(name, [h]), 0.0), im[f"{name}.relu"]))
        rgb = keep(_requant(_sigmoid(linear(layers[-1], [h])), im["rgb"]))
        return None, rgb.dequantize()

    if d is None:
        raise ValueError("3D model needs view directions")
    sh = keep(_requant(sh_encode(d), im["sh"]))
    h = keep(_requant(np.maximum(linear("density.0", [h]), 0.0), im["density.0.relu"]))
    o = keep(_requant(linear("density.1", [h]), im["density.out"]))
    raw = o.dequantize()[:, :1]
    limit = math.log(np.finfo(np.float64).max)
    sigma = keep(_requant(np.minimum(np.exp(np.minimum(raw, limit)), np.finfo(np.float64).max),
                          im["sigma"]))
    geo = Codes(o.q[:, 1:], o.rec)
    h = keep(_requant(np.maximum(linear("color.0", [geo, sh]), 0.0), im["color.0.relu"]))
    h = keep(_requant(np.maximum(linear("color.1", [h]), 0.0), im["color.1.relu"]))
    rgb = keep(_requant(_sigmoid(linear("color.2", [h])), im["rgb"]))
    return sigma.dequantize().reshape(-1), rgb.dequantize()


# ---------------------------------------------------------------------------
# consistency
# ---------------------------------------------------------------------------

def fake_quant_forward64(model: FieldModel, registry: ComponentRegistry, x, d=None, hook=None):
    """The fake-quantized float path evaluated in float64."""
    m64 = FieldModel(model.cfg, {k: np.asarray(v, dtype=np.float64)
                                 for k, v in model.params.items()})
    plan = encode_plan(np.asarray(x, dtype=np.float64), model.cfg, dtype=np.float64)
    tape = Tape(dtype=np.float64, grad=False)
    sigma, rgb = field_forward(m64, plan, d, registry, "fake_quantized", tape, hook)
    return (None if sigma is None else sigma.value), rgb.value


@dataclass
class ConsistencyReport:
    probes: int
    max_deviation: float
    passed: bool
    offending_component: str | None
    deviations: dict[str, float]
    code_mismatches: dict[str, int] = field(default_factory=dict)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        where = f" (first deviating component: {self.offending_component})" \
            if self.offending_component else ""
        return f"{status}: max |dev| = {self.max_deviation:.3g} over {self.probes} probes{where}"


def random_probes(dim: int, count: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, (count, dim))
    d = None
    if dim == 3:
        d = rng.normal(size=(count, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
    return x, d


def consistency_check(model: FieldModel, im: IntegerModel, probe_count: int = 100,
                      registry: ComponentRegistry | None = None, seed: int = 0,
                      tol: float = TOLERANCE) -> ConsistencyReport:
    """Compare the integer path against the float64 fake-quantized path.

    Per-component deviations cover parameter tensors (dequantized codes against
    fake-quantized float parameters) and every activation stream on the probes;
    the offending component is the first one in pipeline order above ``tol``.
    """
    if probe_count <= 0:
        raise ValueError("probe_count must be positive")
    if registry is None:
        registry = im.registry()
    if registry.names() != im.names():
        raise ValueError("registry and integer model enumerate different components")
    x, d = random_probes(model.cfg.dim, probe_count, seed)

    float_acts = _Collector(registry)
    sigma_f, rgb_f = fake_quant_forward64(model, registry, x, d, hook=float_acts)
    trace: dict = {}
    sigma_i, rgb_i = integer_forward(x, d, im, trace)

    devs: dict[str, float] = {}
    mismatched: dict[str, int] = {}
    for c in registry:
        dev = 0.0
        rec = im[c.name]
        if c.param is not None:
            p64 = np.asarray(model.params[c.param], dtype=np.float64)
            expected = integer_quantize(p64, c.state)
            mismatched[c.name] = int(np.count_nonzero(expected != im.codes[c.name]))
            dev = float(np.max(np.abs(fake_quantize(p64, c.state)
                                      - rec.s * (im.codes[c.name] - rec.Z))))
        for ref, got in zip(float_acts.streams.get(c.name, []), trace.get(c.name, [])):
            dev = max(dev, float(np.max(np.abs(ref - got.dequantize()), initial=0.0)))
        devs[c.name] = dev

    out_dev = float(np.max(np.abs(rgb_f - rgb_i)))
    if sigma_f is not None:
        out_dev = max(out_dev, float(np.max(np.abs(sigma_f - sigma_i))))
    offending = next((n for n in registry.names()
                      if devs[n] > tol or mismatched.get(n, 0)), None)
    max_dev = max([out_dev, *devs.values()])
    passed = max_dev <= tol and offending is None
    return ConsistencyReport(probe_count, max_dev, passed, offending, devs, mismatched)


class _Collector:
    """Fake-quant hook that also keeps every quantized activation stream."""

    def __init__(self, registry: ComponentRegistry):
        self.lookup = {c.name: c for c in registry}
        self.streams: dict[str, list[np.ndarray]] = {}

    def __call__(self, tape, name, v):
        comp = self.lookup[name]
        out = fake_quant_op(tape, v, comp)
        if comp.param is None or (name == "codebook" and v.value.ndim == 2):
            self.streams.setdefault(name, []).append(out.value)
        return out
