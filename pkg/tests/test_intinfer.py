import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from acaq.engine import Tape
from acaq.field import (FieldConfig, FieldModel, RangeRecorder, build_registry, encode_plan,
                        field_forward)
from acaq.intinfer import (MAGIC, ContainerError, consistency_check, decode_container,
                           encode_container, export_integer_model, fake_quant_forward64,
                           import_integer_model, integer_forward, random_probes,
                           to_integer_model)
from acaq.metrics import metadata_bytes, storage_bytes
from acaq.quant import derive_params, ptq_calibrate

SMALL = {2: FieldConfig(dim=2, levels=4, log2_table=10, width=32, seed=1),
         3: FieldConfig(dim=3, levels=4, log2_table=10, width=32, seed=1)}
BITS = [2, 3, 4, 5, 6, 7, 8, 9, 12, 16, 32]


def mixed_model(dim, seed=0, bits=None):
    rng = np.random.default_rng(seed)
    cfg = SMALL[dim]
    m = FieldModel(cfg)
    m.params["codebook"][:] = rng.uniform(-0.5, 0.5, m.params["codebook"].shape)
    reg = build_registry(m)
    x, d = random_probes(dim, 256, seed + 7)
    rec = RangeRecorder()
    field_forward(m, encode_plan(x, cfg), d, None, "full_precision", Tape(grad=False), rec)
    for c in reg:
        b = float(rng.choice(BITS)) if bits is None else bits
        c.state = ptq_calibrate(np.array([rec.lo[c.name], rec.hi[c.name]]), c.scheme, b)
    return m, reg


def flip_one(im, name):
    codes = im.codes[name]
    idx = (0,) * codes.ndim
    rec = im[name]
    p = derive_params(rec.state())
    codes[idx] = codes[idx] + 1 if codes[idx] < p.q_max else codes[idx] - 1


@pytest.mark.parametrize("dim", [2, 3])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_integer_path_matches_fake_quant(dim, seed):
    m, reg = mixed_model(dim, seed)
    im = to_integer_model(m, reg)
    report = consistency_check(m, im, 100, reg)
    assert report.passed, report.summary()
    assert report.max_deviation <= 1e-5
    x, d = random_probes(dim, 100, 11)
    s1, c1 = integer_forward(x, d, im)
    s2, c2 = integer_forward(x, d, im)
    np.testing.assert_array_equal(c1, c2)
    fs, fc = fake_quant_forward64(m, reg, x, d)
    assert np.max(np.abs(fc - c1)) <= 1e-5


@pytest.mark.parametrize("dim", [2, 3])
def test_activation_codes_in_range(dim):
    m, reg = mixed_model(dim, 4)
    im = to_integer_model(m, reg)
    trace = {}
    x, d = random_probes(dim, 50, 1)
    integer_forward(x, d, im, trace)
    assert trace
    for name, streams in trace.items():
        p = derive_params(im[name].state())
        for codes in streams:
            assert codes.q.min() >= p.q_min and codes.q.max() <= p.q_max
    for name, codes in im.codes.items():
        p = derive_params(im[name].state())
        assert codes.min() >= p.q_min and codes.max() <= p.q_max


@pytest.mark.parametrize("dim", [2, 3])
def test_container_round_trip_and_size(dim, tmp_path):
    m, reg = mixed_model(dim, 5)
    path = tmp_path / "m.carf"
    im = export_integer_model(m, reg, path)
    back = import_integer_model(path)
    assert back.records == im.records
    assert all(np.array_equal(im.codes[k], back.codes[k]) for k in im.codes)
    size = path.stat().st_size
    assert size == metadata_bytes(len(reg)) + im.payload_bytes()
    # byte-aligned payloads never undercut the analytic packed figure
    assert size >= storage_bytes(reg)
    assert size - metadata_bytes(len(reg)) < storage_bytes(reg, include_metadata=False) * 8
    assert consistency_check(m, back, 100, reg).passed


def test_container_rejections(tmp_path):
    m, reg = mixed_model(2, 6)
    blob = encode_container(to_integer_model(m, reg))
    assert blob[:4] == MAGIC
    with pytest.raises(ContainerError):
        decode_container(b"XXXX" + blob[4:])
    with pytest.raises(ContainerError):
        decode_container(blob[:-3])
    with pytest.raises(ContainerError):
        decode_container(blob + b"\0")
    tampered = bytearray(blob)
    tampered[-1] ^= 0xFF
    with pytest.raises(ContainerError):
        decode_container(bytes(tampered))
    with pytest.raises(ContainerError):
        decode_container(b"")
    with pytest.raises(ValueError):
        import_integer_model(tmp_path / "missing.carf")
    with pytest.raises(ValueError):
        export_integer_model(m, reg, tmp_path / "no" / "such" / "dir" / "m.carf")


@pytest.mark.parametrize("dim,name", [(2, "mlp.1"), (3, "color.1"), (2, "codebook")])
def test_tamper_is_detected(dim, name):
    m, reg = mixed_model(dim, 7)
    im = to_integer_model(m, reg)
    flip_one(im, name)
    report = consistency_check(m, im, 100, reg)
    assert not report.passed
    assert report.offending_component == name
    assert name in report.summary()


def test_full_32_bit_tamper_detected():
    m, reg = mixed_model(2, 8, bits=32)
    im = to_integer_model(m, reg)
    assert consistency_check(m, im, 20, reg).passed
    flip_one(im, "mlp.2")
    assert consistency_check(m, im, 20, reg).offending_component == "mlp.2"


def test_probe_count_rejected():
    m, reg = mixed_model(2, 9)
    with pytest.raises(ValueError):
        consistency_check(m, to_integer_model(m, reg), 0, reg)


@settings(max_examples=10)
@given(st.integers(0, 10 ** 6), st.sampled_from([2, 3]))
def test_equivalence_property(seed, dim):
    m, reg = mixed_model(dim, seed)
    assert consistency_check(m, to_integer_model(m, reg), 30, reg, seed=seed).passed
