import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from acaq.field import Component, ComponentRegistry, FieldConfig, FieldModel, build_registry
from acaq.metrics import (Mac, avg_image_gradient, bitops, emit_report, fqr, mac_workload,
                          metadata_bytes, psnr, report_csv, storage_bytes)
from acaq.quant import QuantizerState, QuantScheme


def one_layer(wb=8, ab=8):
    return ComponentRegistry([
        Component("w", "weight", "w", QuantizerState(QuantScheme.SIGNED_SYMMETRIC, wb), 64 * 64),
        Component("a", "relu_act", None, QuantizerState(QuantScheme.UNSIGNED_SYMMETRIC, ab))])


def set_bits(reg, b):
    for c in reg:
        c.state.b = b
    return reg


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0)
    assert psnr(a, a + 1.0) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        psnr(a, np.zeros((4, 3, 3)))


def test_fqr_examples():
    assert fqr([8] * 14 + [32]) == pytest.approx(9.60)
    assert fqr([32] * 9) == 32.0
    assert fqr([2] * 13) == 2.0
    with pytest.raises(ValueError):
        fqr([])


def test_bitops_examples():
    work = [Mac("w", "a", 64 * 64)]
    assert bitops(one_layer(), work) == 262144
    assert bitops(one_layer(wb=4), work) == 262144 // 2
    with pytest.raises(ValueError):
        bitops(one_layer(), [])
    with pytest.raises(ValueError):
        bitops(one_layer(), [Mac("w", "missing", 1)])


@pytest.mark.parametrize("dim", [2, 3])
def test_bitops_full_vs_8bit_ratio(dim):
    model = FieldModel(FieldConfig(dim=dim))
    reg = build_registry(model)
    work = mac_workload(reg, model, 100)
    assert bitops(set_bits(reg, 32), work) == 16 * bitops(set_bits(reg, 8), work)


def test_workload_counts_every_mac():
    model = FieldModel(FieldConfig(dim=3))
    work = mac_workload(build_registry(model), model, 10)
    per_layer = {}
    for m in work:
        per_layer[m.weight] = per_layer.get(m.weight, 0) + m.count
    for name, (n_out, n_in) in model.cfg.layer_shapes().items():
        assert per_layer[name] == n_out * n_in * 10


def test_storage_examples():
    def codebook(b):
        return ComponentRegistry([Component("codebook", "codebook", "codebook",
                                            QuantizerState(QuantScheme.SIGNED_SYMMETRIC, b), 2 ** 14 * 2)])
    meta = metadata_bytes(1)
    assert storage_bytes(codebook(8)) == 32768 + meta
    assert storage_bytes(codebook(4)) == 16384 + meta
    assert storage_bytes(codebook(4), include_metadata=False) == 16384
    reg = build_registry(FieldModel(FieldConfig(dim=2)))
    full = storage_bytes(set_bits(reg, 32))
    assert full > storage_bytes(set_bits(reg, 31))


@given(st.lists(st.integers(2, 31), min_size=9, max_size=9), st.integers(0, 8))
def test_accounting_monotone_in_each_bitwidth(bits, i):
    model = FieldModel(FieldConfig(dim=2))
    reg = build_registry(model)
    work = mac_workload(reg, model, 1)
    for c, b in zip(reg, bits):
        c.state.b = b
    f0, o0, s0 = fqr(reg.bits()), bitops(reg, work), storage_bytes(reg)
    reg.components[i].state.b += 1
    assert fqr(reg.bits()) > f0
    assert bitops(reg, work) >= o0
    assert storage_bytes(reg) >= s0


def test_avg_image_gradient_examples(rng):
    assert avg_image_gradient(np.full((8, 8, 3), 0.3)) == 0
    h, w = 10, 16
    step = np.zeros((h, w, 1))
    step[:, w // 2:] = 1.0
    assert avg_image_gradient(step) == pytest.approx(1 / w)
    noise = rng.uniform(size=(32, 32, 3))
    ramp = np.broadcast_to(np.linspace(0, 1, 32)[None, :, None], (32, 32, 3))
    assert avg_image_gradient(noise) > avg_image_gradient(ramp)
    with pytest.raises(ValueError):
        avg_image_gradient([])


@given(st.integers(0, 2 ** 31 - 1))
def test_avg_image_gradient_symmetries(seed):
    img = np.random.default_rng(seed).uniform(size=(7, 11, 3))
    g = avg_image_gradient(img)
    assert avg_image_gradient(img.transpose(1, 0, 2)) == pytest.approx(g)
    assert avg_image_gradient(img[::-1, ::-1]) == pytest.approx(g)


def records(n=3):
    return [{"scene": f"k{k}-s0", "complexity": 0.01 * (k + 1) / 3, "mode": "mdl", "target": 1.0,
             "penalty": 1e-3, "fqr": 5 + k / 7, "psnr": 40.123456789 - k, "bitops": 123456789 * k,
             "storage_bytes": 1000 + k} for k in range(n)]


def test_report_csv_round_trip():
    recs = records()
    rows = list(csv.DictReader(io.StringIO(report_csv(recs))))
    assert len(rows) == 3
    assert list(rows[0]) == ["scene", "complexity", "mode", "target", "penalty", "fqr", "psnr",
                             "bitops", "storage_bytes"]
    for r, row in zip(recs, rows):
        for k in ("complexity", "fqr", "psnr", "penalty", "target"):
            assert float(row[k]) == pytest.approx(r[k], rel=1e-5)
        assert int(row["bitops"]) == r["bitops"]


def test_emit_report(tmp_path):
    paths = emit_report(records(1), tmp_path / "a")
    assert paths["csv"].read_text().count("\n") == 2
    for n in (1, 4):
        paths = emit_report(records(n), tmp_path / f"r{n}")
        for key in ("complexity_svg", "psnr_svg"):
            svg = paths[key].read_text()
            assert svg.count('class="marker"') == n
            assert 'width="800" height="600"' in svg
        data = json.loads(paths["json"].read_text())
        assert len(data["records"]) == n and "bitops" in data["metadata"]
    again = emit_report(records(4), tmp_path / "again")
    for key in paths:
        assert again[key].read_bytes() == paths[key].read_bytes()


def test_emit_report_rejects(tmp_path):
    with pytest.raises(ValueError):
        emit_report([], tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ValueError):
        emit_report(records(1), blocker / "sub")
