import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from swapnet_ct.geometry import LINE_INTEGRAL, POST_LOG, TRANSMISSION, ProjectionStack, Volume
from swapnet_ct.io import (
    FormatError,
    dumps_manifest,
    load_manifest,
    load_projections,
    load_volume,
    load_weights,
    save_manifest,
    save_projections,
    save_volume,
    save_weights,
)
from swapnet_ct.swapnet import SwapNetConfig, init_weights, predict


def test_volume_roundtrip_bit_exact(tmp_path):
    data = np.random.default_rng(0).random((5, 6, 7)).astype(np.float32)
    save_volume(tmp_path / "v.swv", Volume(data, 0.08))
    back = load_volume(tmp_path / "v.swv")
    assert back.data.tobytes() == data.tobytes()
    assert back.shape == (5, 6, 7)
    assert back.voxel_mm == pytest.approx(0.08)


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.tuples(*[st.integers(1, 6)] * 3), st.integers(0, 2), st.integers(1, 5))
def test_projection_roundtrip_property(tmp_path, shape, tag_i, seed):
    tag = (TRANSMISSION, LINE_INTEGRAL, POST_LOG)[tag_i]
    n = shape[0]
    data = np.random.default_rng(seed).random(shape).astype(np.float32)
    angles = np.linspace(0, np.pi, n, endpoint=False)
    save_projections(tmp_path / "p.swp", ProjectionStack(data, angles, tag))
    back = load_projections(tmp_path / "p.swp")
    assert back.data.tobytes() == data.tobytes()
    assert back.tag == tag
    np.testing.assert_allclose(back.angles, angles, rtol=1e-6)


def test_truncated_and_trailing_bytes_rejected(tmp_path):
    save_volume(tmp_path / "v.swv", Volume(np.ones((3, 3, 3), np.float32), 0.1))
    raw = (tmp_path / "v.swv").read_bytes()
    (tmp_path / "t.swv").write_bytes(raw[:-4])
    with pytest.raises(FormatError, match="truncated"):
        load_volume(tmp_path / "t.swv")
    (tmp_path / "x.swv").write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_volume(tmp_path / "x.swv")
    (tmp_path / "h.swv").write_bytes(raw[:10])
    with pytest.raises(FormatError, match="truncated"):
        load_volume(tmp_path / "h.swv")


def test_bad_magic_rejected(tmp_path):
    save_volume(tmp_path / "v.swv", Volume(np.ones((2, 2, 2), np.float32), 0.1))
    with pytest.raises(FormatError, match="magic"):
        load_projections(tmp_path / "v.swv")
    with pytest.raises(FormatError, match="magic"):
        load_weights(tmp_path / "v.swv")


def test_zero_extent_rejected(tmp_path):
    save_volume(tmp_path / "v.swv", Volume(np.ones((2, 2, 2), np.float32), 0.1))
    raw = bytearray((tmp_path / "v.swv").read_bytes())
    raw[4:8] = (0).to_bytes(4, "little")
    (tmp_path / "z.swv").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match=">= 1"):
        load_volume(tmp_path / "z.swv")


@pytest.mark.parametrize("variant", ["swap", "non_swap"])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_weights_roundtrip_gives_bit_identical_forward(tmp_path, variant, dtype):
    cfg = SwapNetConfig((4, 5, 6), ("z", "x", "y"), variant)
    w = init_weights(cfg, 3, dtype=dtype)
    for bs in w.biases:
        for b in bs:
            b.data[:] = np.random.default_rng(1).normal(size=b.shape)
    save_weights(tmp_path / "w.sww", cfg, w)
    cfg2, w2 = load_weights(tmp_path / "w.sww")
    assert cfg2 == cfg
    v = np.random.default_rng(2).normal(size=(4, 5, 6)).astype(dtype)
    assert predict(cfg, w, v).tobytes() == predict(cfg2, w2, v).tobytes()


def test_weights_truncated(tmp_path):
    cfg = SwapNetConfig((3, 3, 3))
    save_weights(tmp_path / "w.sww", cfg, init_weights(cfg, 0))
    raw = (tmp_path / "w.sww").read_bytes()
    (tmp_path / "t.sww").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        load_weights(tmp_path / "t.sww")


def test_manifest_roundtrip_and_canonical(tmp_path):
    m = {"b": np.float32(1.5), "a": (1, 2), "arr": np.arange(3), "nan": float("nan")}
    save_manifest(tmp_path / "m.json", m)
    back = load_manifest(tmp_path / "m.json")
    assert back["a"] == [1, 2] and back["arr"] == [0, 1, 2] and back["b"] == 1.5
    assert back["nan"] == "nan"
    assert dumps_manifest(m) == dumps_manifest(dict(reversed(list(m.items()))))


def test_manifest_errors(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(FormatError, match="not valid JSON"):
        load_manifest(tmp_path / "bad.json")
    (tmp_path / "old.json").write_text(json.dumps({"format_version": 99}))
    with pytest.raises(FormatError, match="format_version"):
        load_manifest(tmp_path / "old.json")
