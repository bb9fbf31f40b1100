import json

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from remake.errors import DataError, MissingFileError
from remake.relative_depth import (Provenance, ingest_external_map, proxy_relative_depth,
                                   write_external_map)


def test_endpoints_and_midpoint():
    out = proxy_relative_depth(np.array([[1.0, 2.0, 3.0]])).values
    assert out.tolist() == [[1.0, 0.5, 0.0]]


def test_affine_copy_gives_identical_output():
    out = proxy_relative_depth(np.array([[2.0, 4.0, 6.0]])).values
    assert out.tolist() == [[1.0, 0.5, 0.0]]


def test_constant_map_is_half():
    out = proxy_relative_depth(np.full((4, 5), 0.7))
    assert np.all(out.values == 0.5)
    assert out.provenance is Provenance.PROXY


def test_invalid_pixels_filled_from_nearest():
    d = np.array([[1.0, 0.0, 0.0, 3.0]])
    out = proxy_relative_depth(d).values
    assert out.tolist() == [[1.0, 1.0, 0.0, 0.0]]


def test_all_invalid_raises():
    with pytest.raises(DataError):
        proxy_relative_depth(np.zeros((3, 3)))


def test_noise_is_bounded_and_seeded(rng):
    d = rng.uniform(0.4, 1.0, (16, 16))
    a = proxy_relative_depth(d, 0.05, seed=3).values
    b = proxy_relative_depth(d, 0.05, seed=3).values
    clean = proxy_relative_depth(d).values
    assert np.array_equal(a, b)
    assert np.abs(a - clean).max() <= 0.05 + 1e-12
    assert a.min() >= 0 and a.max() <= 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_monotone_and_in_range(seed):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0.1, 10.0, (5, 6))
    d[rng.uniform(size=d.shape) < 0.2] = 0.0
    out = proxy_relative_depth(d).values
    assert out.min() >= 0 and out.max() <= 1
    valid = d > 0
    if valid.sum() > 1:
        dv, ov = d[valid], out[valid]
        order = np.argsort(dv)
        assert np.all(np.diff(ov[order]) <= 0)
        strictly = np.diff(dv[order]) > 0
        assert np.all(np.diff(ov[order])[strictly] < 0)


@pytest.mark.parametrize("d", [np.array([[0.0, 0.0, 2.5]]), np.array([[1e-6, 1e6]])])
def test_adversarial_inputs_stay_in_range(d):
    out = proxy_relative_depth(d).values
    assert np.all(np.isfinite(out)) and out.min() >= 0 and out.max() <= 1


def test_ingest_16bit_endpoints(tmp_path):
    img = np.array([[0, 65535], [65535, 0]], dtype=np.uint16)
    cv2.imwrite(str(tmp_path / "rel.png"), img)
    out = ingest_external_map(tmp_path / "rel.png", (2, 2))
    assert out.values.tolist() == [[0.0, 1.0], [1.0, 0.0]]
    assert out.provenance is Provenance.EXTERNAL


def test_ingest_same_shape_no_resampling(tmp_path, rng):
    grid = rng.uniform(3, 7, (6, 4)).astype(np.float32)
    write_external_map(grid, tmp_path / "rel.f32")
    out = ingest_external_map(tmp_path / "rel.f32", (6, 4)).values
    g = grid.astype(np.float64)
    assert np.allclose(out, (g - g.min()) / (g.max() - g.min()), atol=1e-15)


def test_ingest_far_is_high_convention(tmp_path):
    (tmp_path / "r.f32").write_bytes(np.array([1, 2, 3], dtype="<f4").tobytes())
    (tmp_path / "r.json").write_text(json.dumps({"shape": [1, 3], "convention": "far_is_high"}))
    assert ingest_external_map(tmp_path / "r.f32", (1, 3)).values.tolist() == [[1.0, 0.5, 0.0]]


def test_bilinear_upsample_corners_and_interior(tmp_path):
    grid = np.array([[0.0, 1.0], [2.0, 3.0]], dtype=np.float32)
    write_external_map(grid, tmp_path / "rel.f32")
    out = ingest_external_map(tmp_path / "rel.f32", (4, 4)).values
    norm = grid.astype(np.float64) / 3.0
    assert out[0, 0] == norm[0, 0] and out[0, -1] == norm[0, 1]
    assert out[-1, 0] == norm[1, 0] and out[-1, -1] == norm[1, 1]
    # row 0 at x = 1/3: 0 + (1/3) * (1/3)
    assert out[0, 1] == pytest.approx(1 / 9, abs=1e-12)
    # interior (y = x = 1/3): bilinear blend of all four corners
    expected = (norm[0, 0] * (2 / 3) * (2 / 3) + norm[0, 1] * (2 / 3) * (1 / 3)
                + norm[1, 0] * (1 / 3) * (2 / 3) + norm[1, 1] * (1 / 3) * (1 / 3))
    assert out[1, 1] == pytest.approx(expected, abs=1e-12)


def test_constant_external_map_warns(tmp_path):
    write_external_map(np.full((3, 3), 4.0, np.float32), tmp_path / "c.f32")
    out = ingest_external_map(tmp_path / "c.f32", (3, 3))
    assert np.all(out.values == 0.5) and out.warnings


def test_missing_or_bad_file(tmp_path):
    with pytest.raises(MissingFileError):
        ingest_external_map(tmp_path / "nope.png", (2, 2))
    (tmp_path / "bad.f32").write_bytes(b"\0" * 8)
    with pytest.raises(DataError):
        ingest_external_map(tmp_path / "bad.f32", (2, 2))
