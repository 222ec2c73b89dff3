from __future__ import annotations

import numpy as np
import pytest

from fpss.errors import (
    DimensionMismatch,
    MagicMismatch,
    NonFiniteValue,
    TruncatedPayload,
    UnsupportedVersion,
    ZeroMass,
)
from fpss.tensor_core import (
    BinaryMask,
    FeatureMap,
    MaskStack,
    ProbabilityMap,
    ScalarGrid,
    load_mask,
    map_point,
    mask_union,
    nearest_indices,
    normalize_l2,
    read_label_grid,
    read_mask_pgm,
    read_tensor,
    renormalize,
    resize_grid_nearest,
    resize_mask_nearest,
    spatial_softmax,
    write_label_grid,
    write_mask_pgm,
    write_tensor,
)

MAGIC = b"FPSS"


def _random_features(rng: np.random.Generator, h: int, w: int, d: int) -> FeatureMap:
    return FeatureMap(rng.standard_normal((h, w, d)).astype(np.float32))


# ---------------------------------------------------------------------------
# Wire format round-trips
# ---------------------------------------------------------------------------

def test_feature_map_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    for _ in range(20):
        h, w, d = rng.integers(1, 9, size=3)
        fm = _random_features(rng, int(h), int(w), int(d))
        path = tmp_path / "t.fpss"
        write_tensor(fm, path)
        back = read_tensor(path)
        assert isinstance(back, FeatureMap)
        assert back.data.dtype == np.float32
        assert np.array_equal(
            back.data.view(np.uint32), fm.data.view(np.uint32)
        )  # bit-exact, not just value-equal


def test_scalar_grid_round_trip_keeps_negative_values(tmp_path):
    grid = ScalarGrid(np.array([[-2.5, 0.0], [1.25, -0.0]], dtype=np.float32))
    path = tmp_path / "g.fpss"
    write_tensor(grid, path)
    back = read_tensor(path)
    assert isinstance(back, ScalarGrid)
    assert np.array_equal(back.data.view(np.uint32), grid.data.view(np.uint32))


def test_binary_mask_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    mask = BinaryMask(rng.random((7, 9)) > 0.5)
    path = tmp_path / "m.fpss"
    write_tensor(mask, path)
    back = read_tensor(path)
    assert isinstance(back, BinaryMask)
    assert np.array_equal(back.data, mask.data)


def test_mask_stack_round_trip_and_indexing(tmp_path):
    rng = np.random.default_rng(6)
    stack = MaskStack(rng.random((4, 5, 6)) > 0.6)
    path = tmp_path / "s.fpss"
    write_tensor(stack, path)
    back = read_tensor(path)
    assert isinstance(back, MaskStack)
    assert len(back) == 4
    assert back.mask_shape == (5, 6)
    for i in range(4):
        assert np.array_equal(back[i].data, stack.data[i])


def test_label_grid_round_trip_preserves_raw_values(tmp_path):
    labels = np.array([[0, 1, 250], [7, 0, 255]], dtype=np.uint8)
    path = tmp_path / "l.fpss"
    write_label_grid(labels, path)
    back = read_label_grid(path)
    assert back.dtype == np.uint8
    assert np.array_equal(back, labels)
    # the generic reader collapses the same bytes to a nonzero mask
    mask = read_tensor(path)
    assert isinstance(mask, BinaryMask)
    assert np.array_equal(mask.data, labels != 0)


def test_header_magic_is_checked(tmp_path):
    path = tmp_path / "bad.fpss"
    path.write_bytes(b"XPSS" + bytes([1, 0, 2, 1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0]))
    with pytest.raises(MagicMismatch):
        read_tensor(path)


def test_header_version_is_checked(tmp_path):
    path = tmp_path / "bad.fpss"
    path.write_bytes(MAGIC + bytes([2, 0, 2, 1, 0, 0, 0, 1, 0, 0, 0]) + b"\x00\x00\x00\x00")
    with pytest.raises(UnsupportedVersion):
        read_tensor(path)


def test_truncated_payload_is_rejected(tmp_path):
    grid = ScalarGrid(np.ones((3, 3), dtype=np.float32))
    path = tmp_path / "g.fpss"
    write_tensor(grid, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-2])
    with pytest.raises(TruncatedPayload):
        read_tensor(path)


def test_non_finite_payload_is_rejected(tmp_path):
    path = tmp_path / "nan.fpss"
    header = MAGIC + bytes([1, 0, 2]) + (1).to_bytes(4, "little") * 2
    payload = np.array([[np.nan]], dtype="<f4").tobytes()
    path.write_bytes(header + payload)
    with pytest.raises(NonFiniteValue):
        read_tensor(path)


def test_label_grid_reader_rejects_float_payloads(tmp_path):
    grid = ScalarGrid(np.ones((2, 2), dtype=np.float32))
    path = tmp_path / "g.fpss"
    write_tensor(grid, path)
    with pytest.raises(UnsupportedVersion):
        read_label_grid(path)


# ---------------------------------------------------------------------------
# PGM masks
# ---------------------------------------------------------------------------

def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    for _ in range(10):
        h, w = rng.integers(1, 12, size=2)
        mask = BinaryMask(rng.random((int(h), int(w))) > 0.4)
        path = tmp_path / "m.pgm"
        write_mask_pgm(mask, path)
        assert np.array_equal(read_mask_pgm(path).data, mask.data)


def test_pgm_reader_handles_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made elsewhere\n2 2\n# another\n255\n" + bytes([0, 255, 7, 0]))
    mask = read_mask_pgm(path)
    # any nonzero byte is foreground
    assert np.array_equal(mask.data, np.array([[False, True], [True, False]]))


def test_load_mask_sniffs_both_formats(tmp_path):
    mask = BinaryMask(np.eye(4, dtype=bool))
    pgm = tmp_path / "m.pgm"
    fpss = tmp_path / "m.fpss"
    write_mask_pgm(mask, pgm)
    write_tensor(mask, fpss)
    assert np.array_equal(load_mask(pgm).data, mask.data)
    assert np.array_equal(load_mask(fpss).data, mask.data)


# ---------------------------------------------------------------------------
# Grid operations
# ---------------------------------------------------------------------------

def test_normalize_l2_unit_norms_and_zero_cells():
    rng = np.random.default_rng(3)
    data = rng.standard_normal((5, 4, 6)).astype(np.float32)
    data[1, 2] = 0.0
    data[4, 0] = 0.0
    out = normalize_l2(FeatureMap(data))
    assert out.zero_norm_cells == 2
    norms = np.linalg.norm(np.asarray(out.features.data, dtype=np.float64), axis=2)
    nonzero = norms > 0
    assert np.allclose(norms[nonzero], 1.0, atol=1e-6)
    assert norms[1, 2] == 0.0 and norms[4, 0] == 0.0


def test_renormalize_unit_mass_and_zero_mass_error():
    rng = np.random.default_rng(4)
    for _ in range(10):
        values = rng.random((3, 5))
        p = renormalize(values)
        assert isinstance(p, ProbabilityMap)
        assert abs(p.total - 1.0) < 1e-12
        assert np.allclose(p.data, values / values.sum())
    with pytest.raises(ZeroMass):
        renormalize(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        renormalize(np.array([[1.0, -0.5]]))


def test_spatial_softmax_properties():
    rng = np.random.default_rng(7)
    for _ in range(10):
        grid = rng.standard_normal((4, 6))
        p = spatial_softmax(grid, temperature=0.5)
        assert abs(p.total - 1.0) < 1e-12
        assert (p.data > 0).all()
        # shift invariance
        q = spatial_softmax(grid + 13.0, temperature=0.5)
        assert np.allclose(p.data, q.data, atol=1e-12)
        # order preserved
        assert np.array_equal(np.argsort(p.data.ravel()), np.argsort(grid.ravel(), kind="stable"))
    with pytest.raises(ValueError):
        spatial_softmax(np.zeros((2, 2)), temperature=0.0)


def test_spatial_softmax_keeps_equal_scores_equal():
    # equal float32 similarities must get exactly equal mass
    grid = ScalarGrid(np.array([[0.7, 0.2], [0.7, 0.7]], dtype=np.float32))
    p = spatial_softmax(grid, temperature=0.1)
    assert p.data[0, 0] == p.data[1, 0] == p.data[1, 1]


def test_softmax_sharpens_as_temperature_drops():
    grid = np.array([[1.0, 0.0], [0.2, -0.3]])
    hot = spatial_softmax(grid, temperature=1.0)
    cold = spatial_softmax(grid, temperature=0.05)
    assert cold.data.max() > hot.data.max()


def test_mask_union_semantics():
    a = BinaryMask(np.array([[True, False], [False, False]]))
    b = BinaryMask(np.array([[False, False], [False, True]]))
    u = mask_union([a, b])
    assert np.array_equal(u.data, np.array([[True, False], [False, True]]))
    empty = mask_union([], shape=(3, 2))
    assert empty.shape == (3, 2) and empty.area == 0
    with pytest.raises(DimensionMismatch):
        mask_union([a, BinaryMask(np.zeros((3, 3), dtype=bool))])


def test_nearest_indices_center_rule():
    assert np.array_equal(nearest_indices(2, 4), np.array([1, 3]))
    assert np.array_equal(nearest_indices(4, 4), np.arange(4))
    assert np.array_equal(nearest_indices(4, 2), np.array([0, 0, 1, 1]))
    for n in (1, 3, 5, 8):
        idx = nearest_indices(n, n)
        assert np.array_equal(idx, np.arange(n))  # identity at equal size


def test_resize_mask_round_trip_by_integer_factor():
    rng = np.random.default_rng(8)
    for _ in range(10):
        h, w = (int(v) for v in rng.integers(2, 7, size=2))
        mask = BinaryMask(rng.random((h, w)) > 0.5)
        up = resize_mask_nearest(mask, (h * 3, w * 3))
        down = resize_mask_nearest(up, (h, w))
        assert np.array_equal(down.data, mask.data)


def test_resize_grid_nearest_identity():
    grid = ScalarGrid(np.arange(12, dtype=np.float32).reshape(3, 4))
    same = resize_grid_nearest(grid, (3, 4))
    assert np.array_equal(same.data, grid.data)


def test_map_point_matches_resize_geometry():
    rng = np.random.default_rng(10)
    for _ in range(50):
        h1, w1 = (int(v) for v in rng.integers(2, 20, size=2))
        h2, w2 = (int(v) for v in rng.integers(2, 20, size=2))
        y = int(rng.integers(0, h1))
        x = int(rng.integers(0, w1))
        y2, x2 = map_point(y, x, (h1, w1), (h2, w2))
        assert 0 <= y2 < h2 and 0 <= x2 < w2
        # mapping a point onto the same shape is the identity
        assert map_point(y, x, (h1, w1), (h1, w1)) == (y, x)


def test_feature_map_rejects_non_finite():
    bad = np.ones((2, 2, 2), dtype=np.float32)
    bad[0, 0, 0] = np.inf
    with pytest.raises(NonFiniteValue):
        FeatureMap(bad)


def test_probability_map_rejects_negative():
    with pytest.raises(ValueError):
        ProbabilityMap(np.array([[0.5, -0.1]]))
