"""Scene generator, container format, and unfold/fold contracts."""

import numpy as np
import pytest

from cagu.errors import ConfigError, FormatError, ShapeError
from cagu.hsi import (HsiCube, SynthSpec, empirical_snr_db, fold,
                      generate_synthetic, read_container, read_pgm, unfold,
                      write_container, write_pgm)


def small_spec(**overrides):
    base = dict(height=10, width=12, bands=24, endmembers=3, snr_db=30.0, seed=7)
    base.update(overrides)
    return SynthSpec(**base)


# ---------------------------------------------------------------------------
# generator

@pytest.mark.parametrize("snr_db", [80.0, 20.0])
def test_generated_snr_recomputed_from_clean_signal(snr_db):
    cube = generate_synthetic(small_spec(height=24, width=24, snr_db=snr_db))
    assert abs(empirical_snr_db(cube) - snr_db) < 0.5


def test_purity_pixels_plants_exactly_p_pure_pixels():
    cube = generate_synthetic(small_spec(purity_pixels=True))
    flat = cube.gt_abundances.reshape(3, -1)
    assert int(np.sum(flat.max(axis=0) == 1.0)) == 3


def test_huge_dirichlet_alpha_flattens_abundances():
    cube = generate_synthetic(small_spec(dirichlet_alpha=1e6,
                                         purity_pixels=False))
    np.testing.assert_allclose(cube.gt_abundances, 1 / 3, atol=1e-2)


def test_abundances_on_simplex_after_smoothing():
    cube = generate_synthetic(small_spec(purity_pixels=False))
    abund = cube.gt_abundances
    assert abund.min() >= 0.0
    np.testing.assert_allclose(abund.sum(axis=0), 1.0, atol=1e-9)


def test_generation_reproducible_bitwise():
    a = generate_synthetic(small_spec())
    b = generate_synthetic(small_spec())
    assert a.data.tobytes() == b.data.tobytes()
    assert a.gt_endmembers.tobytes() == b.gt_endmembers.tobytes()
    assert a.gt_abundances.tobytes() == b.gt_abundances.tobytes()


def test_ground_truth_product_reconstructs_clean_cube():
    cube = generate_synthetic(small_spec(snr_db=80.0))
    clean = cube.clean_signal()
    direct = np.einsum("lp,phw->lhw", cube.gt_endmembers, cube.gt_abundances)
    np.testing.assert_allclose(clean, direct, atol=1e-12)


def test_bands_must_exceed_endmembers():
    with pytest.raises(ConfigError):
        small_spec(bands=3, endmembers=3)


def test_snr_range_enforced():
    with pytest.raises(ConfigError):
        small_spec(snr_db=90.0)


# ---------------------------------------------------------------------------
# container

def test_container_roundtrip_float32_exact(tmp_path):
    cube = generate_synthetic(small_spec())
    quantized = HsiCube(
        cube.data.astype(np.float32).astype(np.float64),
        cube.gt_endmembers.astype(np.float32).astype(np.float64),
        cube.gt_abundances.astype(np.float32).astype(np.float64))
    path = tmp_path / "scene.hsic"
    write_container(quantized, path)
    back = read_container(path)
    assert back.data.tobytes() == quantized.data.tobytes()
    assert back.gt_endmembers.tobytes() == quantized.gt_endmembers.tobytes()
    assert back.gt_abundances.tobytes() == quantized.gt_abundances.tobytes()


def test_container_file_roundtrip_byte_exact(tmp_path):
    cube = generate_synthetic(small_spec())
    first = tmp_path / "a.hsic"
    second = tmp_path / "b.hsic"
    write_container(cube, first)
    write_container(read_container(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_container_without_ground_truth(tmp_path):
    cube = HsiCube(np.random.default_rng(0).random((5, 3, 4)))
    path = tmp_path / "plain.hsic"
    write_container(cube, path)
    back = read_container(path)
    assert back.gt_endmembers is None and back.gt_abundances is None
    assert back.data.shape == (5, 3, 4)


def test_bad_magic_reports_offset_zero(tmp_path):
    path = tmp_path / "bad.hsic"
    path.write_bytes(b"NOPE" + b"\x00" * 40)
    with pytest.raises(FormatError) as info:
        read_container(path)
    assert info.value.offset == 0


def test_truncated_payload_reports_offset(tmp_path):
    cube = generate_synthetic(small_spec())
    path = tmp_path / "trunc.hsic"
    write_container(cube, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:60])
    with pytest.raises(FormatError, match="truncated"):
        read_container(path)


def test_header_extent_overflow_is_truncation_error(tmp_path):
    import struct
    # header declares a huge cube with only 8 payload bytes
    header = b"HSIC" + struct.pack("<6I", 1, 0, 10_000, 10_000, 10_000, 0)
    path = tmp_path / "overflow.hsic"
    path.write_bytes(header + b"\x00" * 8)
    with pytest.raises(FormatError, match="truncated"):
        read_container(path)


def test_trailing_garbage_rejected(tmp_path):
    cube = HsiCube(np.zeros((4, 2, 2)))
    path = tmp_path / "trail.hsic"
    write_container(cube, path)
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(FormatError, match="trailing"):
        read_container(path)


# ---------------------------------------------------------------------------
# unfold / fold

def test_fold_unfold_inverse():
    arr = np.random.default_rng(1).random((3, 4, 5))
    np.testing.assert_array_equal(fold(unfold(arr), 4, 5), arr)


def test_unfold_column_order_row_major():
    arr = np.array([[[1.0, 2.0], [3.0, 4.0]]])  # 1 x 2 x 2: a,b / c,d
    np.testing.assert_array_equal(unfold(arr), [[1.0, 2.0, 3.0, 4.0]])


def test_unfold_column_sums_match_pixel_sums():
    arr = np.random.default_rng(2).random((6, 3, 4))
    col_sums = unfold(arr).sum(axis=0)
    pixel_sums = arr.sum(axis=0).reshape(-1)
    np.testing.assert_allclose(col_sums, pixel_sums, atol=1e-12)


def test_fold_dimension_mismatch():
    with pytest.raises(ShapeError):
        fold(np.zeros((2, 10)), 3, 4)


# ---------------------------------------------------------------------------
# PGM

def test_pgm_roundtrip_within_quantization(tmp_path):
    img = np.random.default_rng(3).random((6, 9))
    path = tmp_path / "map.pgm"
    write_pgm(path, img)
    back = read_pgm(path)
    assert np.max(np.abs(back - img)) <= 1 / 255


def test_pgm_constant_half_is_128(tmp_path):
    path = tmp_path / "half.pgm"
    write_pgm(path, np.full((4, 4), 0.5))
    raw = path.read_bytes()
    assert raw.endswith(bytes([128] * 16))


def test_pgm_one_hot_maps(tmp_path):
    # a pure pixel renders 255 in its own map and 0 in the others
    maps = np.zeros((2, 3, 3))
    maps[0, 1, 1] = 1.0
    for k in range(2):
        path = tmp_path / f"m{k}.pgm"
        write_pgm(path, maps[k])
        back = read_pgm(path)
        assert back[1, 1] == (1.0 if k == 0 else 0.0)
        assert back.sum() == (1.0 if k == 0 else 0.0)
