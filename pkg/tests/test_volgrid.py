import gzip
import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from labelforge.errors import CorruptLabelError, ShapeError, UnsupportedFormatError, VolumeFormatError
from labelforge.volgrid import (
    IntensityVolume, LabelVolume, VolumeGeometry, canonical_affine, orientation_code, read_header,
    read_volume, reorient_to_canonical, slice_count_filter, write_volume,
)
from oracles import hand_header

LPI_SFORM = [(-1.0, 0, 0, 0), (0, -1.0, 0, 0), (0, 0, -1.0, 0)]
RAS_SFORM = [(1.0, 0, 0, 0), (0, 1.0, 0, 0), (0, 0, 1.0, 0)]


def _ramp8():
    # the value at (i, j, k) is i + 8 j + 64 k; file order has i varying fastest
    i, j, k = np.meshgrid(np.arange(8), np.arange(8), np.arange(8), indexing="ij")
    return (i + 8 * j + 64 * k).astype(np.uint16)


def _ramp8_bytes(endian):
    vals = [i + 8 * j + 64 * k for k in range(8) for j in range(8) for i in range(8)]
    return struct.pack(endian + "512H", *vals)


@pytest.mark.parametrize("endian", ["<", ">"])
def test_hand_assembled_8cube_canonical(tmp_path, endian):
    raw = hand_header((8, 8, 8), 512, 16, endian=endian, sform=LPI_SFORM) + _ramp8_bytes(endian)
    p = tmp_path / "cube.nii"
    p.write_bytes(raw)
    vol = read_volume(p)
    assert vol.voxels.dtype == np.uint16
    np.testing.assert_array_equal(vol.voxels, _ramp8())
    assert vol.geometry.orientation_code == "LPI"


def test_hand_assembled_8cube_ras_is_flipped(tmp_path):
    p = tmp_path / "cube.nii.gz"
    p.write_bytes(gzip.compress(hand_header((8, 8, 8), 512, 16, sform=RAS_SFORM) + _ramp8_bytes("<")))
    vol = read_volume(p)
    np.testing.assert_array_equal(vol.voxels, _ramp8()[::-1, ::-1, ::-1])
    # voxel (0,0,0) of the canonical grid was stored at (7,7,7): world (7,7,7)
    np.testing.assert_allclose(vol.geometry.voxel_to_world([0, 0, 0]), [7, 7, 7])


def test_qform_only_header(tmp_path):
    # identity rotation, qfac 1 -> RAS with 2 mm voxels and an offset
    raw = hand_header((8, 8, 8), 512, 16, pixdim=(2.0, 2.0, 2.0), qform=(0.0, 0.0, 0.0, 1.0, (10.0, 20.0, 30.0)))
    p = tmp_path / "q.nii"
    p.write_bytes(raw + _ramp8_bytes("<"))
    vol = read_volume(p)
    np.testing.assert_array_equal(vol.voxels, _ramp8()[::-1, ::-1, ::-1])
    np.testing.assert_allclose(vol.geometry.voxel_to_world([7, 7, 7]), [10, 20, 30])
    assert vol.geometry.spacing == (2.0, 2.0, 2.0)


def test_no_transform_falls_back_to_pixdim(tmp_path):
    p = tmp_path / "bare.nii"
    p.write_bytes(hand_header((8, 8, 8), 512, 16, pixdim=(1.5, 1.5, 3.0)) + _ramp8_bytes("<"))
    vol = read_volume(p)
    assert vol.geometry.spacing == (1.5, 1.5, 3.0)
    np.testing.assert_array_equal(vol.voxels, _ramp8()[::-1, ::-1, ::-1])


def test_sform_overrides_qform(tmp_path):
    raw = hand_header((8, 8, 8), 512, 16, sform=LPI_SFORM, qform=(0.0, 0.0, 0.0, 1.0, (0.0, 0.0, 0.0)))
    p = tmp_path / "both.nii"
    p.write_bytes(raw + _ramp8_bytes("<"))
    np.testing.assert_array_equal(read_volume(p).voxels, _ramp8())


def test_scale_slope_and_intercept(tmp_path):
    data = np.arange(8, dtype="<i2")
    raw = hand_header((2, 2, 2), 4, 16, sform=LPI_SFORM, slope=2.0, inter=-1024.0) + data.tobytes()
    p = tmp_path / "ct.nii"
    p.write_bytes(raw)
    vol = read_volume(p, "intensity")
    expect = (np.arange(8).reshape((2, 2, 2), order="F") * 2.0 - 1024.0)
    np.testing.assert_array_equal(vol.voxels, expect.astype(np.float32))


def test_float_labels_that_hold_integers(tmp_path):
    data = (np.arange(8) + 1e-7).astype("<f4")
    p = tmp_path / "f.nii"
    p.write_bytes(hand_header((2, 2, 2), 16, 32, sform=LPI_SFORM) + data.tobytes())
    vol = read_volume(p)
    np.testing.assert_array_equal(vol.voxels.ravel(order="F"), np.arange(8))


def test_non_integer_labels_rejected(tmp_path):
    data = np.array([0, 1, 2.5, 3, 4, 5, 6, 7], dtype="<f4")
    p = tmp_path / "bad.nii"
    p.write_bytes(hand_header((2, 2, 2), 16, 32, sform=LPI_SFORM) + data.tobytes())
    with pytest.raises(CorruptLabelError):
        read_volume(p)
    # the same file is fine as an intensity volume
    assert read_volume(p, "intensity").voxels.max() == 7


def test_unsupported_datatype(tmp_path):
    p = tmp_path / "rgb.nii"
    p.write_bytes(hand_header((2, 2, 2), 128, 24, sform=LPI_SFORM) + bytes(24))
    with pytest.raises(UnsupportedFormatError):
        read_volume(p)


def test_four_dimensional_rejected(tmp_path):
    p = tmp_path / "4d.nii"
    p.write_bytes(hand_header((2, 2, 2), 512, 16, sform=LPI_SFORM, dim0=4, extra_dims=(3,)) + bytes(48))
    with pytest.raises(ShapeError):
        read_volume(p)


def test_trailing_unit_dimension_accepted(tmp_path):
    p = tmp_path / "3d_as_4d.nii"
    p.write_bytes(hand_header((2, 2, 2), 512, 16, sform=LPI_SFORM, dim0=4, extra_dims=(1,)) + bytes(16))
    assert read_volume(p).geometry.dims == (2, 2, 2)


def test_bad_magic_and_size(tmp_path):
    p = tmp_path / "pair.nii"
    p.write_bytes(hand_header((2, 2, 2), 512, 16, magic=b"ni1\x00") + bytes(16))
    with pytest.raises(UnsupportedFormatError):
        read_volume(p)
    q = tmp_path / "junk.nii"
    q.write_bytes(b"\x00" * 400)
    with pytest.raises(VolumeFormatError):
        read_volume(q)


def test_truncated_payload(tmp_path):
    p = tmp_path / "short.nii"
    p.write_bytes(hand_header((8, 8, 8), 512, 16, sform=LPI_SFORM) + bytes(100))
    with pytest.raises(VolumeFormatError):
        read_volume(p)


def test_label_13_is_liver(tmp_path, scheme):
    geom = VolumeGeometry.canonical((3, 3, 3), (1, 1, 1))
    vox = np.zeros((3, 3, 3), np.uint16)
    vox[1, 1, 1] = 13
    write_volume(LabelVolume(geom, vox), tmp_path / "l.nii.gz")
    vol = read_volume(tmp_path / "l.nii.gz", scheme=scheme)
    assert [scheme.name(i) for i in vol.present_ids()] == ["Liver"]


def test_scheme_check_on_load(tmp_path, scheme):
    geom = VolumeGeometry.canonical((2, 2, 2), (1, 1, 1))
    vox = np.zeros((2, 2, 2), np.uint16)
    vox[0, 0, 0] = 11  # unassigned id
    write_volume(LabelVolume(geom, vox), tmp_path / "x.nii")
    with pytest.raises(CorruptLabelError):
        read_volume(tmp_path / "x.nii", scheme=scheme)


def test_zero_2cube_payload(tmp_path):
    geom = VolumeGeometry.canonical((2, 2, 2), (1, 1, 1))
    p = tmp_path / "z.nii.gz"
    write_volume(LabelVolume(geom, np.zeros((2, 2, 2), np.uint16)), p)
    raw = gzip.decompress(p.read_bytes())
    assert struct.unpack("<i", raw[:4])[0] == 348
    assert raw[344:348] == b"n+1\x00"
    assert struct.unpack("<f", raw[108:112])[0] == 352.0
    assert struct.unpack("<h", raw[70:72])[0] == 512  # uint16
    assert raw[352:] == b"\x00\x00" * 8


def test_uncompressed_when_not_gz(tmp_path):
    geom = VolumeGeometry.canonical((2, 2, 2), (1, 1, 1))
    p = tmp_path / "z.nii"
    write_volume(LabelVolume(geom, np.zeros((2, 2, 2), np.uint16)), p)
    assert p.read_bytes()[:4] == struct.pack("<i", 348)


def test_pixdim_passthrough(tmp_path):
    geom = VolumeGeometry.canonical((3, 4, 5), (2, 2, 3))
    p = tmp_path / "ct.nii.gz"
    write_volume(IntensityVolume(geom, np.zeros((3, 4, 5), np.float32)), p)
    raw = gzip.decompress(p.read_bytes())
    assert struct.unpack("<8f", raw[76:108])[1:4] == (2.0, 2.0, 3.0)
    assert read_header(p)["pixdim"][1:4] == (2.0, 2.0, 3.0)


def test_unwritable_path(tmp_path):
    geom = VolumeGeometry.canonical((2, 2, 2), (1, 1, 1))
    with pytest.raises(OSError):
        write_volume(LabelVolume(geom, np.zeros((2, 2, 2), np.uint16)), tmp_path / "missing" / "x.nii")


def test_gzip_output_is_deterministic(tmp_path):
    geom = VolumeGeometry.canonical((4, 4, 4), (1, 1, 1))
    vol = LabelVolume(geom, np.arange(64, dtype=np.uint16).reshape(4, 4, 4))
    write_volume(vol, tmp_path / "a.nii.gz")
    write_volume(vol, tmp_path / "b.nii.gz")
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()


def test_phantom_round_trip(tmp_path, bundle_phantoms):
    for n, ph in enumerate(bundle_phantoms[:3]):
        for key in ("truth", "corrupted", "intensity"):
            p = tmp_path / f"{n}_{key}.nii.gz"
            write_volume(ph[key], p)
            back = read_volume(p, ph[key].kind)
            assert back == ph[key]


# --------------------------------------------------------------------------- #
# orientation


def _signed_permutations():
    for perm in itertools.permutations(range(3)):
        for flips in itertools.product((False, True), repeat=3):
            yield perm, flips


def _store(canon, canon_affine, perm, flips):
    """Re-express a canonical volume with stored axis a = canonical axis perm[a], optionally flipped."""
    stored = np.transpose(canon, perm)
    M = np.zeros((4, 4))
    M[3, 3] = 1
    for a in range(3):
        M[perm[a], a] = 1.0
    for a, f in enumerate(flips):
        if f:
            stored = np.flip(stored, axis=a)
            n = stored.shape[a]
            col = M[:, a].copy()
            M[:3, 3] += col[:3] * (n - 1)
            M[:, a] = -col
    return np.ascontiguousarray(stored), canon_affine @ M


def test_all_48_orientations_reorient_to_the_same_volume(tmp_path):
    rng = np.random.default_rng(0)
    canon = rng.integers(0, 50, size=(3, 4, 5)).astype(np.uint16)
    spacing = (1.0, 2.0, 3.0)
    aff = canonical_affine(canon.shape, spacing, origin=(5.0, -7.0, 11.0))
    codes = set()
    for n, (perm, flips) in enumerate(_signed_permutations()):
        stored, saff = _store(canon, aff, perm, flips)
        codes.add(orientation_code(saff))
        sp = tuple(spacing[perm[a]] for a in range(3))
        data, out_aff, out_sp = reorient_to_canonical(stored, saff, sp)
        np.testing.assert_array_equal(data, canon)
        np.testing.assert_allclose(out_aff, aff, atol=1e-12)
        assert out_sp == spacing
        # and through a file
        p = tmp_path / f"o{n}.nii"
        write_volume(LabelVolume(VolumeGeometry(stored.shape, sp, saff), stored), p)
        back = read_volume(p)
        np.testing.assert_array_equal(back.voxels, canon)
        np.testing.assert_allclose(back.geometry.affine, aff, atol=1e-5)
    assert len(codes) == 48


def test_reorientation_is_idempotent():
    rng = np.random.default_rng(1)
    data = rng.integers(0, 9, size=(2, 3, 4))
    aff = np.array([[0, 0, 2.0, 1], [3.0, 0, 0, 2], [0, -1.0, 0, 3], [0, 0, 0, 1]])
    once = reorient_to_canonical(data, aff, (3.0, 1.0, 2.0))
    twice = reorient_to_canonical(*once)
    np.testing.assert_array_equal(once[0], twice[0])
    np.testing.assert_array_equal(once[1], twice[1])
    assert once[2] == twice[2]


@given(st.tuples(*[st.floats(0.25, 5.0)] * 3), st.tuples(*[st.integers(-50, 50)] * 3),
       st.tuples(*[st.integers(0, 9)] * 3))
def test_mm_position_matches_spacing_for_axis_aligned(spacing, origin, ijk):
    geom = VolumeGeometry.canonical((10, 10, 10), spacing, origin)
    world = geom.voxel_to_world(ijk)
    expect = [origin[a] - spacing[a] * ijk[a] for a in range(3)]  # LPI: +index runs against RAS
    np.testing.assert_allclose(world, expect, rtol=0, atol=1e-9)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
def test_round_trip_property(nx, ny, nz, seed):
    import tempfile
    from pathlib import Path
    rng = np.random.default_rng(seed)
    geom = VolumeGeometry.canonical((nx, ny, nz), tuple(rng.choice([0.5, 1.0, 2.5], 3)), (1.0, 2.0, 3.0))
    lab = LabelVolume(geom, rng.integers(0, 145, (nx, ny, nz)))
    hu = IntensityVolume(geom, rng.normal(0, 500, (nx, ny, nz)))
    with tempfile.TemporaryDirectory() as d:
        for vol, name in ((lab, "l.nii.gz"), (hu, "i.nii")):
            write_volume(vol, Path(d) / name)
            assert read_volume(Path(d) / name, vol.kind) == vol


def test_geometry_invariants():
    with pytest.raises(ValueError):
        VolumeGeometry((2, 2, 2), (1, 0, 1), np.eye(4))
    with pytest.raises(ValueError):
        VolumeGeometry((2, 2, 2), (1, 1, 1), np.diag([1, 1, 0, 1]))
    with pytest.raises(ShapeError):
        LabelVolume(VolumeGeometry.canonical((2, 2, 2), (1, 1, 1)), np.zeros((2, 2, 3), np.uint16))
    vol = LabelVolume(VolumeGeometry.canonical((2, 2, 2), (1, 1, 1)), np.zeros((2, 2, 2), np.uint16))
    with pytest.raises(ValueError):
        vol.voxels[0, 0, 0] = 1  # immutable


# --------------------------------------------------------------------------- #
# slice-count filter


def _header_only(path, n_slices, axial_axis=2):
    dims = [4, 4, 4]
    dims[axial_axis] = n_slices
    sform = [list(r) for r in RAS_SFORM]
    if axial_axis != 2:  # put the superior axis on a different grid axis
        sform = [[0.0] * 4 for _ in range(3)]
        others = [a for a in range(3) if a != axial_axis]
        sform[0][others[0]] = 1.0
        sform[1][others[1]] = 1.0
        sform[2][axial_axis] = 1.0
    path.write_bytes(gzip.compress(hand_header(tuple(dims), 512, 16, sform=sform)))  # no voxel data at all


def test_slice_count_filter_boundaries(tmp_path):
    _header_only(tmp_path / "a350.nii.gz", 350)
    _header_only(tmp_path / "b336.nii.gz", 336)
    _header_only(tmp_path / "c400.nii.gz", 400)
    _header_only(tmp_path / "d401.nii.gz", 401)
    _header_only(tmp_path / "e335.nii.gz", 335)
    _header_only(tmp_path / "f_axial_first.nii.gz", 350, axial_axis=0)
    (tmp_path / "g_broken.nii").write_bytes(b"not a header")
    (tmp_path / "notes.txt").write_text("ignored")
    scan = slice_count_filter(tmp_path, 336, 400)
    names = lambda ps: [p.name for p in ps]  # noqa: E731
    assert names(scan.accepted) == ["a350.nii.gz", "b336.nii.gz", "c400.nii.gz", "f_axial_first.nii.gz"]
    assert names(scan.rejected) == ["d401.nii.gz", "e335.nii.gz"]
    assert [p.name for p, _ in scan.errors] == ["g_broken.nii"]
    doc = scan.as_dict()
    assert set(doc) == {"accepted", "rejected", "error"}
