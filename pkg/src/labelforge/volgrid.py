"""Volume data model and NIfTI-1 (.nii / .nii.gz) reading and writing.

World coordinates follow the NIfTI convention (RAS+: +x toward patient right,
+y anterior, +z superior).  Every volume read from disk is reoriented so that
grid axis 0 runs toward patient left, axis 1 toward posterior and axis 2
toward inferior ("LPI"); code elsewhere that needs a side or a height goes
through :data:`LEFT` / :data:`SUPERIOR` and the affine, never through raw
indices.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CorruptLabelError, ShapeError, UnsupportedFormatError, VolumeFormatError

LEFT = np.array([-1.0, 0.0, 0.0])
POSTERIOR = np.array([0.0, -1.0, 0.0])
SUPERIOR = np.array([0.0, 0.0, 1.0])
CANONICAL_CODE = "LPI"

_AXIS_LETTERS = (("L", "R"), ("P", "A"), ("I", "S"))

HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1\x00"

# (name, struct code); order and sizes are the NIfTI-1 header layout.
_HEADER_FIELDS = [
    ("sizeof_hdr", "i"), ("data_type", "10s"), ("db_name", "18s"), ("extents", "i"),
    ("session_error", "h"), ("regular", "c"), ("dim_info", "B"), ("dim", "8h"),
    ("intent_p1", "f"), ("intent_p2", "f"), ("intent_p3", "f"), ("intent_code", "h"),
    ("datatype", "h"), ("bitpix", "h"), ("slice_start", "h"), ("pixdim", "8f"),
    ("vox_offset", "f"), ("scl_slope", "f"), ("scl_inter", "f"), ("slice_end", "h"),
    ("slice_code", "B"), ("xyzt_units", "B"), ("cal_max", "f"), ("cal_min", "f"),
    ("slice_duration", "f"), ("toffset", "f"), ("glmax", "i"), ("glmin", "i"),
    ("descrip", "80s"), ("aux_file", "24s"), ("qform_code", "h"), ("sform_code", "h"),
    ("quatern_b", "f"), ("quatern_c", "f"), ("quatern_d", "f"),
    ("qoffset_x", "f"), ("qoffset_y", "f"), ("qoffset_z", "f"),
    ("srow_x", "4f"), ("srow_y", "4f"), ("srow_z", "4f"),
    ("intent_name", "16s"), ("magic", "4s"),
]
_HEADER_FMT = "".join(code for _, code in _HEADER_FIELDS)
assert struct.calcsize("<" + _HEADER_FMT) == HEADER_SIZE

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
    1024: np.dtype(np.int64),
    1280: np.dtype(np.uint64),
}
_DTYPE_CODES = {v: k for k, v in DATATYPES.items()}

LABEL_INTEGER_TOL = 1e-6


def axis_directions(affine):
    """For each grid axis, the (world axis, sign) it points along most strongly."""
    lin = np.asarray(affine, dtype=float)[:3, :3]
    weights = np.abs(lin / np.linalg.norm(lin, axis=0))
    out = [None, None, None]
    for _ in range(3):
        w, j = np.unravel_index(np.argmax(weights), weights.shape)
        out[j] = (int(w), 1 if lin[w, j] > 0 else -1)
        weights[w, :] = -1.0
        weights[:, j] = -1.0
    return out


def orientation_code(affine) -> str:
    return "".join(_AXIS_LETTERS[w][s > 0] for w, s in axis_directions(affine))


def canonical_affine(dims, spacing, origin=(0.0, 0.0, 0.0)):
    """LPI affine whose voxel (0, 0, 0) sits at `origin` (world mm)."""
    aff = np.diag([-float(spacing[0]), -float(spacing[1]), -float(spacing[2]), 1.0])
    aff[:3, 3] = origin
    return aff


@dataclass(frozen=True, eq=False)
class VolumeGeometry:
    dims: tuple
    spacing: tuple
    affine: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        affine = np.array(self.affine, dtype=np.float64)
        if len(dims) != 3 or min(dims) < 1:
            raise ShapeError(f"dims must be 3 positive integers, got {self.dims}")
        if len(spacing) != 3 or min(spacing) <= 0:
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        if affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if abs(np.linalg.det(affine[:3, :3])) == 0:
            raise ValueError("affine is singular")
        affine.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @classmethod
    def canonical(cls, dims, spacing, origin=(0.0, 0.0, 0.0)):
        return cls(dims, spacing, canonical_affine(dims, spacing, origin))

    @property
    def orientation_code(self) -> str:
        return orientation_code(self.affine)

    @property
    def voxel_volume_mm3(self) -> float:
        return float(np.prod(self.spacing))

    def voxel_to_world(self, ijk):
        ijk = np.asarray(ijk, dtype=np.float64)
        return ijk @ self.affine[:3, :3].T + self.affine[:3, 3]

    def superior_mm(self, ijk):
        return self.voxel_to_world(ijk) @ SUPERIOR

    def half_voxel_extent(self):
        """Half of a voxel's world-axis-aligned extent, per world axis."""
        return 0.5 * np.abs(self.affine[:3, :3]).sum(axis=1)

    def matches(self, other, atol=1e-5) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, atol=atol)
            and np.allclose(self.affine, other.affine, atol=atol)
        )

    def __eq__(self, other):
        if not isinstance(other, VolumeGeometry):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.affine, other.affine)
        )

    def __repr__(self):
        return f"VolumeGeometry(dims={self.dims}, spacing={self.spacing}, orientation={self.orientation_code!r})"


def _frozen(arr):
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class LabelVolume:
    geometry: VolumeGeometry
    voxels: np.ndarray

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.shape != self.geometry.dims:
            raise ShapeError(f"voxel array shape {vox.shape} != dims {self.geometry.dims}")
        if vox.dtype != np.uint16:
            if not np.issubdtype(vox.dtype, np.integer):
                raise CorruptLabelError(f"label voxels must be integers, got {vox.dtype}")
            if vox.size and (vox.min() < 0 or vox.max() > 65535):
                raise CorruptLabelError("label ids must fit in 16 bits")
        object.__setattr__(self, "voxels", _frozen(np.array(vox, dtype=np.uint16, order="C")))

    kind = "label"

    def with_voxels(self, voxels) -> LabelVolume:
        return LabelVolume(self.geometry, voxels)

    def mask(self, label_id):
        return self.voxels == label_id

    def count(self, label_id) -> int:
        sl = self.label_slices.get(int(label_id))
        if sl is None:
            return 0
        return int(np.count_nonzero(self.voxels[sl] == label_id))

    @cached_property
    def label_slices(self):
        """Bounding-box slices of every present non-background label."""
        found = ndimage.find_objects(self.voxels.astype(np.int32))
        return {i + 1: sl for i, sl in enumerate(found) if sl is not None}

    def present_ids(self):
        return sorted(self.label_slices)

    def counts(self):
        n = np.bincount(self.voxels.ravel())
        return {int(i): int(n[i]) for i in np.flatnonzero(n)}

    def validate(self, scheme):
        unknown = [i for i in np.unique(self.voxels).tolist() if i not in scheme]
        if unknown:
            raise CorruptLabelError(f"label ids {unknown} are not in the label scheme")
        return self

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.voxels, other.voxels)


@dataclass(frozen=True, eq=False)
class IntensityVolume:
    geometry: VolumeGeometry
    voxels: np.ndarray

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.shape != self.geometry.dims:
            raise ShapeError(f"voxel array shape {vox.shape} != dims {self.geometry.dims}")
        object.__setattr__(self, "voxels", _frozen(np.array(vox, dtype=np.float32, order="C")))

    kind = "intensity"

    def with_voxels(self, voxels) -> IntensityVolume:
        return IntensityVolume(self.geometry, voxels)

    def __eq__(self, other):
        if not isinstance(other, IntensityVolume):
            return NotImplemented
        return self.geometry == other.geometry and np.array_equal(self.voxels, other.voxels)


# --------------------------------------------------------------------------- #
# reorientation

def reorient_to_canonical(data, affine, spacing):
    """Transpose/flip `data` so its grid is LPI; returns (data, affine, spacing)."""
    dirs = axis_directions(affine)
    perm = [0, 0, 0]
    for j, (w, _) in enumerate(dirs):
        perm[w] = j
    out = np.transpose(data, perm)
    # new index n relates to old index o by o = T @ n
    T = np.zeros((4, 4))
    T[3, 3] = 1.0
    for t in range(3):
        j = perm[t]
        if dirs[j][1] > 0:
            out = np.flip(out, axis=t)
            T[j, t] = -1.0
            T[j, 3] = data.shape[j] - 1
        else:
            T[j, t] = 1.0
    new_affine = np.asarray(affine, dtype=np.float64) @ T
    new_spacing = tuple(spacing[perm[t]] for t in range(3))
    return np.ascontiguousarray(out), new_affine, new_spacing


# --------------------------------------------------------------------------- #
# quaternion <-> matrix (qform)

def quaternion_to_affine(b, c, d, qfac, pixdim, offset):
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    R = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    qfac = -1.0 if qfac < 0 else 1.0
    zooms = np.array([pixdim[0], pixdim[1], pixdim[2] * qfac], dtype=np.float64)
    aff = np.eye(4)
    aff[:3, :3] = R * zooms
    aff[:3, 3] = offset
    return aff


def affine_to_quaternion(affine):
    """Returns (b, c, d, qfac) for the rotation part of an orthogonal affine."""
    lin = np.asarray(affine, dtype=np.float64)[:3, :3]
    R = lin / np.linalg.norm(lin, axis=0)
    qfac = 1.0
    if np.linalg.det(R) < 0:
        qfac = -1.0
        R = R.copy()
        R[:, 2] = -R[:, 2]
    r11, r12, r13 = R[0]
    r21, r22, r23 = R[1]
    r31, r32, r33 = R[2]
    a = r11 + r22 + r33 + 1.0
    if a > 0.5:
        a = 0.5 * np.sqrt(a)
        b = 0.25 * (r32 - r23) / a
        c = 0.25 * (r13 - r31) / a
        d = 0.25 * (r21 - r12) / a
    else:
        xd = 1.0 + r11 - (r22 + r33)
        yd = 1.0 + r22 - (r11 + r33)
        zd = 1.0 + r33 - (r11 + r22)
        if xd > 1.0:
            b = 0.5 * np.sqrt(xd)
            c = 0.25 * (r12 + r21) / b
            d = 0.25 * (r13 + r31) / b
            a = 0.25 * (r32 - r23) / b
        elif yd > 1.0:
            c = 0.5 * np.sqrt(yd)
            b = 0.25 * (r12 + r21) / c
            d = 0.25 * (r23 + r32) / c
            a = 0.25 * (r13 - r31) / c
        else:
            d = 0.5 * np.sqrt(zd)
            b = 0.25 * (r13 + r31) / d
            c = 0.25 * (r23 + r32) / d
            a = 0.25 * (r21 - r12) / d
        if a < 0:
            b, c, d = -b, -c, -d
    return float(b), float(c), float(d), qfac


# --------------------------------------------------------------------------- #
# header

def parse_header(raw: bytes) -> dict:
    """Decode a 348-byte NIfTI-1 header; endianness from the sizeof_hdr field."""
    if len(raw) < HEADER_SIZE:
        raise VolumeFormatError(f"header truncated ({len(raw)} bytes)")
    raw = raw[:HEADER_SIZE]
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        raise VolumeFormatError("sizeof_hdr is not 348 in either byte order; not a NIfTI-1 file")
    values = struct.unpack(endian + _HEADER_FMT, raw)
    hdr = {"endian": endian}
    pos = 0
    for name, code in _HEADER_FIELDS:
        n = int(code[:-1]) if code[:-1].isdigit() and code[-1] != "s" else 1
        if n == 1:
            hdr[name] = values[pos]
        else:
            hdr[name] = tuple(values[pos:pos + n])
        pos += n
    if hdr["magic"] != NIFTI_MAGIC:
        raise UnsupportedFormatError(f"magic {hdr['magic']!r} is not single-file NIfTI-1 ('n+1')")
    return hdr


def header_affine(hdr) -> np.ndarray:
    """sform when its code > 0, else qform, else a pixdim diagonal."""
    if hdr["sform_code"] > 0:
        aff = np.eye(4)
        aff[0] = hdr["srow_x"]
        aff[1] = hdr["srow_y"]
        aff[2] = hdr["srow_z"]
        return aff
    pixdim = [float(p) if p > 0 else 1.0 for p in hdr["pixdim"][1:4]]
    if hdr["qform_code"] > 0:
        return quaternion_to_affine(
            hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"], hdr["pixdim"][0], pixdim,
            (hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]),
        )
    return np.diag(pixdim + [1.0])


def header_dims(hdr):
    dim = hdr["dim"]
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d != 1 for d in dim[4:ndim + 1]):
        raise ShapeError(f"expected a 3-D volume, header dim is {dim[:max(1, min(ndim, 7)) + 1]}")
    dims = tuple(int(d) for d in dim[1:4])
    if min(dims) < 1:
        raise ShapeError(f"non-positive dimension in {dims}")
    return dims


def _open_bytes(path, n=None) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        lead = fh.read(2)
    opener = gzip.open if lead == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read() if n is None else fh.read(n)


def read_header(path) -> dict:
    return parse_header(_open_bytes(path, HEADER_SIZE))


def read_volume(path, expected_kind="label", scheme=None):
    """Read a NIfTI-1 file into a canonical (LPI) LabelVolume or IntensityVolume.

    Data are rescaled by scl_slope/scl_inter when set.  Float-stored label
    files are accepted only if every value is within 1e-6 of an integer.
    When `scheme` is given, label ids are checked against it.
    """
    if expected_kind not in ("label", "intensity"):
        raise ValueError(f"expected_kind must be 'label' or 'intensity', got {expected_kind!r}")
    raw = _open_bytes(path)
    hdr = parse_header(raw)
    dims = header_dims(hdr)
    if hdr["datatype"] not in DATATYPES:
        raise UnsupportedFormatError(f"unsupported NIfTI datatype code {hdr['datatype']}")
    dtype = DATATYPES[hdr["datatype"]].newbyteorder(hdr["endian"])
    offset = int(hdr["vox_offset"])
    count = int(np.prod(dims))
    if len(raw) < offset + count * dtype.itemsize:
        raise VolumeFormatError(f"{path}: voxel data truncated")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(dims, order="F").astype(dtype.newbyteorder("="))

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0 and (slope != 1.0 or (np.isfinite(inter) and inter != 0)):
        data = data.astype(np.float64) * slope + (inter if np.isfinite(inter) else 0.0)

    affine = header_affine(hdr)
    spacing = tuple(abs(float(p)) for p in hdr["pixdim"][1:4])
    if min(spacing) <= 0:
        spacing = tuple(float(s) for s in np.linalg.norm(affine[:3, :3], axis=0))
    data, affine, spacing = reorient_to_canonical(data, affine, spacing)
    geometry = VolumeGeometry(dims=data.shape, spacing=spacing, affine=affine)

    if expected_kind == "intensity":
        return IntensityVolume(geometry, data)

    if np.issubdtype(data.dtype, np.floating):
        if not np.all(np.isfinite(data)):
            raise CorruptLabelError(f"{path}: non-finite values in label file")
        rounded = np.rint(data)
        if np.any(np.abs(data - rounded) > LABEL_INTEGER_TOL):
            raise CorruptLabelError(f"{path}: non-integer values in label file")
        data = rounded
    if data.size and (data.min() < 0 or data.max() > 65535):
        raise CorruptLabelError(f"{path}: label ids outside 0..65535")
    vol = LabelVolume(geometry, data.astype(np.uint16))
    if scheme is not None:
        vol.validate(scheme)
    return vol


def build_header(volume) -> bytes:
    geom = volume.geometry
    dtype = volume.voxels.dtype
    b, c, d, qfac = affine_to_quaternion(geom.affine)
    fields = {
        "sizeof_hdr": HEADER_SIZE, "data_type": b"", "db_name": b"", "extents": 0,
        "session_error": 0, "regular": b"r", "dim_info": 0,
        "dim": (3, *geom.dims, 1, 1, 1, 1),
        "intent_p1": 0.0, "intent_p2": 0.0, "intent_p3": 0.0, "intent_code": 0,
        "datatype": _DTYPE_CODES[np.dtype(dtype.type)], "bitpix": dtype.itemsize * 8,
        "slice_start": 0, "pixdim": (qfac, *geom.spacing, 1.0, 0.0, 0.0, 0.0),
        "vox_offset": float(HEADER_SIZE + 4), "scl_slope": 1.0, "scl_inter": 0.0,
        "slice_end": 0, "slice_code": 0, "xyzt_units": 2,  # mm, no time unit
        "cal_max": 0.0, "cal_min": 0.0, "slice_duration": 0.0, "toffset": 0.0,
        "glmax": 0, "glmin": 0, "descrip": volume.kind.encode(), "aux_file": b"",
        "qform_code": 1, "sform_code": 1, "quatern_b": b, "quatern_c": c, "quatern_d": d,
        "qoffset_x": geom.affine[0, 3], "qoffset_y": geom.affine[1, 3], "qoffset_z": geom.affine[2, 3],
        "srow_x": tuple(geom.affine[0]), "srow_y": tuple(geom.affine[1]), "srow_z": tuple(geom.affine[2]),
        "intent_name": b"", "magic": NIFTI_MAGIC,
    }
    flat = []
    for name, _ in _HEADER_FIELDS:
        v = fields[name]
        flat.extend(v if isinstance(v, tuple) else [v])
    return struct.pack("<" + _HEADER_FMT, *flat)


def write_volume(volume, path):
    """Write as NIfTI-1 (little-endian); gzip with a zeroed mtime if path ends in .gz."""
    path = Path(path)
    payload = volume.voxels.astype(volume.voxels.dtype.newbyteorder("<")).tobytes(order="F")
    raw = build_header(volume) + b"\x00" * 4 + payload
    if path.name.endswith(".gz"):
        raw = gzip.compress(raw, compresslevel=6, mtime=0)
    path.write_bytes(raw)


# --------------------------------------------------------------------------- #
# ingestion filter

@dataclass
class SliceScan:
    accepted: list
    rejected: list
    errors: list  # (path, message)

    def as_dict(self):
        return {
            "accepted": [str(p) for p in self.accepted],
            "rejected": [str(p) for p in self.rejected],
            "error": [{"path": str(p), "reason": m} for p, m in self.errors],
        }


def axial_slice_count(hdr) -> int:
    dims = header_dims(hdr)
    for j, (w, _) in enumerate(axis_directions(header_affine(hdr))):
        if w == 2:
            return dims[j]
    raise AssertionError("unreachable")


def volume_files(directory):
    directory = Path(directory)
    return sorted(p for p in directory.iterdir()
                  if p.is_file() and (p.name.endswith(".nii") or p.name.endswith(".nii.gz")))


def slice_count_filter(directory, min_slices=336, max_slices=400) -> SliceScan:
    """Partition volume files by axial slice count (inclusive bounds) from headers only."""
    scan = SliceScan([], [], [])
    for path in volume_files(directory):
        try:
            n = axial_slice_count(read_header(path))
        except (OSError, EOFError, VolumeFormatError, struct.error) as exc:
            scan.errors.append((path, str(exc)))
            continue
        (scan.accepted if min_slices <= n <= max_slices else scan.rejected).append(path)
    return scan
