"""Synthetic labelled body phantoms with known ground truth and scripted corruptions.

The default layout lives on a (40, 32, 100) canonical grid at (3, 3, 4) mm:
grid axis 0 runs to patient left, axis 1 to posterior, axis 2 to inferior, so
k = 0 is the top of the head.  Structures are axis-aligned boxes, hollow
shells, or ellipsoids inscribed in a box; all index ranges are inclusive.

Corruptions (applied to the `corrupted` volume only, in list order)::

    {"type": "swap_sides", "pairs": [[15, 16], ...]}
    {"type": "permute_ribs"}
    {"type": "spurious_blob", "label": 13, "size": 2, "location": [i, j, k] | null}
    {"type": "out_of_region_blob", "label": 10, "part": "head", "size": 2}
    {"type": "wrong_sex_organ", "label": null, "size": 2}
    {"type": "rotate_column", "degrees": 45}
    {"type": "bend_rib", "side": "left", "index": 5, "drop": 5}

Blob sizes are cube edge lengths in voxels.  Blobs keep one empty voxel
between themselves and everything else, so each forms its own component.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PhantomSpecError
from .labelscheme import default_scheme, opposite_sex_labels
from .metrics import PatientMeta
from .volgrid import IntensityVolume, LabelVolume, VolumeGeometry

DEFAULT_DIMS = (40, 32, 100)
DEFAULT_SPACING = (3.0, 3.0, 4.0)
BONE_HU, SOFT_HU, AIR_HU = 400.0, 40.0, -1000.0
SHAPES = ("box", "shell", "ellipsoid")
CORRUPTIONS = ("swap_sides", "permute_ribs", "spurious_blob", "out_of_region_blob",
               "wrong_sex_organ", "rotate_column", "bend_rib")

# ids used by the default layout
SKULL, BRAIN, EYE_L, EYE_R = 99, 25, 130, 131
STERNUM_MANUBRIUM, STERNUM_CORPUS = 135, 92
HEART, LIVER, SPLEEN, STOMACH, PANCREAS, COLON = 105, 13, 26, 7, 14, 10
KIDNEY_L, KIDNEY_R, ADRENAL_L, ADRENAL_R = 15, 16, 27, 28
HIP_L, HIP_R, SACRUM, BLADDER, GONADS = 100, 101, 102, 17, 18
PROSTATE, UTEROCERVIX, UTERUS = 19, 20, 21


def _struct(name, label, lo, hi, shape="box"):
    return {"name": name, "label": int(label), "shape": shape, "lo": [int(v) for v in lo], "hi": [int(v) for v in hi]}


def default_structures(sex="M", offset=(0, 0, 0), rib_ends=None, scheme=None):
    """Declarative default layout, shifted by `offset` voxels.

    `rib_ends` gives per-rib (left outer i, right outer i) before the shift;
    it defaults to (31, 8) for every rib.
    """
    scheme = scheme or default_scheme()
    di, dj, dk = offset
    rib_ends = rib_ends or [(31, 8)] * 12
    out = []

    def add(name, label, lo, hi, shape="box"):
        out.append(_struct(name, label, (lo[0] + di, lo[1] + dj, lo[2] + dk),
                           (hi[0] + di, hi[1] + dj, hi[2] + dk), shape))

    add("skull", SKULL, (13, 8, 1), (26, 23, 14), "shell")
    add("brain", BRAIN, (14, 9, 2), (25, 22, 13))
    add("eyeball_left", EYE_L, (22, 5, 6), (24, 6, 7))
    add("eyeball_right", EYE_R, (15, 5, 6), (17, 6, 7))
    for n, vid in enumerate(scheme.vertebrae):
        add(scheme.name(vid).lower().replace(" ", "_"), vid, (18, 20, 16 + 3 * n), (21, 23, 17 + 3 * n))
    add("sternum_manubrium", STERNUM_MANUBRIUM, (18, 4, 37), (21, 5, 41))
    add("sternum_corpus", STERNUM_CORPUS, (18, 4, 43), (21, 5, 55))
    for r, (lid, rid) in enumerate(zip(scheme.ribs_left, scheme.ribs_right)):
        k = 38 + 3 * r
        left_end, right_end = rib_ends[r]
        add(f"rib_{r + 1}_left", lid, (23, 14, k), (left_end, 18, k))
        add(f"rib_{r + 1}_right", rid, (right_end, 14, k), (16, 18, k))
    add("heart", HEART, (17, 7, 44), (25, 12, 56), "ellipsoid")
    add("liver", LIVER, (6, 4, 64), (15, 11, 76), "ellipsoid")
    add("spleen", SPLEEN, (26, 8, 66), (32, 12, 72))
    add("stomach", STOMACH, (22, 4, 64), (28, 6, 70))
    add("adrenal_left", ADRENAL_L, (25, 16, 72), (27, 18, 73))
    add("adrenal_right", ADRENAL_R, (12, 16, 72), (14, 18, 73))
    add("pancreas", PANCREAS, (16, 13, 74), (24, 15, 76))
    add("kidney_left", KIDNEY_L, (25, 16, 75), (29, 19, 82), "ellipsoid")
    add("kidney_right", KIDNEY_R, (10, 16, 75), (14, 19, 82), "ellipsoid")
    add("colon", COLON, (10, 3, 80), (30, 5, 86))
    add("sacrum", SACRUM, (18, 20, 89), (21, 23, 94))
    add("hip_left", HIP_L, (24, 14, 88), (30, 22, 96))
    add("hip_right", HIP_R, (9, 14, 88), (15, 22, 96))
    add("bladder", BLADDER, (17, 5, 90), (22, 9, 95), "ellipsoid")
    add("gonads", GONADS, (18, 3, 97), (21, 4, 98))
    if sex == "M":
        add("prostate", PROSTATE, (18, 11, 96), (21, 13, 98))
    elif sex == "F":
        add("uterus", UTERUS, (17, 11, 91), (22, 14, 95))
        add("uterocervix", UTEROCERVIX, (17, 11, 97), (22, 14, 98))
    return out


def bundle_corruptions(sex):
    """The corruption bundle the refinement suite must undo exactly."""
    return [
        {"type": "swap_sides", "pairs": [[KIDNEY_L, KIDNEY_R], [HIP_L, HIP_R]]},
        {"type": "permute_ribs"},
        {"type": "spurious_blob", "label": LIVER, "size": 2, "location": None},
        {"type": "spurious_blob", "label": SPLEEN, "size": 2, "location": None},
        {"type": "out_of_region_blob", "label": COLON, "part": "head", "size": 2},
        {"type": "out_of_region_blob", "label": GONADS, "part": "thorax", "size": 2},
        {"type": "wrong_sex_organ", "label": None, "size": 2},
    ]


@dataclass
class PhantomSpec:
    dims: tuple = DEFAULT_DIMS
    spacing: tuple = DEFAULT_SPACING
    seed: int = 0
    sex: str = "M"
    age: float | None = None
    structures: list = field(default_factory=list)
    corruptions: list = field(default_factory=list)
    noise_hu: float = 0.0  # std of additive Gaussian HU noise; 0 keeps intensities exact

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.seed = int(self.seed)
        if not 0 <= self.seed < 2 ** 64:
            raise PhantomSpecError(f"seed must fit in 64 bits, got {self.seed}")
        if self.sex not in ("M", "F", "unknown"):
            raise PhantomSpecError(f"sex must be M, F or unknown, got {self.sex!r}")
        for s in self.structures:
            if s.get("shape", "box") not in SHAPES:
                raise PhantomSpecError(f"structure {s.get('name')!r}: unknown shape {s.get('shape')!r}")
        for c in self.corruptions:
            if c.get("type") not in CORRUPTIONS:
                raise PhantomSpecError(f"unknown corruption {c.get('type')!r}")

    def to_dict(self):
        return {"dims": list(self.dims), "spacing": list(self.spacing), "seed": self.seed, "sex": self.sex,
                "age": self.age, "noise_hu": self.noise_hu, "structures": self.structures,
                "corruptions": self.corruptions}

    @classmethod
    def from_dict(cls, cfg):
        known = set(cls.__dataclass_fields__)
        extra = set(cfg) - known
        if extra:
            raise PhantomSpecError(f"unknown phantom spec keys {sorted(extra)}")
        return cls(**cfg)


def load_phantom_spec(path) -> PhantomSpec:
    return PhantomSpec.from_dict(json.loads(Path(path).read_text()))


def save_phantom_spec(spec, path):
    Path(path).write_text(json.dumps(spec.to_dict(), indent=1) + "\n")


def default_phantom_spec(seed=0, sex=None, corruptions="bundle", scheme=None) -> PhantomSpec:
    """Seed-jittered default layout.  `corruptions` is "bundle", None, or an explicit list."""
    rng = np.random.default_rng((int(seed), 1))
    if sex is None:
        sex = str(rng.choice(["M", "F"]))
    offset = (int(rng.integers(-2, 3)), int(rng.integers(-1, 2)), int(rng.integers(0, 2)))
    rib_ends = [(int(rng.integers(29, 32)), int(rng.integers(8, 11))) for _ in range(12)]
    age = float(rng.integers(20, 81))
    if corruptions == "bundle":
        corruptions = bundle_corruptions(sex)
    return PhantomSpec(seed=seed, sex=sex, age=age,
                       structures=default_structures(sex, offset, rib_ends, scheme),
                       corruptions=list(corruptions or []))


# --------------------------------------------------------------------------- #

def _shape_mask(s, dims):
    lo, hi = np.asarray(s["lo"]), np.asarray(s["hi"])
    if len(lo) != 3 or len(hi) != 3 or (lo > hi).any():
        raise PhantomSpecError(f"structure {s.get('name')!r}: need lo <= hi with 3 coordinates each")
    if (lo < 0).any() or (hi >= np.asarray(dims)).any():
        raise PhantomSpecError(f"structure {s.get('name')!r} leaves the {dims} grid")
    mask = np.zeros(dims, dtype=bool)
    box = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
    shape = s.get("shape", "box")
    if shape == "box":
        mask[box] = True
    elif shape == "shell":
        mask[box] = True
        if (hi - lo >= 2).all():
            mask[tuple(slice(a + 1, b) for a, b in zip(lo, hi))] = False
    else:
        centre = (lo + hi) / 2.0
        radii = (hi - lo) / 2.0 + 0.5
        grids = np.ogrid[box]
        r2 = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, centre, radii))
        mask[box] = r2 <= 1.0
    return mask


def render_truth(spec: PhantomSpec) -> np.ndarray:
    vox = np.zeros(spec.dims, dtype=np.uint16)
    owner = {}
    for s in spec.structures:
        m = _shape_mask(s, spec.dims)
        clash = np.unique(vox[m])
        clash = clash[clash != 0]
        if clash.size:
            others = sorted({owner[int(c)] for c in clash})
            raise PhantomSpecError(f"structure {s.get('name')!r} overlaps {others}")
        vox[m] = s["label"]
        owner.setdefault(int(s["label"]), s.get("name", str(s["label"])))
    return vox


def _bone_ids(scheme):
    named = {"Skull", "Hip Left", "Hip Right", "Sacrum", "Sternum Corpus", "Sternum Manubrium"}
    ids = {i for i, n in scheme.entries.items() if n in named}
    return ids | set(scheme.vertebrae) | set(scheme.ribs)


def render_intensity(truth, scheme, noise_hu=0.0, rng=None):
    hu = np.full(truth.shape, SOFT_HU, dtype=np.float32)
    hu[truth == 0] = AIR_HU
    hu[np.isin(truth, sorted(_bone_ids(scheme)))] = BONE_HU
    if noise_hu > 0:
        hu += rng.normal(0.0, noise_hu, size=hu.shape).astype(np.float32)
    return hu


def _k_range(truth, ids):
    ks = np.flatnonzero(np.isin(truth, list(ids)).any(axis=(0, 1)))
    if ks.size == 0:
        return None
    return int(ks[0]), int(ks[-1])


def _place_blob(truth, vox, label, size, rng, k_range=None, location=None, tries=4000):
    """Drop a size^3 cube of `label` with a one-voxel empty moat; returns the corner used."""
    dims = np.asarray(vox.shape)
    size = int(size)
    if size < 1 or (size + 2 > dims).any():
        raise PhantomSpecError(f"blob size {size} does not fit the grid")

    def free(c):
        lo = np.maximum(c - 1, 0)
        hi = np.minimum(c + size + 1, dims)
        sl = tuple(slice(a, b) for a, b in zip(lo, hi))
        return not truth[sl].any() and not vox[sl].any()

    if location is not None:
        corner = np.asarray(location, dtype=int)
        if (corner < 0).any() or (corner + size > dims).any() or not free(corner):
            raise PhantomSpecError(f"blob at {list(corner)} is out of bounds or touches a structure")
    else:
        klo, khi = k_range if k_range is not None else (0, int(dims[2]) - 1)
        khi = min(khi, int(dims[2]) - size)
        corner = None
        for _ in range(tries):
            c = np.array([rng.integers(1, dims[0] - size), rng.integers(1, dims[1] - size),
                          rng.integers(max(klo, 1), max(khi, klo, 1) + 1)])
            if (c + size <= dims).all() and free(c):
                corner = c
                break
        if corner is None:
            raise PhantomSpecError(f"no free spot for a {size}-voxel blob of label {label}")
    vox[tuple(slice(a, a + size) for a in corner)] = label
    return [int(v) for v in corner]


def _rotate_sternum(vox, scheme, spacing, degrees):
    """Rotate the sternum about the vertebral column's cranio-caudal axis (right-handed, toward patient left)."""
    column = np.argwhere(np.isin(vox, list(scheme.vertebrae)))
    ids = list(scheme.sternum)
    sternum = np.isin(vox, ids)
    if column.size == 0 or not sternum.any():
        raise PhantomSpecError("rotate_column needs vertebrae and sternum")
    ci, cj = column[:, 0].mean(), column[:, 1].mean()
    sx, sy = spacing[0], spacing[1]
    th = math.radians(degrees)
    src = vox.copy()
    vox[sternum] = 0
    ii, jj = np.meshgrid(np.arange(vox.shape[0]), np.arange(vox.shape[1]), indexing="ij")
    x, y = (ii - ci) * sx, (jj - cj) * sy
    # inverse map: where did each target voxel come from
    xs = x * math.cos(th) + y * math.sin(th)
    ys = -x * math.sin(th) + y * math.cos(th)
    si = np.rint(xs / sx + ci).astype(int)
    sj = np.rint(ys / sy + cj).astype(int)
    inside = (si >= 0) & (si < vox.shape[0]) & (sj >= 0) & (sj < vox.shape[1])
    for k in range(vox.shape[2]):
        plane = src[:, :, k]
        if not np.isin(plane, ids).any():
            continue
        moved = np.zeros_like(plane)
        moved[inside] = plane[si[inside], sj[inside]]
        moved[~np.isin(moved, ids)] = 0
        hit = moved != 0
        if (vox[:, :, k][hit] != 0).any():
            raise PhantomSpecError(f"rotated sternum collides with another structure at slice {k}")
        vox[:, :, k][hit] = moved[hit]


def _bend_rib(vox, scheme, side, index, drop):
    ids = scheme.ribs_left if side == "left" else scheme.ribs_right
    if not 1 <= index <= 12:
        raise PhantomSpecError(f"rib index must be 1..12, got {index}")
    rib = np.argwhere(vox == ids[index - 1])
    if rib.size == 0:
        raise PhantomSpecError(f"rib {index} {side} absent")
    everything = np.argwhere(np.isin(vox, list(ids)))
    k = int(rib[:, 2].min())
    j0, j1 = int(rib[:, 1].min()), int(rib[:, 1].max())
    if side == "left":
        start, far = int(rib[:, 0].max()) + 1, int(everything[:, 0].max()) + 2
        bar = slice(start, far + 1)
    else:
        start, far = int(rib[:, 0].min()) - 1, int(everything[:, 0].min()) - 2
        bar = slice(far, start + 1)
    if far < 0 or far >= vox.shape[0] or k + drop >= vox.shape[2]:
        raise PhantomSpecError("bent rib leaves the grid")
    leg = (slice(far, far + 1), slice(j0, j1 + 1), slice(k + 1, k + drop + 1))
    ext = (bar, slice(j0, j1 + 1), slice(k, k + 1))
    for sl in (leg, ext):
        if vox[sl].any():
            raise PhantomSpecError("bent rib collides with another structure")
        vox[sl] = ids[index - 1]


def _part_k_range(truth, scheme, part):
    anchors = scheme.anchors_of.get(part)
    if not anchors:
        raise PhantomSpecError(f"unknown body part {part!r}")
    kr = _k_range(truth, anchors)
    if kr is None:
        raise PhantomSpecError(f"body part {part!r} has no anchors in this phantom")
    return kr


def apply_corruption(c, truth, vox, scheme, spec, rng):
    kind = c["type"]
    if kind == "swap_sides":
        src = vox.copy()
        for a, b in c.get("pairs", scheme.paired):
            vox[src == a] = b
            vox[src == b] = a
    elif kind == "permute_ribs":
        ribs = np.asarray(scheme.ribs)
        perm = rng.permutation(ribs)
        lut = np.arange(max(int(vox.max()), int(ribs.max())) + 1, dtype=np.uint16)
        lut[ribs] = perm
        vox[...] = lut[vox]
    elif kind == "spurious_blob":
        _place_blob(truth, vox, c["label"], c.get("size", 2), rng, location=c.get("location"))
    elif kind == "out_of_region_blob":
        _place_blob(truth, vox, c["label"], c.get("size", 2), rng, _part_k_range(truth, scheme, c["part"]))
    elif kind == "wrong_sex_organ":
        label = c.get("label")
        if label is None:
            if spec.sex not in ("M", "F"):
                raise PhantomSpecError("wrong_sex_organ needs a label when sex is unknown")
            label = min(opposite_sex_labels(scheme, spec.sex))
        _place_blob(truth, vox, label, c.get("size", 2), rng, _part_k_range(truth, scheme, "pelvis"))
    elif kind == "rotate_column":
        _rotate_sternum(vox, scheme, spec.spacing, float(c["degrees"]))
    elif kind == "bend_rib":
        _bend_rib(vox, scheme, c.get("side", "left"), int(c.get("index", 5)), int(c.get("drop", 5)))


def generate(spec: PhantomSpec, scheme=None) -> dict:
    """Render `spec`; returns {"truth", "corrupted", "intensity", "meta"}."""
    scheme = scheme or default_scheme()
    rng = np.random.default_rng(spec.seed)
    geom = VolumeGeometry.canonical(spec.dims, spec.spacing)
    truth = render_truth(spec)
    vox = truth.copy()
    for c in spec.corruptions:
        apply_corruption(c, truth, vox, scheme, spec, rng)
    hu = render_intensity(truth, scheme, spec.noise_hu, rng)
    meta = PatientMeta(f"phantom-{spec.seed}", spec.sex, spec.age, "negative")
    return {
        "truth": LabelVolume(geom, truth),
        "corrupted": LabelVolume(geom, vox),
        "intensity": IntensityVolume(geom, hu),
        "meta": meta,
    }
