"""Midsagittal plane fitting, body-part boxes and surface distances."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateFitError
from .labelscheme import BODY_PARTS
from .volgrid import LEFT, SUPERIOR

LEFT_RIGHT_AXIS = np.array([1.0, 0.0, 0.0])
DEGENERATE_RATIO = 1e-12


@dataclass(frozen=True)
class Hyperplane:
    """The plane {p : normal . p = offset}, world mm; normal points to patient left."""

    normal: tuple
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        if n.shape != (3,) or abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError(f"plane normal must be a unit 3-vector, got {self.normal}")
        object.__setattr__(self, "normal", tuple(float(v) for v in n))
        object.__setattr__(self, "offset", float(self.offset))

    def signed_distance(self, points):
        return np.asarray(points, dtype=float) @ np.asarray(self.normal) - self.offset

    def to_dict(self):
        return {"normal": list(self.normal), "offset": self.offset}


def fit_plane(points) -> Hyperplane:
    """Total-least-squares plane through `points` (smallest-eigenvalue normal)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateFitError(f"need at least 3 points, got {len(pts)}")
    mean = pts.mean(axis=0)
    centered = pts - mean
    evals, evecs = np.linalg.eigh(centered.T @ centered / len(pts))
    if evals[2] <= 0 or evals[1] <= DEGENERATE_RATIO * evals[2]:
        raise DegenerateFitError("points are collinear or coincident")
    normal = evecs[:, 0]
    # orient toward patient left; fall back to superior/anterior for planes parallel to that axis
    for ref in (LEFT, SUPERIOR, np.array([0.0, 1.0, 0.0])):
        s = normal @ ref
        if abs(s) > 1e-12:
            if s < 0:
                normal = -normal
            break
    normal = normal / np.linalg.norm(normal)
    return Hyperplane(tuple(normal), float(normal @ mean))


def plane_residual(plane: Hyperplane, points) -> float:
    """Root-mean-square point-to-plane distance."""
    d = plane.signed_distance(np.asarray(points, dtype=float).reshape(-1, 3))
    return float(np.sqrt(np.mean(d * d)))


def plane_axis_deviation(plane: Hyperplane, axis=LEFT_RIGHT_AXIS) -> float:
    """Angle in degrees (0..90) between the plane normal and `axis`, ignoring sign."""
    axis = np.asarray(axis, dtype=float)
    c = abs(float(np.asarray(plane.normal) @ axis)) / np.linalg.norm(axis)
    return float(np.degrees(np.arccos(min(1.0, c))))


@dataclass(frozen=True)
class BodyPartBox:
    part: str
    lo: tuple
    hi: tuple

    def contains(self, points, superior_only=False):
        """Boolean per point; with `superior_only` only the superior extent is tested."""
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        if superior_only:
            s = p @ SUPERIOR
            return (s >= lo @ SUPERIOR) & (s <= hi @ SUPERIOR)
        return np.all((p >= lo) & (p <= hi), axis=1)

    def to_dict(self):
        return {"part": self.part, "lo": list(self.lo), "hi": list(self.hi)}


def _part_order(part):
    return (BODY_PARTS.index(part) if part in BODY_PARTS else len(BODY_PARTS), part)


def label_world_points(volume, label_ids):
    """World coordinates of every voxel carrying one of `label_ids`."""
    chunks = []
    for lid in label_ids:
        sl = volume.label_slices.get(int(lid))
        if sl is None:
            continue
        idx = np.argwhere(volume.voxels[sl] == lid) + np.array([s.start for s in sl])
        chunks.append(volume.geometry.voxel_to_world(idx))
    return np.concatenate(chunks) if chunks else np.zeros((0, 3))


def body_part_boxes(volume, scheme, margin_mm=20.0) -> list:
    """Bounding box of each body part's anchor voxels, padded by half a voxel plus `margin_mm`."""
    if margin_mm < 0:
        raise ValueError("margin_mm must be >= 0")
    half = volume.geometry.half_voxel_extent()
    boxes = []
    for part in sorted(scheme.anchors_of, key=_part_order):
        pts = label_world_points(volume, sorted(scheme.anchors_of[part]))
        if len(pts) == 0:
            continue
        lo = pts.min(axis=0) - half - margin_mm
        hi = pts.max(axis=0) + half + margin_mm
        boxes.append(BodyPartBox(part, tuple(float(v) for v in lo), tuple(float(v) for v in hi)))
    return boxes


@dataclass(frozen=True)
class SurfaceDistance:
    mean_symmetric: float
    a_to_b: float
    b_to_a: float


_FACE = ndimage.generate_binary_structure(3, 1)


def boundary(mask):
    """Mask voxels with a 6-neighbour outside the mask or on the grid edge."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_FACE, border_value=0)


def surface_distance(a, b, geometry):
    """Mean surface distances (mm) between two masks; None if either is empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if not a.any() or not b.any():
        return None
    union = a | b
    box = []
    for ax in range(3):
        other = tuple(x for x in range(3) if x != ax)
        hit = np.flatnonzero(union.any(axis=other))
        box.append(slice(max(0, hit[0] - 1), min(union.shape[ax], hit[-1] + 2)))
    box = tuple(box)
    ba, bb = boundary(a[box]), boundary(b[box])
    spacing = geometry.spacing
    d_ab = ndimage.distance_transform_edt(~bb, sampling=spacing)[ba]
    d_ba = ndimage.distance_transform_edt(~ba, sampling=spacing)[bb]
    m_ab, m_ba = float(d_ab.mean()), float(d_ba.mean())
    return SurfaceDistance((m_ab + m_ba) / 2.0, m_ab, m_ba)
