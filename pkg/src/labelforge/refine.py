"""Rule-based refinement of dense label maps and the per-volume plausibility verdict.

Steps run in a fixed order: left/right split of paired structures, rib
counting, non-largest component suppression for structures that occur once,
restriction of labels to their body parts, and sex consistency.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .components import DEFAULT_CONNECTIVITY, components_of_mask, connected_components, keep_largest
from .errors import DegenerateFitError
from .geometry import Hyperplane, body_part_boxes, fit_plane, plane_axis_deviation
from .labelscheme import opposite_sex_labels
from .volgrid import SUPERIOR

log = logging.getLogger(__name__)

STEPS = ("left_right_split", "rib_counting", "cc_suppression", "area_restriction", "sex_consistency")


@dataclass(frozen=True)
class RefineConfig:
    connectivity: int = DEFAULT_CONNECTIVITY
    plane_deviation_max_deg: float = 20.0
    area_margin_mm: float = 20.0
    enabled_steps: tuple = STEPS
    # bind labels to the cranio-caudal extent of their body parts only
    area_superior_only: bool = True

    def __post_init__(self):
        if self.connectivity not in (6, 18, 26):
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        unknown = [s for s in self.enabled_steps if s not in STEPS]
        if unknown:
            raise ValueError(f"unknown refinement steps {unknown}; choose from {list(STEPS)}")
        object.__setattr__(self, "enabled_steps", tuple(s for s in STEPS if s in self.enabled_steps))
        if self.area_margin_mm < 0:
            raise ValueError("area_margin_mm must be >= 0")

    @classmethod
    def from_dict(cls, cfg: dict):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(cfg) - known
        if extra:
            raise ValueError(f"unknown refine config keys {sorted(extra)}")
        cfg = dict(cfg)
        if "enabled_steps" in cfg:
            cfg["enabled_steps"] = tuple(cfg["enabled_steps"])
        return cls(**cfg)

    def to_dict(self):
        d = asdict(self)
        d["enabled_steps"] = list(self.enabled_steps)
        return d


def load_refine_config(path) -> RefineConfig:
    return RefineConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Plausibility:
    rib_order_consistent: bool
    plane_deviation_deg: float | None
    verdict: str


@dataclass
class RefineReport:
    steps_run: list = field(default_factory=list)
    changes: dict = field(default_factory=dict)   # step -> {label_id: {lost, gained}}
    skipped: dict = field(default_factory=dict)   # step -> reason
    plane: Hyperplane | None = None
    plausibility: Plausibility | None = None

    @property
    def accepted(self):
        return self.plausibility is not None and self.plausibility.verdict == "accept"

    def to_dict(self):
        return {
            "steps_run": list(self.steps_run),
            "changes": {s: {str(k): v for k, v in sorted(c.items())} for s, c in self.changes.items()},
            "skipped": dict(self.skipped),
            "plane": self.plane.to_dict() if self.plane is not None else None,
            "plausibility": asdict(self.plausibility) if self.plausibility is not None else None,
        }


# --------------------------------------------------------------------------- #

def midline_points(volume, scheme, connectivity=DEFAULT_CONNECTIVITY):
    """Centroids of the largest component of each present vertebra and sternum part."""
    pts = []
    for lid in tuple(scheme.vertebrae) + tuple(scheme.sternum):
        big = connected_components(volume, lid, connectivity).largest()
        if big is not None:
            pts.append(big.centroid)
    return np.asarray(pts, dtype=float).reshape(-1, 3)


def fit_midline_plane(volume, scheme, connectivity=DEFAULT_CONNECTIVITY) -> Hyperplane:
    return fit_plane(midline_points(volume, scheme, connectivity))


def _is_left(plane, point):
    return float(plane.signed_distance(point)) >= 0.0


def _union_slices(volume, ids):
    boxes = [volume.label_slices[i] for i in ids if i in volume.label_slices]
    if not boxes:
        return None
    return tuple(slice(min(b[a].start for b in boxes), max(b[a].stop for b in boxes)) for a in range(3))


def _group_mask(volume, ids):
    sl = _union_slices(volume, ids)
    if sl is None:
        return None
    mask = np.zeros(volume.geometry.dims, dtype=bool)
    mask[sl] = np.isin(volume.voxels[sl], list(ids))
    return mask


def left_right_split(volume, scheme, plane, connectivity=DEFAULT_CONNECTIVITY):
    """Relabel each component of every merged left/right pair by its centroid's side."""
    vox = None
    for left, right in scheme.paired:
        mask = _group_mask(volume, (left, right))
        if mask is None:
            continue
        for comp in components_of_mask(mask, volume.geometry, connectivity):
            if vox is None:
                vox = volume.voxels.copy()
            vox.ravel()[comp.flat_indices()] = left if _is_left(plane, comp.centroid) else right
    return volume if vox is None else volume.with_voxels(vox)


def _height(point):
    return float(np.asarray(point) @ SUPERIOR)


def _rib_sides(volume, scheme, plane, connectivity):
    mask = _group_mask(volume, scheme.ribs)
    if mask is None:
        return None, [], []
    comps = components_of_mask(mask, volume.geometry, connectivity)
    left = [c for c in comps if _is_left(plane, c.centroid)]
    right = [c for c in comps if not _is_left(plane, c.centroid)]
    return mask, left[:12], right[:12]


def _orders(side):
    by_median = [c.component_id for c in sorted(side, key=lambda c: (-_height(c.median_point), c.component_id))]
    by_min = [c.component_id for c in sorted(side, key=lambda c: (-_height(c.min_point), c.component_id))]
    return by_median, by_min


def rib_order_consistent(volume, scheme, plane, connectivity=DEFAULT_CONNECTIVITY) -> bool:
    _, left, right = _rib_sides(volume, scheme, plane, connectivity)
    return all(a == b for a, b in (_orders(left), _orders(right)))


def rib_counting(volume, scheme, plane, connectivity=DEFAULT_CONNECTIVITY):
    """Renumber ribs 1..12 per side, top to bottom by median height.

    Components beyond the 12 largest on a side become background.  Returns
    (volume, consistent) where `consistent` says whether ordering by median
    point and by lowest point agree on both sides.
    """
    mask, left, right = _rib_sides(volume, scheme, plane, connectivity)
    if mask is None:
        return volume, True
    vox = volume.voxels.copy()
    vox[mask] = 0
    flat = vox.ravel()
    consistent = True
    for side, ids in ((left, scheme.ribs_left), (right, scheme.ribs_right)):
        by_median, by_min = _orders(side)
        consistent &= by_median == by_min
        comp_of = {c.component_id: c for c in side}
        for rank, cid in enumerate(by_median):
            flat[comp_of[cid].flat_indices()] = ids[rank]
    return volume.with_voxels(vox), bool(consistent)


def suppress_non_largest(volume, scheme, connectivity=DEFAULT_CONNECTIVITY):
    for lid in sorted(scheme.singleton):
        volume = keep_largest(volume, lid, connectivity)
    return volume


def restrict_to_body_parts(volume, scheme, boxes, superior_only=True):
    """Send voxels of part-bound labels outside the union of their parts' boxes to background.

    Labels bound to a part whose box is missing are left alone.
    """
    by_part = {b.part: b for b in boxes}
    vox = None
    for lid, parts in sorted(scheme.body_part_of.items()):
        sl = volume.label_slices.get(lid)
        if sl is None or any(p not in by_part for p in parts):
            continue
        idx = np.argwhere(volume.voxels[sl] == lid) + np.array([s.start for s in sl])
        pts = volume.geometry.voxel_to_world(idx)
        inside = np.zeros(len(pts), dtype=bool)
        for p in parts:
            inside |= by_part[p].contains(pts, superior_only)
        if inside.all():
            continue
        if vox is None:
            vox = volume.voxels.copy()
        out = idx[~inside]
        vox[out[:, 0], out[:, 1], out[:, 2]] = 0
    return volume if vox is None else volume.with_voxels(vox)


def enforce_sex_consistency(volume, scheme, meta):
    sex = getattr(meta, "sex", "unknown")
    if sex not in ("M", "F"):
        return volume
    banned = [i for i in sorted(opposite_sex_labels(scheme, sex)) if i in volume.label_slices]
    if not banned:
        return volume
    vox = volume.voxels.copy()
    vox[np.isin(vox, banned)] = 0
    return volume.with_voxels(vox)


def _delta(before, after):
    """{label: {"lost": n, "gained": n}} over voxels whose label changed."""
    changed = before != after
    if not changed.any():
        return {}
    lost = np.bincount(before[changed])
    gained = np.bincount(after[changed], minlength=lost.size)
    lost = np.pad(lost, (0, gained.size - lost.size))
    return {int(i): {"lost": int(lost[i]), "gained": int(gained[i])} for i in np.flatnonzero(lost + gained)}


def post_process(volume, scheme, meta=None, config=None):
    """Run the enabled refinement steps in canonical order; returns (volume, RefineReport)."""
    config = config or RefineConfig()
    conn = config.connectivity
    report = RefineReport()
    try:
        plane = fit_midline_plane(volume, scheme, conn)
    except DegenerateFitError as exc:
        plane = None
        log.warning("midline plane unavailable: %s", exc)
    report.plane = plane

    rib_flag = None
    for step in config.enabled_steps:
        before = volume.voxels
        if step in ("left_right_split", "rib_counting") and plane is None:
            report.skipped[step] = "midline plane could not be fitted"
            continue
        if step == "left_right_split":
            volume = left_right_split(volume, scheme, plane, conn)
        elif step == "rib_counting":
            volume, rib_flag = rib_counting(volume, scheme, plane, conn)
        elif step == "cc_suppression":
            volume = suppress_non_largest(volume, scheme, conn)
        elif step == "area_restriction":
            boxes = body_part_boxes(volume, scheme, config.area_margin_mm)
            volume = restrict_to_body_parts(volume, scheme, boxes, config.area_superior_only)
        elif step == "sex_consistency":
            if getattr(meta, "sex", "unknown") not in ("M", "F"):
                report.skipped[step] = "patient sex unknown"
                continue
            volume = enforce_sex_consistency(volume, scheme, meta)
        report.steps_run.append(step)
        report.changes[step] = _delta(before, volume.voxels)

    deviation = plane_axis_deviation(plane) if plane is not None else None
    if rib_flag is None:
        rib_flag = rib_order_consistent(volume, scheme, plane, conn) if plane is not None else True
    ok = rib_flag and deviation is not None and deviation <= config.plane_deviation_max_deg
    report.plausibility = Plausibility(bool(rib_flag), deviation, "accept" if ok else "reject")
    return volume, report
