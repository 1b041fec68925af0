"""Merging per-source predictions into one label map, plus rule-derived labels.

A source mapping file looks like::

    {"source_name": "abdomen_model", "precedence": 3, "id_map": {"1": 13, "2": 26}}

and a fusion manifest lists the sources (paths relative to the manifest)::

    {"sources": [{"volume": "abdomen.nii.gz", "mapping": "abdomen_map.json"}, ...]}
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .components import DEFAULT_CONNECTIVITY, connected_components
from .errors import DegenerateFitError, GeometryMismatchError, LabelforgeError, UnmappedLabelError
from .refine import fit_midline_plane, left_right_split
from .volgrid import SUPERIOR, LabelVolume

log = logging.getLogger(__name__)

SKULL_HU = (350.0, 3000.0)


@dataclass(frozen=True)
class SourceMapping:
    source_name: str
    id_map: dict
    precedence: int

    def __post_init__(self):
        object.__setattr__(self, "id_map", {int(k): int(v) for k, v in self.id_map.items()})
        object.__setattr__(self, "precedence", int(self.precedence))

    def validate(self, scheme):
        bad = sorted({t for t in self.id_map.values() if t not in scheme})
        if bad:
            raise LabelforgeError(f"source {self.source_name!r} maps to ids {bad} absent from the scheme")
        return self

    @classmethod
    def from_dict(cls, cfg):
        try:
            return cls(str(cfg["source_name"]), cfg["id_map"], cfg["precedence"])
        except KeyError as exc:
            raise LabelforgeError(f"source mapping missing key {exc}") from None

    def to_dict(self):
        return {"source_name": self.source_name, "precedence": self.precedence,
                "id_map": {str(k): v for k, v in sorted(self.id_map.items())}}


def load_source_mapping(path) -> SourceMapping:
    return SourceMapping.from_dict(json.loads(Path(path).read_text()))


def load_fusion_manifest(path):
    """[(volume path, mapping path), ...] with paths resolved against the manifest's folder."""
    path = Path(path)
    cfg = json.loads(path.read_text())
    base = path.parent
    out = []
    for n, src in enumerate(cfg.get("sources", [])):
        try:
            out.append((base / src["volume"], base / src["mapping"]))
        except (KeyError, TypeError):
            raise LabelforgeError(f"{path}: sources[{n}] needs 'volume' and 'mapping'") from None
    if not out:
        raise LabelforgeError(f"{path}: no sources listed")
    return out


def _lookup(volume, mapping):
    present = np.flatnonzero(np.bincount(volume.voxels.ravel()))
    unmapped = [int(i) for i in present if i != 0 and i not in mapping.id_map]
    if unmapped:
        raise UnmappedLabelError(mapping.source_name, unmapped)
    lut = np.zeros(int(present.max(initial=0)) + 1, dtype=np.uint16)
    for src, tgt in mapping.id_map.items():
        if src < lut.size and src != 0:
            lut[src] = tgt
    return lut[volume.voxels]


def fuse_sources(predictions, scheme, split_paired=True, connectivity=DEFAULT_CONNECTIVITY) -> LabelVolume:
    """Union per target label, written coarse tier to fine tier.

    Within a tier, a higher-precedence source wins contested voxels.  Paired
    structures are then split into sides with the midline plane when one can
    be fitted.
    """
    if not predictions:
        raise ValueError("no predictions to fuse")
    geom = predictions[0][0].geometry
    precedences = [m.precedence for _, m in predictions]
    if len(set(precedences)) != len(precedences):
        raise LabelforgeError(f"source precedences must be unique, got {precedences}")
    mapped = []
    for vol, mapping in predictions:
        if not vol.geometry.matches(geom):
            raise GeometryMismatchError(f"source {mapping.source_name!r} geometry differs from the first source")
        mapping.validate(scheme)
        mapped.append((mapping.precedence, _lookup(vol, mapping)))
    mapped.sort(key=lambda t: t[0])

    top = max(int(a.max(initial=0)) for _, a in mapped)
    tier_lut = np.array([scheme.tier(i) if i else -1 for i in range(top + 1)])
    tiers = sorted({int(t) for t in tier_lut if t >= 0})
    out = np.zeros(geom.dims, dtype=np.uint16)
    for tier in tiers:
        for _, arr in mapped:
            sel = tier_lut[arr] == tier
            out[sel] = arr[sel]
    fused = LabelVolume(geom, out)
    if split_paired and scheme.paired:
        try:
            plane = fit_midline_plane(fused, scheme, connectivity)
        except DegenerateFitError as exc:
            log.warning("left/right split skipped after fusion: %s", exc)
        else:
            fused = left_right_split(fused, scheme, plane, connectivity)
    return fused


def derive_skull(volume, intensity, scheme, hu_range=SKULL_HU):
    """Label background / unknown-tissue voxels in the bone window above C5 as skull."""
    if not volume.geometry.matches(intensity.geometry):
        raise GeometryMismatchError("label and intensity geometries differ")
    c5, skull = scheme.id_of("Vertebrae C5"), scheme.id_of("Skull")
    sl = volume.label_slices.get(c5)
    if sl is None:
        log.warning("C5 absent; skull rule skipped")
        return volume
    geom = volume.geometry
    c5_idx = np.argwhere(volume.voxels[sl] == c5) + np.array([s.start for s in sl])
    c5_top = float(geom.superior_mm(c5_idx).max())

    lo, hi = hu_range
    hu = intensity.voxels
    cand = (volume.voxels <= 1) & (hu >= lo) & (hu <= hi)
    if scheme.vertebrae:
        cand &= ~np.isin(volume.voxels, list(scheme.vertebrae))
    idx = np.argwhere(cand)
    if len(idx) == 0:
        return volume
    idx = idx[geom.superior_mm(idx) > c5_top]
    if len(idx) == 0:
        return volume
    vox = volume.voxels.copy()
    vox[idx[:, 0], idx[:, 1], idx[:, 2]] = skull
    return volume.with_voxels(vox)


def apply_remap_rules(volume, scheme, boxes, superior_only=True, connectivity=DEFAULT_CONNECTIVITY, rules=None):
    """Relabel components of a rule's source label whose centroid lies in the rule's body part."""
    rules = scheme.remap_rules if rules is None else rules
    by_part = {b.part: b for b in boxes}
    vox = None
    for src, part, tgt in rules:
        box = by_part.get(part)
        if box is None:
            continue
        for comp in connected_components(volume, src, connectivity):
            if box.contains(comp.centroid, superior_only)[0]:
                if vox is None:
                    vox = volume.voxels.copy()
                vox.ravel()[comp.flat_indices()] = tgt
    return volume if vox is None else volume.with_voxels(vox)


def superior_extent(volume, label_id):
    sl = volume.label_slices.get(int(label_id))
    if sl is None:
        return None
    idx = np.argwhere(volume.voxels[sl] == label_id) + np.array([s.start for s in sl])
    return float((volume.geometry.voxel_to_world(idx) @ SUPERIOR).max())
