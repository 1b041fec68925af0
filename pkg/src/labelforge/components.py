"""3-D connected components of label masks and their per-component descriptors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volgrid import SUPERIOR

DEFAULT_CONNECTIVITY = 26
_RANK = {6: 1, 18: 2, 26: 3}


def structuring_element(connectivity):
    try:
        return ndimage.generate_binary_structure(3, _RANK[int(connectivity)])
    except KeyError:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity!r}") from None


def label_mask(mask, connectivity=DEFAULT_CONNECTIVITY):
    """Label a boolean mask; ids 1..n numbered in C scan order of each component's first voxel."""
    labels, n = ndimage.label(mask, structure=structuring_element(connectivity))
    if n > 1:
        flat = labels.ravel()
        nz = np.flatnonzero(flat)
        _, first = np.unique(flat[nz], return_index=True)
        order = np.argsort(first, kind="stable")
        remap = np.zeros(n + 1, dtype=labels.dtype)
        remap[order + 1] = np.arange(1, n + 1, dtype=labels.dtype)
        labels = remap[labels]
    return labels, int(n)


def _bbox(mask):
    if not mask.any():
        return None
    sl = []
    for ax in range(3):
        other = tuple(a for a in range(3) if a != ax)
        hit = np.flatnonzero(mask.any(axis=other))
        sl.append(slice(int(hit[0]), int(hit[-1]) + 1))
    return tuple(sl)


def _runs(flat_sorted):
    if flat_sorted.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    breaks = np.flatnonzero(np.diff(flat_sorted) != 1) + 1
    starts = np.concatenate(([0], breaks))
    ends = np.concatenate((breaks, [flat_sorted.size]))
    return np.stack([flat_sorted[starts], ends - starts], axis=1).astype(np.int64)


@dataclass(frozen=True, eq=False)
class Component:
    component_id: int
    voxel_count: int
    centroid: tuple
    median_point: tuple
    min_point: tuple
    runs: np.ndarray  # (start, length) over C-order flat indices of the full grid

    def flat_indices(self):
        return np.concatenate([np.arange(s, s + n) for s, n in self.runs]) if len(self.runs) else np.zeros(0, np.int64)

    def mask(self, shape):
        out = np.zeros(int(np.prod(shape)), dtype=bool)
        for s, n in self.runs:
            out[s:s + n] = True
        return out.reshape(shape)


@dataclass(frozen=True, eq=False)
class ComponentSet:
    label_id: int
    shape: tuple
    components: tuple

    def __len__(self):
        return len(self.components)

    def __iter__(self):
        return iter(self.components)

    def __getitem__(self, i):
        return self.components[i]

    @property
    def voxel_count(self):
        return sum(c.voxel_count for c in self.components)

    def largest(self):
        return self.components[0] if self.components else None


def components_of_mask(mask, geometry, connectivity=DEFAULT_CONNECTIVITY, label_id=0) -> ComponentSet:
    """Connected components of a boolean mask with descriptors in world mm."""
    mask = np.asarray(mask, dtype=bool)
    box = _bbox(mask)
    if box is None:
        return ComponentSet(label_id, mask.shape, ())
    labels, n = label_mask(mask[box], connectivity)
    idx = np.nonzero(labels)  # C order
    comp = labels[idx]
    order = np.argsort(comp, kind="stable")
    comp = comp[order]
    ijk = np.stack(idx, axis=1)[order] + np.array([s.start for s in box])
    world = geometry.voxel_to_world(ijk)
    flat = np.ravel_multi_index(tuple(ijk.T), mask.shape)
    bounds = np.searchsorted(comp, np.arange(1, n + 2))

    out = []
    for cid in range(1, n + 1):
        lo, hi = bounds[cid - 1], bounds[cid]
        pts = world[lo:hi]
        sup = pts @ SUPERIOR
        lowest = np.lexsort((pts[:, 1], pts[:, 0], sup))[0]
        out.append(Component(
            component_id=cid,
            voxel_count=int(hi - lo),
            centroid=tuple(float(v) for v in pts.mean(axis=0)),
            median_point=tuple(float(v) for v in np.median(pts, axis=0)),
            min_point=tuple(float(v) for v in pts[lowest]),
            runs=_runs(np.sort(flat[lo:hi])),
        ))
    out.sort(key=lambda c: (-c.voxel_count, c.component_id))
    return ComponentSet(label_id, mask.shape, tuple(out))


def connected_components(volume, label_id, connectivity=DEFAULT_CONNECTIVITY) -> ComponentSet:
    sl = volume.label_slices.get(int(label_id))
    if sl is None:
        return ComponentSet(int(label_id), volume.geometry.dims, ())
    mask = np.zeros(volume.geometry.dims, dtype=bool)
    mask[sl] = volume.voxels[sl] == label_id
    return components_of_mask(mask, volume.geometry, connectivity, int(label_id))


def keep_largest(volume, label_id, connectivity=DEFAULT_CONNECTIVITY):
    """Send every voxel of `label_id` outside its largest component to background.

    Size ties go to the component whose first voxel comes first in scan order.
    """
    sl = volume.label_slices.get(int(label_id))
    if sl is None:
        return volume
    sub = volume.voxels[sl] == label_id
    labels, n = label_mask(sub, connectivity)
    if n <= 1:
        return volume
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    vox = volume.voxels.copy()
    view = vox[sl]
    view[(labels != 0) & (labels != keep)] = 0
    return volume.with_voxels(vox)
