"""Connected components, bounding boxes, patch tiling, probability vote
merging, thresholding, and liver-constrained masking.

Component labels are contiguous 1..K ordered by each component's first voxel
in C scan order of the (x, y, z) raster (lexicographic by x, then y, then z),
regardless of what order the underlying labeling pass discovers them in.
Default connectivities: 26 for 3D, 8 for 2D.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy import ndimage

from voxseg.errors import DataError, ShapeError

_STRUCTURES = {
    (3, 6): ndimage.generate_binary_structure(3, 1),
    (3, 18): ndimage.generate_binary_structure(3, 2),
    (3, 26): ndimage.generate_binary_structure(3, 3),
    (2, 4): ndimage.generate_binary_structure(2, 1),
    (2, 8): ndimage.generate_binary_structure(2, 2),
}


@dataclass
class LabelVolume:
    labels: np.ndarray  # int32, 0 = background
    connectivity: int

    @property
    def count(self) -> int:
        return int(self.labels.max(initial=0))


@dataclass(frozen=True)
class BoundaryBox:
    mins: tuple  # inclusive
    maxs: tuple  # inclusive

    @property
    def extents(self):
        return tuple(hi - lo + 1 for lo, hi in zip(self.mins, self.maxs))

    def slices(self):
        return tuple(slice(lo, hi + 1) for lo, hi in zip(self.mins, self.maxs))


def connected_components(mask: np.ndarray, connectivity: int = 26) -> LabelVolume:
    """Label maximal connected foreground sets 1..K in first-voxel scan order."""
    mask = np.asarray(mask)
    key = (mask.ndim, connectivity)
    if key not in _STRUCTURES:
        raise DataError(
            f"unsupported connectivity {connectivity} for {mask.ndim}D "
            f"(choose from 6/18/26 in 3D, 4/8 in 2D)"
        )
    binary = mask != 0
    raw, k = ndimage.label(binary, structure=_STRUCTURES[key])
    if k == 0:
        return LabelVolume(labels=raw.astype(np.int32), connectivity=connectivity)
    # renumber by first occurrence in C scan order
    flat = raw.reshape(-1)
    first = np.full(k + 1, flat.size, dtype=np.int64)
    nz = np.flatnonzero(flat)
    np.minimum.at(first, flat[nz], nz)
    order = np.argsort(first[1:], kind="stable")
    remap = np.zeros(k + 1, dtype=np.int32)
    remap[1 + order] = np.arange(1, k + 1, dtype=np.int32)
    return LabelVolume(labels=remap[raw], connectivity=connectivity)


def largest_component(lv: LabelVolume) -> np.ndarray:
    """Binary mask of the largest label; ties keep the smallest label id."""
    k = lv.count
    if k == 0:
        raise DataError("no foreground components")
    sizes = np.bincount(lv.labels.reshape(-1), minlength=k + 1)[1:]
    winner = int(np.argmax(sizes)) + 1  # argmax returns the first (smallest) id on ties
    return (lv.labels == winner).astype(np.uint8)


def bounding_box(mask: np.ndarray, margin: int = 10) -> BoundaryBox:
    """Tight box around the foreground, expanded by margin, clipped to bounds."""
    mask = np.asarray(mask)
    coords = np.nonzero(mask)
    if coords[0].size == 0:
        raise DataError("bounding_box of an empty mask")
    mins, maxs = [], []
    for axis, idx in enumerate(coords):
        mins.append(max(int(idx.min()) - margin, 0))
        maxs.append(min(int(idx.max()) + margin, mask.shape[axis] - 1))
    return BoundaryBox(mins=tuple(mins), maxs=tuple(maxs))


def tile_patches(box_extents, patch_extents, stride) -> list:
    """Regular grid of patch origins covering every voxel at least once.

    The last origin per axis is clamped so the final patch touches the box
    boundary.
    """
    box = tuple(int(e) for e in box_extents)
    patch = tuple(int(e) for e in patch_extents)
    strides = (
        (int(stride),) * len(box)
        if isinstance(stride, (int, np.integer))
        else tuple(int(s) for s in stride)
    )
    if len(patch) != len(box) or len(strides) != len(box):
        raise ShapeError("box, patch, and stride ranks differ")
    per_axis = []
    for b, p, s in zip(box, patch, strides):
        if p > b:
            raise ShapeError(f"patch extent {p} exceeds box extent {b}")
        if s < 1:
            raise ShapeError("stride must be positive")
        stops = list(range(0, b - p + 1, s))
        if stops[-1] != b - p:
            stops.append(b - p)
        per_axis.append(stops)
    return [tuple(origin) for origin in product(*per_axis)]


def vote_merge(patches, box_extents) -> np.ndarray:
    """Per-voxel mean of overlapping probability patches (origin-sorted order).

    ``patches`` holds (origin, probability array) pairs; every voxel of the
    box must be covered by at least one patch.
    """
    box = tuple(int(e) for e in box_extents)
    acc = np.zeros(box, dtype=np.float64)
    cover = np.zeros(box, dtype=np.int32)
    for origin, prob in sorted(patches, key=lambda item: tuple(item[0])):
        prob = np.asarray(prob)
        sl = tuple(slice(o, o + e) for o, e in zip(origin, prob.shape))
        if any(s.stop > b for s, b in zip(sl, box)):
            raise ShapeError(f"patch at {tuple(origin)} exceeds the box {box}")
        acc[sl] += prob
        cover[sl] += 1
    if np.any(cover == 0):
        raise ShapeError("vote_merge: tiling left uncovered voxels")
    return (acc / cover).astype(np.float32)


def binarize(prob: np.ndarray, tau: float = 0.5) -> np.ndarray:
    """Threshold a probability raster; the boundary value tau maps to 1."""
    return (np.asarray(prob) >= tau).astype(np.uint8)


def mask_within(tumor: np.ndarray, liver: np.ndarray) -> np.ndarray:
    """Zero out tumor voxels that fall outside the liver mask."""
    tumor = np.asarray(tumor)
    liver = np.asarray(liver)
    if tumor.shape != liver.shape:
        raise ShapeError(f"mask extents differ: {tumor.shape} vs {liver.shape}")
    return ((tumor != 0) & (liver != 0)).astype(np.uint8)
