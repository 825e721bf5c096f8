"""Radiodensity windowing, normalization, resampling, and patch sampling for
the cascade stages and the multi-modality brain path.

Resampling uses corner-aligned coordinates: output index i maps to input
coordinate ``i * (n_in - 1) / (n_out - 1)`` (the volume centre for a
single-sample axis). Intensities and probabilities interpolate trilinearly,
label masks take the nearest voxel (ties round up), so masks never invent
values.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from voxseg.errors import DataError
from voxseg.volume import Volume

HU_WINDOW = (-100.0, 200.0)
NONLIVER_SLICE_FRACTION = 1.0 / 3.0


def hu_window(v: Volume, lo: float = HU_WINDOW[0], hi: float = HU_WINDOW[1]) -> Volume:
    """Clamp radiodensities to [lo, hi]; out-of-window tissue saturates."""
    if not lo < hi:
        raise DataError(f"window must satisfy lo < hi, got [{lo}, {hi}]")
    return Volume(np.clip(v.data, lo, hi).astype(np.float32), v.spacing)


def normalize(v: Volume) -> Volume:
    """Zero-mean then min-max to [0, 1]; a constant volume becomes all 0.5."""
    data = v.data.astype(np.float64)
    data -= data.mean()
    lo, hi = data.min(), data.max()
    if hi == lo:
        warnings.warn("normalize: constant volume, emitting all 0.5", stacklevel=2)
        out = np.full_like(data, 0.5)
    else:
        out = (data - lo) / (hi - lo)
    return Volume(out.astype(np.float32), v.spacing)


def _axis_coords(n_in: int, n_out: int) -> np.ndarray:
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))


def resample(v: Volume, new_extents, mode: str = "trilinear") -> Volume:
    """Resize to ``new_extents`` voxels; spacing rescales to keep physical size."""
    new_extents = tuple(int(e) for e in new_extents)
    if len(new_extents) != 3 or any(e < 1 for e in new_extents):
        raise DataError(f"bad target extents {new_extents}")
    if new_extents == v.extents:
        return v.copy()
    coords = [_axis_coords(n_in, n_out) for n_in, n_out in zip(v.extents, new_extents)]
    spacing = tuple(
        s * (n_in / n_out) for s, n_in, n_out in zip(v.spacing, v.extents, new_extents)
    )
    if mode == "nearest":
        idx = [
            np.minimum(np.floor(c + 0.5).astype(np.intp), n - 1)
            for c, n in zip(coords, v.extents)
        ]
        out = v.data[np.ix_(*idx)]
        return Volume(out.copy(), spacing)
    if mode != "trilinear":
        raise DataError(f"unknown resample mode {mode!r}")
    lo = [np.floor(c).astype(np.intp) for c in coords]
    lo = [np.minimum(l, n - 1) for l, n in zip(lo, v.extents)]
    hi = [np.minimum(l + 1, n - 1) for l, n in zip(lo, v.extents)]
    frac = [c - l for c, l in zip(coords, lo)]
    data = v.data.astype(np.float64)
    out = np.zeros(new_extents, dtype=np.float64)
    for corner in range(8):
        picks, weight = [], 1.0
        for axis in range(3):
            if corner >> axis & 1:
                picks.append(hi[axis])
                w = frac[axis]
            else:
                picks.append(lo[axis])
                w = 1.0 - frac[axis]
            weight = weight * w.reshape([-1 if a == axis else 1 for a in range(3)])
        out += weight * data[np.ix_(*picks)]
    return Volume(out.astype(np.float32), spacing)


# ---------------------------------------------------------------------------
# patch sampling


@dataclass(frozen=True)
class Patch:
    origin: tuple  # (x, y, z) voxel of the patch corner in the source volume
    data: np.ndarray  # raster in volume axis order


@dataclass(frozen=True)
class PatchSet:
    patches: tuple
    stage: str  # localization | liver | tumor | brain

    def __len__(self):
        return len(self.patches)


@dataclass(frozen=True)
class SliceSample:
    index: int  # axial position
    image: np.ndarray  # (size, size) float32
    label: np.ndarray  # (size, size) uint8


def extract(data: np.ndarray, origin, extents) -> np.ndarray:
    """Cut origin+extents out of a raster; used to pair masks with patches."""
    sl = tuple(slice(o, o + e) for o, e in zip(origin, extents))
    out = data[sl]
    if out.shape != tuple(extents):
        raise DataError(f"patch at {tuple(origin)} x {tuple(extents)} leaves the volume")
    return out


def slice_sampler_2d(
    v: Volume,
    mask: Volume,
    size: int = 256,
    fraction: float = NONLIVER_SLICE_FRACTION,
    seed: int = 0,
):
    """Every mask-bearing axial slice plus a seeded sample of the empty ones.

    Each selected slice is resampled to ``size`` x ``size`` (image trilinear,
    label nearest). Returns SliceSamples ordered by axial index.
    """
    if v.extents != mask.extents:
        raise DataError(f"mask extents {mask.extents} do not match volume {v.extents}")
    nz = v.extents[2]
    bearing = [k for k in range(nz) if mask.data[:, :, k].any()]
    empty = [k for k in range(nz) if not mask.data[:, :, k].any()]
    take = int(len(empty) * fraction + 0.5)
    rng = np.random.default_rng(seed)
    chosen = sorted(rng.choice(empty, size=take, replace=False).tolist()) if take else []
    samples = []
    for k in sorted(bearing + chosen):
        image = resample(
            Volume(v.data[:, :, k : k + 1], v.spacing), (size, size, 1), "trilinear"
        )
        label = resample(
            Volume(mask.data[:, :, k : k + 1].astype(np.uint8), v.spacing),
            (size, size, 1),
            "nearest",
        )
        samples.append(
            SliceSample(index=k, image=image.data[:, :, 0], label=label.data[:, :, 0])
        )
    return samples


def liver_patch_sampler(
    v: Volume, n_patches: int, patch_extents=(224, 224, 32), seed: int = 0
) -> PatchSet:
    """Full-plane windows of ``patch_extents[2]`` consecutive axial slices.

    The volume must already be resampled so its in-plane extents equal the
    patch plane; its axial length M bounds the random window origins.
    """
    px, py, pz = (int(e) for e in patch_extents)
    x, y, m = v.extents
    if (x, y) != (px, py):
        raise DataError(
            f"liver sampler expects an in-plane size of {px}x{py}, got {x}x{y}; "
            f"resample the boundary box first"
        )
    if m < pz:
        raise DataError(
            f"axial length {m} is shorter than the {pz}-slice window; pad the "
            f"volume in z or skip the case"
        )
    rng = np.random.default_rng(seed)
    origins = rng.integers(0, m - pz + 1, size=n_patches)
    patches = tuple(
        Patch(origin=(0, 0, int(z0)), data=extract(v.data, (0, 0, int(z0)), (px, py, pz)))
        for z0 in origins
    )
    return PatchSet(patches=patches, stage="liver")


def _centered_origin(center, patch, extents):
    return tuple(
        int(np.clip(c - p // 2, 0, e - p)) for c, p, e in zip(center, patch, extents)
    )


def tumor_patch_sampler(
    v: Volume,
    liver_mask: Volume,
    tumor_mask: Volume,
    n: int = 150,
    patch_extents=(128, 128, 32),
    tumor_fraction: float = 0.5,
    seed: int = 0,
) -> PatchSet:
    """Seeded patches at native resolution, every one intersecting the liver.

    Roughly ``tumor_fraction`` of the patches are centred on tumor voxels,
    the rest on non-tumor liver voxels (all tumor candidates sit inside the
    liver, so the mixture stays within the VOI by construction).
    """
    if v.extents != liver_mask.extents or v.extents != tumor_mask.extents:
        raise DataError("volume and mask extents are misaligned")
    patch = tuple(int(e) for e in patch_extents)
    if any(p > e for p, e in zip(patch, v.extents)):
        raise DataError(f"patch {patch} exceeds volume extents {v.extents}")
    liver_vox = np.argwhere(liver_mask.data > 0)
    if liver_vox.shape[0] == 0:
        raise DataError("empty liver mask: no candidate patches")
    tumor_vox = np.argwhere(tumor_mask.data > 0)
    rng = np.random.default_rng(seed)
    n_tumor = int(round(n * tumor_fraction)) if tumor_vox.shape[0] else 0
    patches = []
    for i in range(n):
        pool = tumor_vox if i < n_tumor else liver_vox
        center = pool[rng.integers(0, pool.shape[0])]
        origin = _centered_origin(center, patch, v.extents)
        patches.append(Patch(origin=origin, data=extract(v.data, origin, patch)))
    return PatchSet(patches=tuple(patches), stage="tumor")


def brats_prepare(
    modalities,
    labels: Volume,
    n: int = 400,
    patch_extents=(64, 64, 64),
    tumor_fraction: float = 0.5,
    seed: int = 0,
):
    """Multi-modality preparation: per-modality min-max to [0, 1], tumor
    sub-labels {1, 2, 4} merged into one whole-tumor mask, and 4-channel
    patches sampled like the tumor sampler (channel axis first).

    Returns (PatchSet, whole-tumor mask Volume).
    """
    if len(modalities) != 4:
        raise DataError(f"expected 4 modalities, got {len(modalities)}")
    extents = labels.extents
    for m in modalities:
        if m.extents != extents:
            raise DataError("modalities and labels are misaligned")
    scaled = []
    for m in modalities:
        data = m.data.astype(np.float64)
        lo, hi = data.min(), data.max()
        scaled.append(
            np.full(extents, 0.5, dtype=np.float32)
            if hi == lo
            else ((data - lo) / (hi - lo)).astype(np.float32)
        )
    merged = np.isin(labels.data, (1, 2, 4)).astype(np.uint8)
    whole = Volume(merged, labels.spacing)

    patch = tuple(int(e) for e in patch_extents)
    if any(p > e for p, e in zip(patch, extents)):
        raise DataError(f"patch {patch} exceeds volume extents {extents}")
    tumor_vox = np.argwhere(merged > 0)
    rng = np.random.default_rng(seed)
    n_tumor = int(round(n * tumor_fraction)) if tumor_vox.shape[0] else 0
    valid = [e - p for e, p in zip(extents, patch)]
    patches = []
    for i in range(n):
        if i < n_tumor:
            center = tumor_vox[rng.integers(0, tumor_vox.shape[0])]
            origin = _centered_origin(center, patch, extents)
        else:
            origin = tuple(int(rng.integers(0, v + 1)) for v in valid)
        stack = np.stack([extract(ch, origin, patch) for ch in scaled], axis=0)
        patches.append(Patch(origin=origin, data=stack))
    return PatchSet(patches=tuple(patches), stage="brain"), whole
