"""Synthetic CT-like phantoms with exact analytic ground truth.

A phantom is air everywhere, a bone slab, an ellipsoidal liver, and spherical
tumors strictly inside the liver, each at its typical radiodensity plus
optional Gaussian noise. Tumor radiodensity (30 HU) sits inside the usual
abdominal window and below liver tissue; the tables the window is based on
give no tumor value, so it is exposed on the spec.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from voxseg.errors import DataError
from voxseg.volume import Volume, write_rvol

HU_AIR = -1000.0
HU_BONE = 400.0
HU_LIVER = 45.0
HU_TUMOR = 30.0


@dataclass(frozen=True)
class PhantomSpec:
    extents: tuple = (96, 96, 64)
    liver_center: tuple = (48.0, 46.0, 32.0)
    liver_axes: tuple = (30.0, 26.0, 20.0)
    tumors: tuple = (((54.0, 50.0, 36.0), 9.0), ((38.0, 40.0, 28.0), 6.0))
    bone_slab: tuple = ((4, 10), (8, 88), (8, 56))  # ((x0,x1),(y0,y1),(z0,z1))
    hu_air: float = HU_AIR
    hu_bone: float = HU_BONE
    hu_liver: float = HU_LIVER
    hu_tumor: float = HU_TUMOR
    noise_sigma: float = 4.0
    spacing: tuple = (1.0, 1.0, 1.0)
    seed: int = 0


def _check_containment(spec: PhantomSpec) -> None:
    # sufficient condition: normalized centre distance + r / min(axis) <= 1
    axes = np.asarray(spec.liver_axes, dtype=np.float64)
    centre = np.asarray(spec.liver_center, dtype=np.float64)
    for (t_centre, radius) in spec.tumors:
        offset = (np.asarray(t_centre, dtype=np.float64) - centre) / axes
        reach = float(np.linalg.norm(offset)) + float(radius) / float(axes.min())
        if reach > 1.0:
            raise DataError(
                f"tumor at {tuple(t_centre)} r={radius} escapes the liver ellipsoid"
            )


def generate(spec: PhantomSpec):
    """Build (hu volume, liver mask, tumor mask); masks are the exact geometry."""
    _check_containment(spec)
    x, y, z = spec.extents
    gx, gy, gz = np.ogrid[:x, :y, :z]

    cx, cy, cz = spec.liver_center
    ax, ay, az = spec.liver_axes
    liver = ((gx - cx) / ax) ** 2 + ((gy - cy) / ay) ** 2 + ((gz - cz) / az) ** 2 <= 1.0

    tumor = np.zeros(spec.extents, dtype=bool)
    for (tc, radius) in spec.tumors:
        tumor |= (gx - tc[0]) ** 2 + (gy - tc[1]) ** 2 + (gz - tc[2]) ** 2 <= radius**2
    if np.any(tumor & ~liver):
        raise DataError("voxelized tumor escapes the voxelized liver")

    hu = np.full(spec.extents, spec.hu_air, dtype=np.float64)
    (x0, x1), (y0, y1), (z0, z1) = spec.bone_slab
    hu[x0:x1, y0:y1, z0:z1] = spec.hu_bone
    hu[liver] = spec.hu_liver
    hu[tumor] = spec.hu_tumor
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        hu += rng.normal(0.0, spec.noise_sigma, size=spec.extents)

    return (
        Volume(hu.astype(np.float32), spec.spacing),
        Volume(liver.astype(np.uint8), spec.spacing),
        Volume(tumor.astype(np.uint8), spec.spacing),
    )


def spec_to_dict(spec: PhantomSpec) -> dict:
    return {
        "extents": list(spec.extents),
        "liver_center": list(spec.liver_center),
        "liver_axes": list(spec.liver_axes),
        "tumors": [[list(c), r] for c, r in spec.tumors],
        "bone_slab": [list(p) for p in spec.bone_slab],
        "hu": {
            "air": spec.hu_air,
            "bone": spec.hu_bone,
            "liver": spec.hu_liver,
            "tumor": spec.hu_tumor,
        },
        "noise_sigma": spec.noise_sigma,
        "spacing": list(spec.spacing),
        "seed": spec.seed,
    }


def write_case(directory, spec: PhantomSpec) -> dict:
    """Emit hu.rvol, liver.rvol, tumor.rvol plus a JSON sidecar; returns paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    hu, liver, tumor = generate(spec)
    paths = {
        "hu": directory / "hu.rvol",
        "liver": directory / "liver.rvol",
        "tumor": directory / "tumor.rvol",
        "sidecar": directory / "phantom.json",
    }
    write_rvol(paths["hu"], hu)
    write_rvol(paths["liver"], liver)
    write_rvol(paths["tumor"], tumor)
    paths["sidecar"].write_text(json.dumps(spec_to_dict(spec), indent=2) + "\n")
    return paths
