"""Synthetic lung-like phantoms: noisy background, bright spherical
nodules, and vessel-like tube distractors.

Intensities are pseudo-HU on the same scale the preprocessing clip
expects: background around -900, nodules around -100, tubes in between.
Composition order is background, then tubes, then nodules, so a tube
crossing a nodule can never darken the nodule core; the nodule/background
contrast invariant survives any overlap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import NoduleAnnotation, Volume, write_annotations, write_vol3

BACKGROUND_MEAN = -900.0
BACKGROUND_STD = 50.0
NODULE_MEAN = -100.0
NODULE_STD = 50.0
TUBE_MEAN = -300.0
TUBE_STD = 60.0
EDGE_SOFTNESS = 0.8  # voxels; sigmoid falloff width of nodule rims


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (96, 96, 96)  # x, y, z
    n_volumes: int = 10
    nodules_min: int = 1
    nodules_max: int = 4
    diameter_min: float = 4.0
    diameter_max: float = 20.0
    distractor_density: float = 2.0  # expected tubes per 10^5 voxels
    seed: int = 0

    def validate(self) -> None:
        if self.nodules_min < 0 or self.nodules_max < self.nodules_min:
            raise ValueError("bad nodule count range")
        if not (0 < self.diameter_min <= self.diameter_max):
            raise ValueError("bad diameter range")
        if min(self.dims) < 2 * self.diameter_max:
            raise ValueError(
                f"dims {self.dims} too small for diameter_max {self.diameter_max}"
            )
        if self.n_volumes < 1:
            raise ValueError("n_volumes must be >= 1")

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "n_volumes": self.n_volumes,
            "nodules_min": self.nodules_min,
            "nodules_max": self.nodules_max,
            "diameter_min": self.diameter_min,
            "diameter_max": self.diameter_max,
            "distractor_density": self.distractor_density,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        if "dims" in d:
            d["dims"] = tuple(int(v) for v in d["dims"])
        return cls(**d)


def _blend_ball(vol: np.ndarray, center_xyz, radius: float, value: float) -> None:
    """Alpha-blend a soft-edged ball toward `value` (in place).

    The blend weight is sigmoid((radius - distance)/EDGE_SOFTNESS): ~1 deep
    inside, 0.5 exactly on the surface, ~0 outside.
    """
    cx, cy, cz = center_xyz
    zdim, ydim, xdim = vol.shape
    m = radius + 4.0 * EDGE_SOFTNESS
    z0, z1 = max(0, int(np.floor(cz - m))), min(zdim, int(np.ceil(cz + m)) + 1)
    y0, y1 = max(0, int(np.floor(cy - m))), min(ydim, int(np.ceil(cy + m)) + 1)
    x0, x1 = max(0, int(np.floor(cx - m))), min(xdim, int(np.ceil(cx + m)) + 1)
    zz, yy, xx = np.meshgrid(
        np.arange(z0, z1), np.arange(y0, y1), np.arange(x0, x1), indexing="ij"
    )
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2 + (zz - cz) ** 2)
    w = 1.0 / (1.0 + np.exp(-(radius - dist) / EDGE_SOFTNESS))
    region = vol[z0:z1, y0:y1, x0:x1]
    region += w * (value - region)


def _blend_tube(vol: np.ndarray, p0, direction, length: float, radius: float, value: float) -> None:
    """Alpha-blend a soft-edged cylinder segment (in place)."""
    p0 = np.asarray(p0, dtype=np.float64)  # (x, y, z)
    d = np.asarray(direction, dtype=np.float64)
    d /= np.linalg.norm(d)
    p1 = p0 + d * length
    m = radius + 4.0 * EDGE_SOFTNESS
    lo = np.floor(np.minimum(p0, p1) - m).astype(int)
    hi = np.ceil(np.maximum(p0, p1) + m).astype(int) + 1
    zdim, ydim, xdim = vol.shape
    x0, y0, z0 = np.maximum(lo, 0)
    x1 = min(hi[0], xdim)
    y1 = min(hi[1], ydim)
    z1 = min(hi[2], zdim)
    if x0 >= x1 or y0 >= y1 or z0 >= z1:
        return
    zz, yy, xx = np.meshgrid(
        np.arange(z0, z1), np.arange(y0, y1), np.arange(x0, x1), indexing="ij"
    )
    pts = np.stack([xx, yy, zz], axis=-1).astype(np.float64)
    rel = pts - p0
    t = np.clip(rel @ d, 0.0, length)
    closest = p0 + t[..., None] * d
    dist = np.linalg.norm(pts - closest, axis=-1)
    w = 1.0 / (1.0 + np.exp(-(radius - dist) / EDGE_SOFTNESS))
    region = vol[z0:z1, y0:y1, x0:x1]
    region += w * (value - region)


def generate_phantom(seed, config: PhantomConfig, scan_id: str = "") -> tuple[Volume, list[NoduleAnnotation]]:
    """Build one phantom volume plus its ground-truth annotations.

    Deterministic in (seed, config): the same pair always produces the
    same voxels and the same annotation list.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    xdim, ydim, zdim = config.dims
    if not scan_id:
        scan_id = "phantom"

    # smoothed noise background around BACKGROUND_MEAN
    noise = rng.normal(0.0, 1.0, size=(zdim, ydim, xdim))
    smooth = gaussian_filter(noise, sigma=3.0)
    smooth /= max(smooth.std(), 1e-12)
    vol = BACKGROUND_MEAN + BACKGROUND_STD * smooth

    # vessel-like distractor tubes first, nodules after (see module note)
    n_tubes = int(rng.poisson(config.distractor_density * vol.size / 1e5))
    for _ in range(n_tubes):
        p0 = rng.uniform([0, 0, 0], [xdim, ydim, zdim])
        direction = rng.normal(size=3)
        while np.linalg.norm(direction) < 1e-6:
            direction = rng.normal(size=3)
        length = float(rng.uniform(10.0, 0.5 * max(xdim, ydim, zdim)))
        radius = float(rng.uniform(0.8, 2.5))
        value = float(np.clip(rng.normal(TUBE_MEAN, TUBE_STD), -600.0, -150.0))
        _blend_tube(vol, p0, direction, length, radius, value)

    n_nodules = int(rng.integers(config.nodules_min, config.nodules_max + 1))
    annotations: list[NoduleAnnotation] = []
    placed: list[tuple[np.ndarray, float]] = []
    attempts = 0
    while len(annotations) < n_nodules and attempts < 200 * max(1, n_nodules):
        attempts += 1
        diameter = float(rng.uniform(config.diameter_min, config.diameter_max))
        r = diameter / 2.0
        margin = r + 3.0
        center = rng.uniform(
            [margin, margin, margin], [xdim - margin, ydim - margin, zdim - margin]
        )
        if any(
            np.linalg.norm(center - c) < r + pr + 3.0 for c, pr in placed
        ):
            continue
        value = float(np.clip(rng.normal(NODULE_MEAN, NODULE_STD), -280.0, 100.0))
        _blend_ball(vol, center, r, value)
        placed.append((center, r))
        annotations.append(
            NoduleAnnotation(scan_id, float(center[0]), float(center[1]), float(center[2]), diameter)
        )

    if len(annotations) < n_nodules:
        raise RuntimeError(
            f"could not place {n_nodules} nodules in {config.dims} after {attempts} tries"
        )
    return Volume(scan_id, vol.astype(np.float32)), annotations


def make_phantom_dataset(config: PhantomConfig, out_dir) -> dict:
    """Generate config.n_volumes phantoms into out_dir.

    Writes scanNNN.vol3 files, one annotations.csv covering all scans, and
    a manifest.json recording the config and file list. Returns the
    manifest dict.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    all_annotations: list[NoduleAnnotation] = []
    for i in range(config.n_volumes):
        scan_id = f"scan{i:03d}"
        volume, anns = generate_phantom((config.seed, i), config, scan_id=scan_id)
        fname = f"{scan_id}.vol3"
        write_vol3(out / fname, volume.data)
        files.append(fname)
        all_annotations.extend(anns)
    write_annotations(out / "annotations.csv", all_annotations)
    manifest = {
        "format": "seedet-phantom-set",
        "version": 1,
        "config": config.to_dict(),
        "files": files,
        "annotations": "annotations.csv",
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest
