"""Volume I/O, normalization, patch sampling, augmentation and test tiling.

Volume arrays are indexed [z, y, x]; every external coordinate (CSV rows,
annotation centers, patch origins) is ordered x, y, z. The `.vol3` file
format stores voxels x-fastest, which is exactly C order for a [Z, Y, X]
array.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import map_coordinates

VOL3_MAGIC = b"VOL3"
VOL3_VERSION = 1

CLIP_LO = -1200.0
CLIP_HI = 600.0

ANNOTATION_FIELDS = ("scan_id", "x", "y", "z", "diameter")


class VolumeFormatError(OSError):
    """Malformed .vol3 payload (bad magic, truncated data, size mismatch)."""


@dataclass
class NoduleAnnotation:
    scan_id: str
    x: float
    y: float
    z: float
    diameter: float

    @property
    def center(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.z)

    @property
    def radius(self) -> float:
        return self.diameter / 2.0


@dataclass
class Volume:
    scan_id: str
    data: np.ndarray  # [Z, Y, X]
    mask: Optional[np.ndarray] = None  # same shape, uint8, nonzero = inside

    @property
    def dims_xyz(self) -> tuple[int, int, int]:
        z, y, x = self.data.shape
        return (x, y, z)


def write_vol3(path, data: np.ndarray) -> None:
    """Write a [Z, Y, X] array as float32 x-fastest with a dims header."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError("vol3 stores 3D volumes")
    z, y, x = data.shape
    with open(path, "wb") as f:
        f.write(VOL3_MAGIC)
        f.write(struct.pack("<HIII", VOL3_VERSION, x, y, z))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_vol3(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(4 + 2 + 12)
        if len(header) < 18 or header[:4] != VOL3_MAGIC:
            raise VolumeFormatError(f"{path}: not a vol3 file")
        version, x, y, z = struct.unpack("<HIII", header[4:])
        if version != VOL3_VERSION:
            raise VolumeFormatError(f"{path}: unsupported vol3 version {version}")
        payload = f.read()
    expected = x * y * z * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload is {len(payload)} bytes, dims say {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(z, y, x).copy()


def write_mask_vol3(path, mask: np.ndarray) -> None:
    """Mask variant of vol3: same header, uint8 payload."""
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError("mask must be 3D")
    z, y, x = mask.shape
    with open(path, "wb") as f:
        f.write(VOL3_MAGIC)
        f.write(struct.pack("<HIII", VOL3_VERSION, x, y, z))
        f.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def read_mask_vol3(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(18)
        if len(header) < 18 or header[:4] != VOL3_MAGIC:
            raise VolumeFormatError(f"{path}: not a vol3 mask file")
        version, x, y, z = struct.unpack("<HIII", header[4:])
        if version != VOL3_VERSION:
            raise VolumeFormatError(f"{path}: unsupported vol3 version {version}")
        payload = f.read()
    if len(payload) != x * y * z:
        raise VolumeFormatError(f"{path}: mask payload size mismatch")
    return np.frombuffer(payload, dtype=np.uint8).reshape(z, y, x).copy()


def write_annotations(path, annotations: Sequence[NoduleAnnotation]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ANNOTATION_FIELDS)
        for a in annotations:
            writer.writerow([a.scan_id, repr(a.x), repr(a.y), repr(a.z), repr(a.diameter)])


def read_annotations(path) -> list[NoduleAnnotation]:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != list(
            ANNOTATION_FIELDS
        ):
            raise VolumeFormatError(f"{path}: expected header {','.join(ANNOTATION_FIELDS)}")
        for row in reader:
            out.append(
                NoduleAnnotation(
                    scan_id=row["scan_id"],
                    x=float(row["x"]),
                    y=float(row["y"]),
                    z=float(row["z"]),
                    diameter=float(row["diameter"]),
                )
            )
    return out


def preprocess(volume: Volume, lo: float = CLIP_LO, hi: float = CLIP_HI) -> Volume:
    """Clip raw intensities to [lo, hi] and rescale to [0, 1].

    Voxels outside the mask (where provided) are set to 0, the same value
    the padding functions use, so patch edges and masked-out regions look
    identical to the network.
    """
    data = np.clip(volume.data.astype(np.float32), lo, hi)
    data = (data - lo) / (hi - lo)
    if volume.mask is not None:
        data = np.where(volume.mask != 0, data, np.float32(0.0))
    return Volume(volume.scan_id, data.astype(np.float32), None)


@dataclass
class PatchSample:
    """A network-ready crop plus everything needed to map back to the scan."""

    data: np.ndarray  # [D, H, W] == [z, y, x] extents, normalized
    origin: tuple[int, int, int]  # (x0, y0, z0) of the crop in volume coords
    annotations: list[NoduleAnnotation] = field(default_factory=list)
    flips: tuple[bool, bool, bool] = (False, False, False)  # per x, y, z axis
    scale: float = 1.0


def _pad_to_shape(data: np.ndarray, shape: tuple[int, int, int]) -> np.ndarray:
    """End-pad with zeros up to `shape` (normalized background value)."""
    pads = [(0, max(0, want - have)) for want, have in zip(shape, data.shape)]
    if any(p[1] for p in pads):
        data = np.pad(data, pads, constant_values=0.0)
    return data


def extract_train_patch(
    volume: Volume,
    annotations: Sequence[NoduleAnnotation],
    patch_size: int,
    rng: np.random.Generator,
    nodule_prob: float = 0.7,
) -> PatchSample:
    """Crop one training patch, biased toward containing a nodule.

    With probability `nodule_prob` (and at least one annotation) a random
    nodule is chosen and the crop origin jittered uniformly among offsets
    that keep that nodule's extent inside; otherwise the origin is uniform
    over the padded volume. Annotations whose centers fall outside the crop
    are dropped from the sample.
    """
    p = patch_size
    data = _pad_to_shape(volume.data, (p, p, p))
    zdim, ydim, xdim = data.shape
    anns = list(annotations)

    def rand_origin():
        return tuple(int(rng.integers(0, dim - p + 1)) for dim in (xdim, ydim, zdim))

    if anns and rng.random() < nodule_prob:
        a = anns[int(rng.integers(0, len(anns)))]
        origin = []
        for c, dim in zip((a.x, a.y, a.z), (xdim, ydim, zdim)):
            r = a.diameter / 2.0
            lo = int(np.floor(c + r)) - p + 1  # rightmost origin keeping far edge in
            hi = int(np.ceil(c - r))  # leftmost voxel of the nodule
            lo = max(0, lo)
            hi = min(dim - p, hi)
            if hi < lo:  # nodule bigger than the patch: center it as well as possible
                lo = hi = int(np.clip(round(c - p / 2), 0, dim - p))
            origin.append(int(rng.integers(lo, hi + 1)))
        origin = tuple(origin)
    else:
        origin = rand_origin()

    x0, y0, z0 = origin
    crop = data[z0 : z0 + p, y0 : y0 + p, x0 : x0 + p].copy()
    kept = []
    for a in anns:
        rx, ry, rz = a.x - x0, a.y - y0, a.z - z0
        if 0 <= rx < p and 0 <= ry < p and 0 <= rz < p:
            kept.append(NoduleAnnotation(a.scan_id, rx, ry, rz, a.diameter))
    return PatchSample(data=crop, origin=origin, annotations=kept)


def _resample(data: np.ndarray, factor: float) -> np.ndarray:
    """Trilinear zoom by `factor` with the half-pixel center convention."""
    out_shape = tuple(max(1, int(round(s * factor))) for s in data.shape)
    grids = [(np.arange(n) + 0.5) / factor - 0.5 for n in out_shape]
    zz, yy, xx = np.meshgrid(*grids, indexing="ij")
    coords = np.stack([zz, yy, xx])
    out = map_coordinates(data.astype(np.float64), coords, order=1, mode="nearest")
    return out.astype(data.dtype)


def augment(
    sample: PatchSample,
    rng: np.random.Generator,
    flip_prob: float = 0.5,
    scale_range: tuple[float, float] = (0.75, 1.25),
    flips: Optional[tuple[bool, bool, bool]] = None,
    scale: Optional[float] = None,
) -> PatchSample:
    """Random axis flips plus isotropic rescaling (annotations follow).

    `flips` / `scale` override the random draws when given (tests use this).
    A scale of exactly 1.0 skips resampling, so a flip-only augmentation is
    bit-exact. Values stay inside [0, 1]: trilinear interpolation cannot
    overshoot and padding uses the background value 0.
    """
    if flips is None:
        flips = tuple(bool(rng.random() < flip_prob) for _ in range(3))
    if scale is None:
        scale = float(rng.uniform(*scale_range))

    p = sample.data.shape[0]
    data = sample.data
    anns = [replace(a) for a in sample.annotations]

    if scale != 1.0:
        data = _resample(data, scale)
        for a in anns:
            a.x = (a.x + 0.5) * scale - 0.5
            a.y = (a.y + 0.5) * scale - 0.5
            a.z = (a.z + 0.5) * scale - 0.5
            a.diameter *= scale
        # center-crop or end-pad back to the original patch size
        offsets = []
        for axis, size in enumerate(data.shape):
            if size > p:
                off = (size - p) // 2
                data = np.take(data, np.arange(off, off + p), axis=axis)
                offsets.append(-off)
            else:
                offsets.append(0)
        data = _pad_to_shape(data, (p, p, p))
        oz, oy, ox = offsets
        for a in anns:
            a.x += ox
            a.y += oy
            a.z += oz

    # flips: axis order of data is [z, y, x]; flips tuple is (x, y, z)
    fx, fy, fz = flips
    for do_flip, axis, attr in ((fz, 0, "z"), (fy, 1, "y"), (fx, 2, "x")):
        if do_flip:
            data = np.flip(data, axis=axis)
            for a in anns:
                setattr(a, attr, (p - 1) - getattr(a, attr))
    data = np.ascontiguousarray(data)

    kept = [a for a in anns if 0 <= a.x < p and 0 <= a.y < p and 0 <= a.z < p]
    return PatchSample(
        data=data,
        origin=sample.origin,
        annotations=kept,
        flips=flips,
        scale=scale,
    )


def tile_origins(dim: int, patch: int, overlap: int) -> list[int]:
    """1D tiling origins: stride patch-overlap, last origin clamped flush."""
    if patch <= overlap:
        raise ValueError("patch must exceed overlap")
    if dim <= patch:
        return [0]
    stride = patch - overlap
    origins = list(range(0, dim - patch + 1, stride))
    if origins[-1] != dim - patch:
        origins.append(dim - patch)
    return origins


def tile_test_patches(volume: Volume, patch_size: int, overlap: int) -> list[PatchSample]:
    """Cover the volume with overlapping test patches.

    Patch origins advance by patch-overlap per axis; the final origin per
    axis is clamped so the last patch ends flush with the volume. Volumes
    smaller than the patch are end-padded with background.
    """
    p = patch_size
    data = _pad_to_shape(volume.data, (p, p, p))
    zdim, ydim, xdim = data.shape
    patches = []
    for z0 in tile_origins(zdim, p, overlap):
        for y0 in tile_origins(ydim, p, overlap):
            for x0 in tile_origins(xdim, p, overlap):
                crop = np.ascontiguousarray(data[z0 : z0 + p, y0 : y0 + p, x0 : x0 + p])
                patches.append(PatchSample(data=crop, origin=(x0, y0, z0)))
    return patches
