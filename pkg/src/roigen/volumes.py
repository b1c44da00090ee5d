"""Volume representation, file formats, ROI preprocessing and synthetic data.

Volumes are plain float32 numpy arrays indexed [depth, height, width].
After normalization every voxel lies in [-1, 1] with background at -1.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

RAW_MAGIC = b"VQ3D"

VALID_SPLITS = ("train", "val", "test")


class VolumeError(ValueError):
    pass


def _as_volume(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    if a.ndim != 3:
        raise VolumeError(f"expected a 3D grid, got shape {a.shape}")
    return a


def normalize(raw) -> np.ndarray:
    """Affinely map intensities to [-1, 1].

    A constant input maps to all -1 (the background value of masked ROIs).
    """
    v = _as_volume(raw)
    if v.size == 0:
        raise VolumeError("empty volume")
    if not np.all(np.isfinite(v)):
        n_bad = int(np.sum(~np.isfinite(v)))
        raise VolumeError(f"non-finite input: {n_bad} bad voxels")
    lo = float(v.min())
    hi = float(v.max())
    if hi <= lo:
        return np.full_like(v, -1.0)
    out = 2.0 * (v - lo) / (hi - lo) - 1.0
    return out.astype(np.float32)


def _drop_zero_slices(v: np.ndarray) -> np.ndarray:
    for axis in range(3):
        other = tuple(i for i in range(3) if i != axis)
        keep = np.any(v != 0, axis=other)
        v = np.compress(keep, v, axis=axis)
    return v


def _crop_pad_center(v: np.ndarray, target: int) -> np.ndarray:
    """Center-crop or zero-pad each axis to `target`, centered on the
    nonzero bounding-box centroid (crop window clamped to bounds)."""
    nz = np.nonzero(v)
    out = v
    for axis in range(3):
        n = out.shape[axis]
        if n == target:
            continue
        if len(nz[0]):
            idx = np.nonzero(out)[axis]
            center = (idx.min() + idx.max() + 1) / 2 if idx.size else n / 2
        else:
            center = n / 2
        if n > target:
            start = int(round(center - target / 2))
            start = max(0, min(start, n - target))
            sl = [slice(None)] * 3
            sl[axis] = slice(start, start + target)
            out = out[tuple(sl)]
        else:
            before = (target - n) // 2
            after = target - n - before
            pad = [(0, 0)] * 3
            pad[axis] = (before, after)
            out = np.pad(out, pad)
    return out


def extract_roi(brain, mask, target: int) -> np.ndarray:
    """Mask the brain to the ROI, drop all-zero slices per axis, and
    crop/pad to a target^3 cube."""
    brain = _as_volume(brain)
    mask = np.asarray(mask)
    if mask.shape != brain.shape:
        raise VolumeError(f"mask shape {mask.shape} != brain shape {brain.shape}")
    if not np.any(mask):
        raise VolumeError("no ROI present: segmentation mask is all zeros")
    roi = brain * (mask != 0)
    roi = _drop_zero_slices(roi)
    if roi.size == 0:
        raise VolumeError("no ROI present: masked volume is all zeros")
    return _crop_pad_center(roi, target).astype(np.float32)


def slice_plane(v, plane: str, i: int) -> np.ndarray:
    """Extract a 2D slice: axial v[:,:,i], coronal v[:,i,:], sagittal v[i,:,:]."""
    v = _as_volume(v)
    axis = {"axial": 2, "coronal": 1, "sagittal": 0}.get(plane)
    if axis is None:
        raise VolumeError(f"unknown plane {plane!r}")
    if not 0 <= i < v.shape[axis]:
        raise VolumeError(f"slice index {i} out of range for {plane} (size {v.shape[axis]})")
    if plane == "axial":
        return v[:, :, i]
    if plane == "coronal":
        return v[:, i, :]
    return v[i, :, :]


def make_synthetic_roi(seed: int, edge: int = 32, blobs: int = 3) -> np.ndarray:
    """Deterministic synthetic tumor-like ROI: a union of randomized
    anisotropic ellipsoids with multiplicative texture, normalized to [-1, 1].

    Nonzero support is strictly interior; boundary slices are all -1.
    """
    if edge < 16:
        raise VolumeError("edge must be >= 16")
    if blobs < 1:
        raise VolumeError("blobs must be >= 1")
    rng = np.random.default_rng(seed)
    coords = np.stack(np.meshgrid(*[np.arange(edge)] * 3, indexing="ij"), axis=-1).astype(np.float64)
    field = np.zeros((edge, edge, edge))
    union = np.zeros((edge, edge, edge), dtype=bool)
    margin = max(2, edge // 8)
    for _ in range(blobs):
        axes = rng.uniform(edge / 10.0, edge / 5.0, size=3)
        amax = axes.max()
        lo, hi = margin + amax, edge - 1 - margin - amax
        if hi <= lo:
            lo, hi = edge * 0.35, edge * 0.65
        center = rng.uniform(lo, hi, size=3)
        # random orientation via QR of a Gaussian matrix
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        d = (coords - center) @ q
        quad = np.sum((d / axes) ** 2, axis=-1)
        inside = quad <= 1.0
        union |= inside
        field += np.where(inside, 1.0 - quad, 0.0) * rng.uniform(0.5, 1.0)
    texture = 1.0 + 0.4 * ndimage.gaussian_filter(rng.standard_normal(field.shape), sigma=2.0)
    intensity = np.where(union, field * np.abs(texture), 0.0)
    # enforce strictly interior support
    shell = np.ones_like(intensity, dtype=bool)
    shell[1:-1, 1:-1, 1:-1] = False
    intensity[shell] = 0.0
    return normalize(intensity)


# ---------------------------------------------------------------------------
# File formats

def save_raw(path, v) -> None:
    """Raw container: magic 'VQ3D', three little-endian uint32 dims
    (depth, height, width), then row-major float32 voxels."""
    v = _as_volume(v)
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<III", *v.shape))
        f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != RAW_MAGIC:
            raise VolumeError(f"{path}: bad magic {magic!r}, expected {RAW_MAGIC!r}")
        d, h, w = struct.unpack("<III", f.read(12))
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != d * h * w:
        raise VolumeError(f"{path}: expected {d * h * w} voxels, got {data.size}")
    return data.reshape(d, h, w).astype(np.float32)


_NIFTI_HDR_SIZE = 348


def save_nifti(path, v, spacing=(1.0, 1.0, 1.0)) -> None:
    """Minimal single-file NIfTI-1 writer (float32, optionally gzipped)."""
    v = _as_volume(v)
    hdr = bytearray(_NIFTI_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _NIFTI_HDR_SIZE)
    # dim[0]=3 plus sizes; stored x-fastest, so dims are reversed
    dims = (3, v.shape[2], v.shape[1], v.shape[0], 1, 1, 1, 1)
    struct.pack_into("<8h", hdr, 40, *dims)
    struct.pack_into("<h", hdr, 70, 16)  # datatype: float32
    struct.pack_into("<h", hdr, 72, 32)  # bitpix
    struct.pack_into("<8f", hdr, 76, 1.0, spacing[2], spacing[1], spacing[0], 1, 1, 1, 1)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    hdr[344:348] = b"n+1\x00"
    payload = bytes(hdr) + b"\x00" * 4 + np.ascontiguousarray(v, dtype="<f4").tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as f:
        f.write(payload)


def load_nifti(path) -> np.ndarray:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        blob = f.read()
    if len(blob) < _NIFTI_HDR_SIZE or struct.unpack_from("<i", blob, 0)[0] != _NIFTI_HDR_SIZE:
        raise VolumeError(f"{path}: not a NIfTI-1 file")
    dims = struct.unpack_from("<8h", blob, 40)
    if dims[0] != 3:
        raise VolumeError(f"{path}: expected a 3D image, dim[0]={dims[0]}")
    datatype = struct.unpack_from("<h", blob, 70)[0]
    if datatype != 16:
        raise VolumeError(f"{path}: unsupported datatype {datatype} (float32 only)")
    vox_offset = int(struct.unpack_from("<f", blob, 108)[0])
    w, h, d = dims[1], dims[2], dims[3]
    data = np.frombuffer(blob, dtype="<f4", count=d * h * w, offset=vox_offset)
    return data.reshape(d, h, w).astype(np.float32)


def save_volume(path, v) -> None:
    p = str(path)
    if p.endswith((".nii", ".nii.gz")):
        save_nifti(path, v)
    else:
        save_raw(path, v)


def load_volume(path) -> np.ndarray:
    p = str(path)
    if p.endswith((".nii", ".nii.gz")):
        return load_nifti(path)
    return load_raw(path)


# ---------------------------------------------------------------------------
# Dataset manifest

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    split: str


def write_manifest(path, entries) -> None:
    """UTF-8 text, one tab-separated (path, label, split) record per line."""
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            if e.split not in VALID_SPLITS:
                raise VolumeError(f"invalid split {e.split!r}")
            f.write(f"{e.path}\t{e.label}\t{e.split}\n")


def read_manifest(path) -> list[ManifestEntry]:
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise VolumeError(f"{path}:{lineno}: expected 3 tab-separated fields")
            p, label, split = parts
            if split not in VALID_SPLITS:
                raise VolumeError(f"{path}:{lineno}: invalid split {split!r}")
            if p in seen:
                raise VolumeError(f"{path}:{lineno}: duplicate path {p!r}")
            seen.add(p)
            entries.append(ManifestEntry(p, label, split))
    return entries


def load_manifest_volumes(manifest_path, split=None) -> list[np.ndarray]:
    base = os.path.dirname(os.path.abspath(manifest_path))
    vols = []
    for e in read_manifest(manifest_path):
        if split is not None and e.split != split:
            continue
        p = e.path if os.path.isabs(e.path) else os.path.join(base, e.path)
        vols.append(load_volume(p))
    return vols
