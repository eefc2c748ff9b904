"""Magnitude training data: minimal NIfTI-1 reading, slicing and normalization."""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .rng import stream

__all__ = [
    "NiftiFormatError",
    "Volume",
    "read_nifti",
    "write_nifti",
    "conform_slices",
    "prep_slice",
    "PatchStats",
    "exclusion_check",
]

HEADER_SIZE = 348
# NIfTI-1 datatype codes we understand
DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}


class NiftiFormatError(ValueError):
    pass


@dataclass
class Volume:
    nx: int
    ny: int
    nz: int
    spacing: tuple[float, float, float]
    data: np.ndarray  # float64, shape (nx, ny, nz)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.nx, self.ny, self.nz):
            raise ValueError(f"data shape {self.data.shape} != extents {(self.nx, self.ny, self.nz)}")
        if len(self.spacing) != 3 or not all(s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing}")


def _header_fields(hdr: bytes, path) -> dict:
    if len(hdr) < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: header truncated ({len(hdr)} of {HEADER_SIZE} bytes), field 'sizeof_hdr'")
    for end in "<>":
        if struct.unpack(end + "i", hdr[:4])[0] == HEADER_SIZE:
            break
    else:
        raise NiftiFormatError(f"{path}: bad 'sizeof_hdr' (expected {HEADER_SIZE})")
    magic = hdr[344:348]
    if magic not in (b"n+1\0", b"ni1\0"):
        raise NiftiFormatError(f"{path}: bad 'magic' {magic!r}")
    dim = struct.unpack(end + "8h", hdr[40:56])
    datatype, bitpix = struct.unpack(end + "2h", hdr[70:74])
    pixdim = struct.unpack(end + "8f", hdr[76:108])
    vox_offset, slope, inter = struct.unpack(end + "3f", hdr[108:120])
    return dict(end=end, magic=magic, dim=dim, datatype=datatype, bitpix=bitpix, pixdim=pixdim,
                vox_offset=vox_offset, scl_slope=slope, scl_inter=inter)


def read_nifti(path) -> Volume:
    """Read an uncompressed single- or two-file NIfTI-1 volume (first three axes)."""
    path = os.fspath(path)
    with open(path, "rb") as f:
        raw = f.read()
    h = _header_fields(raw[:HEADER_SIZE], path)
    ndim = h["dim"][0]
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"{path}: bad 'dim[0]' = {ndim}")
    ext = [max(1, d) for d in h["dim"][1:1 + ndim]]
    if any(d < 1 for d in h["dim"][1:1 + ndim]):
        raise NiftiFormatError(f"{path}: non-positive extent in 'dim' {h['dim']}")
    if any(d != 1 for d in ext[3:]):
        raise NiftiFormatError(f"{path}: 'dim' {h['dim']} has more than three non-trivial axes")
    ext = (ext + [1, 1, 1])[:3]
    if h["datatype"] not in DTYPES:
        raise NiftiFormatError(f"{path}: unsupported 'datatype' {h['datatype']}")
    dt = np.dtype(DTYPES[h["datatype"]]).newbyteorder(h["end"])
    if h["bitpix"] != 8 * dt.itemsize:
        raise NiftiFormatError(f"{path}: 'bitpix' {h['bitpix']} does not match datatype {h['datatype']}")

    if h["magic"] == b"n+1\0":
        offset = int(h["vox_offset"])
        if offset < HEADER_SIZE:
            raise NiftiFormatError(f"{path}: 'vox_offset' {h['vox_offset']} inside the header")
        payload = raw[offset:]
    else:
        img = os.path.splitext(path)[0] + ".img"
        with open(img, "rb") as f:
            payload = f.read()[int(h["vox_offset"]):]
    count = ext[0] * ext[1] * ext[2]
    if len(payload) != count * dt.itemsize:
        raise NiftiFormatError(
            f"{path}: payload is {len(payload)} bytes, 'dim' {tuple(ext)} x 'bitpix' {h['bitpix']} "
            f"declares {count * dt.itemsize}"
        )
    data = np.frombuffer(payload, dtype=dt).astype(np.float64).reshape(ext, order="F")
    slope, inter = h["scl_slope"], h["scl_inter"]
    if slope != 0 and np.isfinite(slope):
        data = data * slope + (inter if np.isfinite(inter) else 0.0)
    spacing = tuple(abs(float(p)) for p in h["pixdim"][1:4])
    for k in range(ndim, 3):
        spacing = spacing[:k] + (1.0,) + spacing[k + 1:]
    if not all(s > 0 for s in spacing):
        raise NiftiFormatError(f"{path}: non-positive 'pixdim' {h['pixdim'][1:4]}")
    return Volume(*ext, spacing=spacing, data=data)


def write_nifti(path, data, spacing=(1.0, 1.0, 1.0), datatype: int = 16, slope: float = 0.0,
                inter: float = 0.0) -> None:
    """Minimal single-file NIfTI-1 writer (little endian), mostly for tests and demos."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError("expected a 3D volume")
    dt = np.dtype(DTYPES[datatype]).newbyteorder("<")
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, 8 * dt.itemsize)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<3f", hdr, 108, 352.0, slope, inter)
    hdr[344:348] = b"n+1\0"
    with open(path, "wb") as f:
        f.write(bytes(hdr) + b"\0" * 4 + data.astype(dt).tobytes(order="F"))


def conform_slices(vol: Volume, target: int = 256, spacing: float = 1.0) -> list[np.ndarray]:
    """Bilinearly resample every axial slice to ``target x target`` at ``spacing`` mm.

    Grids are centered on each other, so the physical field of view is kept;
    samples beyond the input extent repeat the nearest edge value.
    """
    sx, sy = vol.spacing[0], vol.spacing[1]
    if not (sx > 0 and sy > 0 and spacing > 0) or target < 1:
        raise ValueError(f"degenerate spacing ({sx}, {sy}) -> {spacing} or target {target}")
    pos = (np.arange(target) - (target - 1) / 2) * spacing
    ix = pos / sx + (vol.nx - 1) / 2
    iy = pos / sy + (vol.ny - 1) / 2
    coords = np.stack(np.meshgrid(ix, iy, indexing="ij"))
    return [map_coordinates(vol.data[:, :, z], coords, order=1, mode="nearest") for z in range(vol.nz)]


def prep_slice(sl, noise_mean: float = 0.003, noise_sd: float = 5.0, seed=0, index: int = 0):
    """Add Gaussian background noise, clamp at zero and scale to peak one.

    Noise is drawn in raw intensity units from stream ``(seed, index)``. Returns
    ``None`` (with a warning) when nothing positive is left.
    """
    sl = np.asarray(sl, dtype=np.float64)
    if np.any(sl < 0):
        raise ValueError("slice must be non-negative")
    out = sl + noise_mean
    if noise_sd:
        out = out + noise_sd * stream(seed, index).standard_normal(sl.shape)
    out = np.maximum(out, 0.0)
    peak = out.max()
    if not peak > 0:
        warnings.warn(f"slice {index} is empty after noise; excluded")
        return None
    return out / peak


@dataclass(frozen=True)
class PatchStats:
    keep: bool
    mean: float
    sd: float


_CORNERS = ("tl", "tr", "bl", "br")


def exclusion_check(grid, patch: int = 30, corner: str = "tl", mean_below: float = 0.04,
                    sd_below: float = 0.0061) -> PatchStats:
    """Exclude a slice whose corner patch is dark AND flat (mean and sd both below threshold).

    ``corner`` picks the patch: ``tl`` is the (0, 0) index corner, ``tr`` is
    row 0 / last column, and so on.
    """
    g = np.asarray(grid, dtype=np.float64)
    if corner not in _CORNERS:
        raise ValueError(f"corner must be one of {_CORNERS}")
    if g.ndim != 2 or g.shape[0] < patch or g.shape[1] < patch:
        raise ValueError(f"grid {g.shape} smaller than the {patch}x{patch} patch")
    rows = slice(0, patch) if corner[0] == "t" else slice(g.shape[0] - patch, None)
    cols = slice(0, patch) if corner[1] == "l" else slice(g.shape[1] - patch, None)
    p = g[rows, cols]
    mu, sd = float(p.mean()), float(p.std())
    return PatchStats(keep=not (mu < mean_below and sd < sd_below), mean=mu, sd=sd)
