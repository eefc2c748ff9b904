"""Complex grids, centered orthonormal DFTs and the .hdr/.cfl array container.

Images, coil maps and k-space channels are plain ``numpy`` complex128 arrays
with shape ``(rows, cols)``; stacks carry a leading channel axis.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

__all__ = [
    "ArrayFormatError",
    "as_grid",
    "dft_centered",
    "idft_centered",
    "read_array",
    "write_array",
    "stack_to_array",
    "array_to_stack",
    "kspace_coords",
]


class ArrayFormatError(ValueError):
    """Header and payload of an array file disagree."""


def as_grid(x) -> np.ndarray:
    """Return ``x`` as a complex128 array, checking every sample is finite."""
    g = np.asarray(x, dtype=np.complex128)
    if not np.all(np.isfinite(g)):
        raise ValueError("grid contains non-finite samples")
    return g


def dft_centered(img: np.ndarray, axes=(-2, -1)) -> np.ndarray:
    """Orthonormal 2D DFT with the DC sample at index ``(rows//2, cols//2)``."""
    img = np.asarray(img, dtype=np.complex128)
    return np.fft.fftshift(
        np.fft.fft2(np.fft.ifftshift(img, axes=axes), axes=axes, norm="ortho"), axes=axes
    )


def idft_centered(ksp: np.ndarray, axes=(-2, -1)) -> np.ndarray:
    """Inverse of :func:`dft_centered` (and its adjoint)."""
    ksp = np.asarray(ksp, dtype=np.complex128)
    return np.fft.fftshift(
        np.fft.ifft2(np.fft.ifftshift(ksp, axes=axes), axes=axes, norm="ortho"), axes=axes
    )


def kspace_coords(rows: int, cols: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized centered frequency coordinates in [-0.5, 0.5), as 2D arrays."""
    ky = (np.arange(rows) - rows // 2) / rows
    kx = (np.arange(cols) - cols // 2) / cols
    return np.meshgrid(ky, kx, indexing="ij")


def _base(path) -> str:
    p = os.fspath(path)
    for ext in (".hdr", ".cfl"):
        if p.endswith(ext):
            return p[: -len(ext)]
    return p


def write_array(path, data: np.ndarray, dims=None) -> None:
    """Write ``data`` as ``<path>.hdr`` + ``<path>.cfl``.

    ``dims`` defaults to ``data.shape``; the payload is complex64 little-endian
    in column-major (Fortran) order.
    """
    data = np.asarray(data)
    if dims is None:
        dims = list(data.shape) or [1]
    dims = [int(d) for d in dims]
    if len(dims) > 8:
        raise ArrayFormatError(f"at most 8 dimensions supported, got {len(dims)}")
    if any(d < 1 for d in dims):
        raise ArrayFormatError(f"dimensions must be positive, got {dims}")
    if int(np.prod(dims)) != data.size:
        raise ArrayFormatError(
            f"dims {dims} describe {int(np.prod(dims))} samples but data has {data.size}"
        )
    base = _base(path)
    payload = np.asarray(data, dtype="<c8").reshape(dims, order="F")
    with open(base + ".hdr", "w") as f:
        f.write("# Dimensions\n")
        f.write(" ".join(str(d) for d in dims) + "\n")
    with open(base + ".cfl", "wb") as f:
        f.write(payload.tobytes(order="F"))


def read_array(path) -> tuple[list[int], np.ndarray]:
    """Read an array file pair; returns ``(dims, data)`` with ``data.shape == dims``.

    The payload is returned as complex64 so a read-write cycle is bit-exact.
    """
    base = _base(path)
    hdr = Path(base + ".hdr")
    cfl = Path(base + ".cfl")
    with open(hdr) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    dims_line = None
    for i, ln in enumerate(lines):
        if ln.startswith("# Dimensions"):
            if i + 1 < len(lines):
                dims_line = lines[i + 1]
            break
    if dims_line is None:
        raise ArrayFormatError(f"{hdr}: missing '# Dimensions' section")
    try:
        dims = [int(tok) for tok in dims_line.split()]
    except ValueError as exc:
        raise ArrayFormatError(f"{hdr}: bad dimension line {dims_line!r}") from exc
    if not dims or any(d < 1 for d in dims):
        raise ArrayFormatError(f"{hdr}: bad dimensions {dims}")
    expected = 8 * int(np.prod(dims))
    actual = cfl.stat().st_size
    if actual != expected:
        raise ArrayFormatError(
            f"{cfl}: expected {expected} bytes for dims {dims}, found {actual}"
        )
    raw = np.fromfile(cfl, dtype="<c8")
    return dims, raw.reshape(dims, order="F")


def stack_to_array(stack: np.ndarray) -> np.ndarray:
    """(nc, rows, cols) channel stack -> (rows, cols, nc) on-disk layout."""
    stack = np.asarray(stack)
    if stack.ndim == 2:
        return stack
    return np.moveaxis(stack, 0, -1)


def array_to_stack(data: np.ndarray) -> np.ndarray:
    """(rows, cols[, nc, ...]) on-disk layout -> (nc, rows, cols) stack in complex128.

    Trailing axes beyond the second are flattened into the channel axis.
    """
    data = np.asarray(data, dtype=np.complex128)
    if data.ndim < 2:
        data = data.reshape(data.shape + (1,) * (2 - data.ndim))
    rows, cols = data.shape[:2]
    flat = data.reshape(rows, cols, -1, order="F")
    return np.moveaxis(flat, -1, 0).copy()
