"""Minimal single-file NIfTI-1 I/O.

Covers exactly what the registration pipeline needs: little-endian ``.nii``
(optionally gzipped), 3D scalar volumes and 4D channel stacks, datatypes
uint8 / int16 / float32. The affine comes from the sform when sform_code > 0,
else the qform quaternion, else a scaled identity from pixdim. The writer
always emits an sform. Anything outside that envelope raises FileFormatError
rather than guessing.
"""

from __future__ import annotations

import gzip
import struct

import numpy as np

from .errors import FileFormatError

HEADER_SIZE = 348
VOX_OFFSET = 352

_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
_CODES = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16}


def _open_read(path):
    f = open(path, "rb")
    magic = f.read(2)
    f.seek(0)
    if magic == b"\x1f\x8b":
        inner = f
        return gzip.GzipFile(fileobj=inner, mode="rb")
    return f


def _quaternion_affine(hdr) -> np.ndarray:
    b, c, d = hdr["quatern"]
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a2) if a2 > 0.0 else 0.0
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    spacing = np.array([hdr["pixdim"][1], hdr["pixdim"][2], hdr["pixdim"][3] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = rot * spacing
    affine[:3, 3] = hdr["qoffset"]
    return affine


def _parse_header(raw: bytes) -> dict:
    if len(raw) < HEADER_SIZE:
        raise FileFormatError(f"truncated NIfTI header ({len(raw)} bytes)")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != HEADER_SIZE:
        raise FileFormatError(
            "bad sizeof_hdr (not a little-endian NIfTI-1 file)")
    magic = raw[344:348]
    if magic[:3] != b"n+1":
        raise FileFormatError(f"unsupported magic {magic!r} (need single-file n+1)")
    hdr = {
        "dim": struct.unpack_from("<8h", raw, 40),
        "datatype": struct.unpack_from("<h", raw, 70)[0],
        "pixdim": struct.unpack_from("<8f", raw, 76),
        "vox_offset": struct.unpack_from("<f", raw, 108)[0],
        "scl_slope": struct.unpack_from("<f", raw, 112)[0],
        "scl_inter": struct.unpack_from("<f", raw, 116)[0],
        "qform_code": struct.unpack_from("<h", raw, 252)[0],
        "sform_code": struct.unpack_from("<h", raw, 254)[0],
        "quatern": struct.unpack_from("<3f", raw, 256),
        "qoffset": struct.unpack_from("<3f", raw, 268),
        "srow": np.array(struct.unpack_from("<12f", raw, 280)).reshape(3, 4),
    }
    return hdr


def read_nifti(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a .nii or .nii.gz file; returns (data, affine).

    data has shape (nx, ny, nz) or (nx, ny, nz, k); the affine maps voxel
    index to world mm (RAS).
    """
    with _open_read(path) as f:
        raw = f.read()
    hdr = _parse_header(raw)

    ndim = hdr["dim"][0]
    if ndim not in (3, 4):
        raise FileFormatError(f"expected 3D or 4D volume, dim[0]={ndim}")
    dims = list(hdr["dim"][1:1 + ndim])
    if ndim == 4 and dims[3] == 1:
        ndim, dims = 3, dims[:3]
    if any(n < 1 for n in dims):
        raise FileFormatError(f"bad dimensions {dims}")

    if hdr["datatype"] not in _DTYPES:
        raise FileFormatError(f"unsupported datatype code {hdr['datatype']}")
    dtype = _DTYPES[hdr["datatype"]]

    offset = int(hdr["vox_offset"])
    count = int(np.prod(dims))
    payload = raw[offset:offset + count * np.dtype(dtype).itemsize]
    if len(payload) < count * np.dtype(dtype).itemsize:
        raise FileFormatError("file shorter than header promises")
    flat = np.frombuffer(payload, dtype=np.dtype(dtype).newbyteorder("<"))
    # file layout is x-fastest: reshape slowest-first then transpose back
    data = flat.reshape(dims[::-1]).transpose(tuple(range(len(dims)))[::-1])
    data = np.ascontiguousarray(data)

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if np.isfinite(slope) and slope != 0.0 and (slope != 1.0 or inter != 0.0):
        data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)

    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[:3, :] = hdr["srow"]
    elif hdr["qform_code"] > 0:
        affine = _quaternion_affine(hdr)
    else:
        affine = np.diag([hdr["pixdim"][1] or 1.0, hdr["pixdim"][2] or 1.0,
                          hdr["pixdim"][3] or 1.0, 1.0])
    return data, affine.astype(np.float64)


def write_nifti(path, data: np.ndarray, affine: np.ndarray) -> None:
    """Write data (3D or 4D, dtype uint8/int16/float32) with an sform affine."""
    data = np.asarray(data)
    if data.ndim not in (3, 4):
        raise ValueError(f"only 3D/4D supported, got shape {data.shape}")
    if data.dtype not in _CODES:
        raise ValueError(f"unsupported dtype {data.dtype}; use uint8/int16/float32")
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ValueError("affine must be 4x4")

    dim = [data.ndim, 1, 1, 1, 1, 1, 1, 1]
    dim[1:1 + data.ndim] = data.shape
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    pixdim = [1.0, spacing[0], spacing[1], spacing[2], 1.0, 0.0, 0.0, 0.0]

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, _CODES[data.dtype])
    struct.pack_into("<h", hdr, 72, data.dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, 112, 1.0)  # scl_slope
    struct.pack_into("<f", hdr, 116, 0.0)  # scl_inter
    descrip = b"longreg"
    struct.pack_into("80s", hdr, 148, descrip)
    struct.pack_into("<h", hdr, 252, 0)  # qform_code: sform is authoritative
    struct.pack_into("<h", hdr, 254, 1)  # sform_code = scanner
    struct.pack_into("<12f", hdr, 280, *affine[:3, :].ravel())
    struct.pack_into("4s", hdr, 344, b"n+1\x00")

    payload = bytes(hdr) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + data.tobytes(order="F")
    if str(path).endswith(".gz"):
        # mtime=0 and an empty name keep the output a pure function of the data
        with open(path, "wb") as f:
            with gzip.GzipFile(filename="", fileobj=f, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)
