"""Minimal NIfTI-1 reader/writer.

Supported subset: single-file .nii, uncompressed, little-endian, 3-D,
datatype uint8/int16/uint16/float32. Anything else is rejected rather than
guessed at, so round-trips stay bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, UnsupportedError
from .volume import LabelMap, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352.0
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

# NIfTI datatype code -> numpy dtype (little-endian)
_DTYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
    512: np.dtype("<u2"),
}
_CODES = {v: k for k, v in _DTYPES.items()}
_BITPIX = {code: dt.itemsize * 8 for code, dt in _DTYPES.items()}


def _pack_header(dims, pixdim, datatype: int, affine: np.ndarray | None) -> bytes:
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, datatype)
    struct.pack_into("<h", hdr, 72, _BITPIX[datatype])
    struct.pack_into("<8f", hdr, 76, 0.0, pixdim[0], pixdim[1], pixdim[2], 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", hdr, 108, VOX_OFFSET)
    if affine is not None:
        struct.pack_into("<h", hdr, 254, 1)
        struct.pack_into("<4f", hdr, 280, *affine[0, :4])
        struct.pack_into("<4f", hdr, 296, *affine[1, :4])
        struct.pack_into("<4f", hdr, 312, *affine[2, :4])
    hdr[344:348] = MAGIC_SINGLE
    return bytes(hdr)


def write_nifti(v: Volume | LabelMap, path) -> None:
    """Write a Volume (float32) or LabelMap (uint16) as a single .nii file."""
    if isinstance(v, LabelMap):
        payload = v.data.astype("<u2", copy=False)
        datatype = 512
        affine = None
    elif isinstance(v, Volume):
        payload = v.data.astype("<f4", copy=False)
        datatype = 16
        affine = v.affine
    else:
        raise ParameterError(f"cannot write {type(v).__name__} as NIfTI")
    hdr = _pack_header(v.dims, v.spacing, datatype, affine)
    # 4 zero bytes after the header: no extensions, data starts at 352.
    Path(path).write_bytes(hdr + b"\x00" * 4 + payload.tobytes(order="F"))


def read_nifti(path, as_labels: bool = False, num_classes: int | None = None):
    """Read a supported .nii file.

    With ``as_labels`` the payload must be an integer datatype and is returned
    as a LabelMap; ``num_classes`` defaults to max(label) + 1 (at least 2).
    """
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raise UnsupportedError(f"{path}: gzip-compressed NIfTI is not supported")
    if len(raw) < HEADER_SIZE:
        raise OSError(f"{path}: truncated header ({len(raw)} bytes)")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr == 540:
        raise UnsupportedError(f"{path}: NIfTI-2 is not supported")
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise UnsupportedError(f"{path}: big-endian NIfTI is not supported")
        raise FormatError(f"{path}: bad sizeof_hdr {sizeof_hdr}")
    magic = raw[344:348]
    if magic == MAGIC_PAIR:
        raise FormatError(f"{path}: two-file (.hdr/.img) form is not supported")
    if magic != MAGIC_SINGLE:
        raise FormatError(f"{path}: bad magic {magic!r}")

    dim = struct.unpack_from("<8h", raw, 40)
    if dim[0] != 3:
        raise UnsupportedError(f"{path}: only 3-D images supported, got dim[0]={dim[0]}")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in dims):
        raise FormatError(f"{path}: non-positive dims {dims}")
    (datatype,) = struct.unpack_from("<h", raw, 70)
    if datatype not in _DTYPES:
        raise UnsupportedError(f"{path}: datatype code {datatype} not supported")
    pixdim = struct.unpack_from("<8f", raw, 76)
    spacing = tuple(float(p) if p > 0 else 1.0 for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    offset = int(round(vox_offset))
    if offset < HEADER_SIZE:
        raise FormatError(f"{path}: vox_offset {vox_offset} inside header")
    (sform_code,) = struct.unpack_from("<h", raw, 254)
    affine = None
    if sform_code > 0:
        rows = [struct.unpack_from("<4f", raw, o) for o in (280, 296, 312)]
        affine = np.array(rows + [(0.0, 0.0, 0.0, 1.0)], dtype=np.float64)

    dt = _DTYPES[datatype]
    nbytes = int(np.prod(dims)) * dt.itemsize
    if len(raw) < offset + nbytes:
        raise OSError(f"{path}: truncated data (need {offset + nbytes} bytes, have {len(raw)})")
    data = np.frombuffer(raw, dtype=dt, count=int(np.prod(dims)), offset=offset)
    data = data.reshape(dims, order="F")

    if as_labels:
        if datatype == 16:
            raise ParameterError(f"{path}: float data cannot be loaded as labels")
        if data.size and int(data.min()) < 0:
            raise ParameterError(f"{path}: negative values cannot be labels")
        arr = np.ascontiguousarray(data).astype(np.uint16)
        if num_classes is None:
            num_classes = max(int(arr.max()) + 1 if arr.size else 2, 2)
        return LabelMap(arr, num_classes, spacing=spacing)
    return Volume(np.ascontiguousarray(data, dtype=np.float32), spacing=spacing, affine=affine)
