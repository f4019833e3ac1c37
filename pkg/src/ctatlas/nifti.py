"""Minimal NIfTI-1 reader/writer (single-file .nii / .nii.gz).

Honors dim, pixdim, scl_slope/scl_inter and the sform/qform orientation
fields. Intensities come back as float32 Hounsfield units, labels as uint16.
The affine is stored at float32 precision (format constraint), so geometry
round-trips within ~1e-6 at desk-scale coordinates rather than exactly.
Written files are byte-deterministic (gzip mtime pinned to 0).
"""
from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np

from .errors import FormatError, UnsupportedShapeError, ValidationError
from .geometry import GridGeometry
from .volume import DEFAULT_PADDING_HU, ImageVolume, LabelVolume

_HEADER_SIZE = 348
_VOX_OFFSET = 352  # header + 4-byte extension flag

_DTYPE_CODES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
    768: np.dtype(np.uint32),
    1024: np.dtype(np.int64),
    1280: np.dtype(np.uint64),
}
_CODE_FOR_DTYPE = {v: k for k, v in _DTYPE_CODES.items()}


def _header_dtype(byteorder: str) -> np.dtype:
    return np.dtype(
        [
            ("sizeof_hdr", f"{byteorder}i4"),
            ("data_type", "S10"),
            ("db_name", "S18"),
            ("extents", f"{byteorder}i4"),
            ("session_error", f"{byteorder}i2"),
            ("regular", "S1"),
            ("dim_info", "u1"),
            ("dim", f"{byteorder}i2", (8,)),
            ("intent_p1", f"{byteorder}f4"),
            ("intent_p2", f"{byteorder}f4"),
            ("intent_p3", f"{byteorder}f4"),
            ("intent_code", f"{byteorder}i2"),
            ("datatype", f"{byteorder}i2"),
            ("bitpix", f"{byteorder}i2"),
            ("slice_start", f"{byteorder}i2"),
            ("pixdim", f"{byteorder}f4", (8,)),
            ("vox_offset", f"{byteorder}f4"),
            ("scl_slope", f"{byteorder}f4"),
            ("scl_inter", f"{byteorder}f4"),
            ("slice_end", f"{byteorder}i2"),
            ("slice_code", "u1"),
            ("xyzt_units", "u1"),
            ("cal_max", f"{byteorder}f4"),
            ("cal_min", f"{byteorder}f4"),
            ("slice_duration", f"{byteorder}f4"),
            ("toffset", f"{byteorder}f4"),
            ("glmax", f"{byteorder}i4"),
            ("glmin", f"{byteorder}i4"),
            ("descrip", "S80"),
            ("aux_file", "S24"),
            ("qform_code", f"{byteorder}i2"),
            ("sform_code", f"{byteorder}i2"),
            ("quatern_b", f"{byteorder}f4"),
            ("quatern_c", f"{byteorder}f4"),
            ("quatern_d", f"{byteorder}f4"),
            ("qoffset_x", f"{byteorder}f4"),
            ("qoffset_y", f"{byteorder}f4"),
            ("qoffset_z", f"{byteorder}f4"),
            ("srow_x", f"{byteorder}f4", (4,)),
            ("srow_y", f"{byteorder}f4", (4,)),
            ("srow_z", f"{byteorder}f4", (4,)),
            ("intent_name", "S16"),
            ("magic", "S4"),
        ]
    )


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".gz":
        # mtime=0 keeps output bytes deterministic across runs
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)


def _quaternion_rotation(b: float, c: float, d: float) -> np.ndarray:
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a_sq, 0.0))
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )


def _affine_from_header(hdr) -> np.ndarray:
    if int(hdr["sform_code"]) > 0:
        aff = np.eye(4)
        aff[0, :] = hdr["srow_x"]
        aff[1, :] = hdr["srow_y"]
        aff[2, :] = hdr["srow_z"]
        return aff
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    spac = np.where(pixdim[1:4] > 0, pixdim[1:4], 1.0)
    if int(hdr["qform_code"]) > 0:
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        rot = _quaternion_rotation(
            float(hdr["quatern_b"]), float(hdr["quatern_c"]), float(hdr["quatern_d"])
        )
        aff = np.eye(4)
        aff[:3, :3] = rot @ np.diag([spac[0], spac[1], qfac * spac[2]])
        aff[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
        return aff
    return np.diag([spac[0], spac[1], spac[2], 1.0])


def _geometry_from_affine(affine: np.ndarray, dims) -> GridGeometry:
    mat = affine[:3, :3]
    spacing = np.linalg.norm(mat, axis=0)
    if np.any(spacing <= 0):
        raise FormatError("affine has a zero-length column")
    direction = mat / spacing
    gram = direction.T @ direction
    dev = np.max(np.abs(gram - np.eye(3)))
    if dev > 1e-3:
        raise FormatError("affine direction is not orthonormal (sheared grid)")
    if dev > 1e-7:
        u, _, vt = np.linalg.svd(direction)
        direction = u @ vt
    return GridGeometry(
        dims=tuple(int(d) for d in dims),
        spacing=tuple(float(s) for s in spacing),
        origin=tuple(float(o) for o in affine[:3, 3]),
        direction=direction,
    )


def _read_raw(path):
    """Read header + raw array (Fortran layout) with byte-order detection."""
    blob = _read_bytes(path)
    if len(blob) < _HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than a NIfTI-1 header")
    hdr = np.frombuffer(blob[:_HEADER_SIZE], dtype=_header_dtype("<"))[0]
    order = "<"
    if int(hdr["sizeof_hdr"]) != _HEADER_SIZE:
        hdr = np.frombuffer(blob[:_HEADER_SIZE], dtype=_header_dtype(">"))[0]
        order = ">"
        if int(hdr["sizeof_hdr"]) != _HEADER_SIZE:
            raise FormatError(f"{path}: not a NIfTI-1 file (bad sizeof_hdr)")
    magic = bytes(hdr["magic"]).rstrip(b"\x00")
    if magic not in (b"n+1", b"ni1"):
        raise FormatError(f"{path}: bad magic {magic!r}")
    if magic == b"ni1":
        raise FormatError(f"{path}: detached .hdr/.img pairs are not supported")
    ndim = int(hdr["dim"][0])
    if ndim < 1 or ndim > 7:
        raise FormatError(f"{path}: invalid dim[0]={ndim}")
    shape = tuple(int(d) for d in hdr["dim"][1 : ndim + 1])
    if any(d < 1 for d in shape):
        raise FormatError(f"{path}: non-positive dimension in {shape}")
    code = int(hdr["datatype"])
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unsupported datatype code {code}")
    dtype = _DTYPE_CODES[code].newbyteorder(order)
    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape))
    payload = blob[offset : offset + count * dtype.itemsize]
    if len(payload) < count * dtype.itemsize:
        raise FormatError(f"{path}: truncated data payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")
    return hdr, arr


def _scaled(hdr, arr: np.ndarray) -> np.ndarray:
    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    if slope == 0.0:
        slope = 1.0
    data = arr.astype(np.float32)
    if slope != 1.0 or inter != 0.0:
        data = data * np.float32(slope) + np.float32(inter)
    return data


def _squeeze_3d(path, hdr, arr: np.ndarray) -> np.ndarray:
    if arr.ndim < 3:
        raise UnsupportedShapeError(f"{path}: payload is {arr.ndim}D, expected 3D")
    if arr.ndim > 3:
        if any(d != 1 for d in arr.shape[3:]):
            raise UnsupportedShapeError(
                f"{path}: payload shape {arr.shape} is not a single-frame volume"
            )
        arr = arr.reshape(arr.shape[:3], order="F")
    return arr


def read_volume(path, padding_value: float = DEFAULT_PADDING_HU) -> ImageVolume:
    """Read a single-frame volumetric NIfTI-1 file as HU intensities."""
    hdr, arr = _read_raw(path)
    arr = _squeeze_3d(path, hdr, arr)
    geom = _geometry_from_affine(_affine_from_header(hdr), arr.shape)
    return ImageVolume(geometry=geom, data=_scaled(hdr, arr), padding_value=padding_value)


def read_labels(path, label_names: dict[int, str] | None = None) -> LabelVolume:
    """Read a single-frame volumetric NIfTI-1 file as integer labels."""
    hdr, arr = _read_raw(path)
    arr = _squeeze_3d(path, hdr, arr)
    geom = _geometry_from_affine(_affine_from_header(hdr), arr.shape)
    data = _scaled(hdr, arr)
    if not np.allclose(data, np.round(data)):
        raise ValidationError(f"{path}: label file holds non-integral values")
    return LabelVolume(geometry=geom, data=np.round(data), label_names=label_names)


def _write_raw(path, arr: np.ndarray, geom: GridGeometry) -> None:
    """Write a 3D or 4D array with the given spatial geometry."""
    if arr.dtype not in _CODE_FOR_DTYPE:
        raise ValidationError(f"cannot store dtype {arr.dtype}")
    hdr = np.zeros((), dtype=_header_dtype("<"))
    hdr["sizeof_hdr"] = _HEADER_SIZE
    hdr["regular"] = b"r"
    dim = np.ones(8, dtype=np.int16)
    dim[0] = arr.ndim
    dim[1 : arr.ndim + 1] = arr.shape
    hdr["dim"] = dim
    hdr["datatype"] = _CODE_FOR_DTYPE[arr.dtype]
    hdr["bitpix"] = arr.dtype.itemsize * 8
    pixdim = np.zeros(8, dtype=np.float32)
    pixdim[0] = 1.0
    pixdim[1:4] = geom.spacing
    if arr.ndim > 3:
        pixdim[4 : arr.ndim + 1] = 1.0
    hdr["pixdim"] = pixdim
    hdr["vox_offset"] = _VOX_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["descrip"] = b"ctatlas"
    hdr["sform_code"] = 1
    hdr["qform_code"] = 0
    affine = geom.affine.astype(np.float32)
    hdr["srow_x"] = affine[0]
    hdr["srow_y"] = affine[1]
    hdr["srow_z"] = affine[2]
    hdr["magic"] = b"n+1"
    payload = np.asfortranarray(arr).tobytes(order="F")
    _write_bytes(path, hdr.tobytes() + b"\x00\x00\x00\x00" + payload)


def write_volume(vol, path) -> None:
    """Write an :class:`ImageVolume` (float32) or :class:`LabelVolume` (uint16)."""
    if isinstance(vol, LabelVolume):
        _write_raw(path, vol.data.astype(np.uint16), vol.geometry)
    elif isinstance(vol, ImageVolume):
        _write_raw(path, vol.data.astype(np.float32), vol.geometry)
    else:
        raise ValidationError(f"cannot write object of type {type(vol).__name__}")
