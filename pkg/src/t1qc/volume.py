"""Core 3D volume type, NIfTI-1 I/O, intensity normalization, rigid-body
resampling and 3D Fourier transforms.

Conventions fixed here and relied on everywhere else:

* Arrays are C-ordered; axis 0 is the slowest storage axis.
* ``RigidTransform`` rotations are intrinsic, applied about x first, then
  y, then z (matrix ``Rx @ Ry @ Rz``), around the geometric center of the
  voxel grid, in physical (mm) coordinates.
* ``resample_rigid(vol, t)`` moves the image content *by* ``t``: the
  output at position ``p`` samples the input at ``t^-1(p)``.
* FFTs use the numpy convention (forward unnormalized, inverse 1/N),
  which satisfies the round-trip and Parseval contracts.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from t1qc.errors import DataError

__all__ = [
    "Volume3D",
    "RigidTransform",
    "KSpace",
    "load_nifti",
    "save_nifti",
    "normalize_minmax",
    "resample_rigid",
    "fft3",
    "ifft3",
]


@dataclass
class Volume3D:
    """A dense 3D scalar image with voxel spacing and voxel-to-world affine."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DataError(f"volume data must be 3D, got {self.data.ndim}D")
        if any(d < 1 for d in self.data.shape):
            raise DataError(f"all dims must be >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise DataError(f"spacing must be 3 positive reals, got {self.spacing}")
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.affine.shape != (4, 4):
            raise DataError("affine must be a 4x4 matrix")
        if abs(np.linalg.det(self.affine)) < 1e-12:
            raise DataError("affine must be invertible")
        if not np.all(np.isfinite(self.data)):
            raise DataError("volume data contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """New volume with the same geometry and different voxel data."""
        return Volume3D(data=data, spacing=self.spacing, affine=self.affine.copy())

    def copy(self) -> "Volume3D":
        return self.with_data(self.data.copy())


@dataclass
class RigidTransform:
    """Six-degree-of-freedom rigid motion: rotations in degrees about the
    grid center (x, then y, then z) and translations in mm."""

    rotation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        self.rotation = tuple(float(r) for r in self.rotation)
        self.translation = tuple(float(t) for t in self.translation)
        if len(self.rotation) != 3 or len(self.translation) != 3:
            raise DataError("rotation and translation must each have 3 components")

    def is_identity(self, tol: float = 0.0) -> bool:
        return all(abs(r) <= tol for r in self.rotation) and all(
            abs(t) <= tol for t in self.translation
        )

    def rotation_matrix(self) -> np.ndarray:
        """3x3 rotation matrix, composition Rx @ Ry @ Rz."""
        ax, ay, az = (math.radians(a) for a in self.rotation)
        ca, sa = math.cos(ax), math.sin(ax)
        cb, sb = math.cos(ay), math.sin(ay)
        cc, sc = math.cos(az), math.sin(az)
        rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]], dtype=np.float64)
        ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]], dtype=np.float64)
        rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]], dtype=np.float64)
        return rx @ ry @ rz

    def matrix(self, center_mm: np.ndarray | None = None) -> np.ndarray:
        """4x4 homogeneous matrix in physical coordinates, rotating about
        ``center_mm`` (origin if omitted)."""
        r = self.rotation_matrix()
        c = np.zeros(3) if center_mm is None else np.asarray(center_mm, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        m = np.eye(4)
        m[:3, :3] = r
        m[:3, 3] = c - r @ c + t
        return m

    def inverse(self) -> "RigidTransform":
        """Exact inverse transform, with Euler angles re-extracted from the
        transposed rotation matrix."""
        r_inv = self.rotation_matrix().T
        t_inv = -r_inv @ np.asarray(self.translation, dtype=np.float64)
        beta = math.asin(max(-1.0, min(1.0, r_inv[0, 2])))
        alpha = math.atan2(-r_inv[1, 2], r_inv[2, 2])
        gamma = math.atan2(-r_inv[0, 1], r_inv[0, 0])
        return RigidTransform(
            rotation=(math.degrees(alpha), math.degrees(beta), math.degrees(gamma)),
            translation=tuple(t_inv),
        )


@dataclass
class KSpace:
    """Frequency-domain counterpart of a volume, carrying its geometry so
    the inverse transform can restore it."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DataError(f"k-space data must be 3D, got {self.data.ndim}D")
        if not np.iscomplexobj(self.data):
            self.data = self.data.astype(np.complex128)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def copy(self) -> "KSpace":
        return KSpace(self.data.copy(), self.spacing, np.asarray(self.affine).copy())


# --------------------------------------------------------------------------
# NIfTI-1 I/O


_HDR_FMT = "<i 10s 18s i h c c 8h 3f 4h 8f 3f h c c 4f 2i 80s 24s 2h 6f 12f 16s 4s"
_HDR_SIZE = struct.calcsize(_HDR_FMT.replace(" ", ""))
assert _HDR_SIZE == 348

# NIfTI datatype code -> numpy dtype, scalar types only
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}
_NONSCALAR_CODES = {1, 32, 128, 1792, 2304}


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as f:
        head = f.read(2)
        f.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(f) as gz:
                return gz.read()
        return f.read()


def _quaternion_affine(fields: dict) -> np.ndarray:
    b, c, d = fields["quatern_b"], fields["quatern_c"], fields["quatern_d"]
    a = math.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if fields["pixdim"][0] < 0 else 1.0
    scale = np.array([fields["pixdim"][1], fields["pixdim"][2], qfac * fields["pixdim"][3]])
    aff = np.eye(4)
    aff[:3, :3] = r * scale[np.newaxis, :]
    aff[:3, 3] = [fields["qoffset_x"], fields["qoffset_y"], fields["qoffset_z"]]
    return aff


def _parse_header(raw: bytes) -> dict:
    if len(raw) < _HDR_SIZE:
        raise DataError("malformed header: file shorter than a NIfTI-1 header")
    values = struct.unpack(_HDR_FMT.replace(" ", ""), raw[:_HDR_SIZE])
    if values[0] != 348:
        # try byte-swapped header
        values = struct.unpack(">" + _HDR_FMT.replace(" ", "")[1:], raw[:_HDR_SIZE])
        if values[0] != 348:
            raise DataError("malformed header: sizeof_hdr is not 348")
        swapped = True
    else:
        swapped = False
    names = [
        "sizeof_hdr", "data_type", "db_name", "extents", "session_error",
        "regular", "dim_info",
    ]
    fields = dict(zip(names, values[:7]))
    fields["dim"] = values[7:15]
    fields["intent_p"] = values[15:18]
    fields["intent_code"], fields["datatype"], fields["bitpix"], fields["slice_start"] = values[18:22]
    fields["pixdim"] = values[22:30]
    fields["vox_offset"], fields["scl_slope"], fields["scl_inter"] = values[30:33]
    fields["slice_end"], fields["slice_code"], fields["xyzt_units"] = values[33:36]
    fields["cal_max"], fields["cal_min"], fields["slice_duration"], fields["toffset"] = values[36:40]
    fields["glmax"], fields["glmin"] = values[40:42]
    fields["descrip"], fields["aux_file"] = values[42:44]
    fields["qform_code"], fields["sform_code"] = values[44:46]
    (fields["quatern_b"], fields["quatern_c"], fields["quatern_d"],
     fields["qoffset_x"], fields["qoffset_y"], fields["qoffset_z"]) = values[46:52]
    fields["srow"] = np.array(values[52:64], dtype=np.float64).reshape(3, 4)
    fields["magic"] = values[65]
    fields["swapped"] = swapped
    if fields["magic"][:3] not in (b"n+1", b"ni1"):
        raise DataError("malformed header: bad magic string")
    if fields["magic"][:3] == b"ni1":
        raise DataError("malformed header: detached .hdr/.img pairs are not supported")
    return fields


def load_nifti(path: str | Path) -> Volume3D:
    """Read a 3D scalar NIfTI-1 file (optionally gzip-compressed)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    raw = _read_bytes(path)
    hdr = _parse_header(raw)

    dim = hdr["dim"]
    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise DataError(f"malformed header: dim[0] = {ndim}")
    shape = [max(1, dim[i + 1]) for i in range(ndim)]
    if ndim != 3:
        extra = shape[3:]
        if ndim < 3 or any(e > 1 for e in extra):
            raise DataError(f"non-3D image: dim[0] = {ndim}, shape {tuple(shape)}")
        shape = shape[:3]

    code = hdr["datatype"]
    if code in _NONSCALAR_CODES:
        raise DataError(f"non-scalar datatype: NIfTI code {code}")
    if code not in _DTYPES:
        raise DataError(f"malformed header: unknown datatype code {code}")
    dtype = np.dtype(_DTYPES[code])
    if hdr["swapped"]:
        dtype = dtype.newbyteorder(">")

    offset = int(hdr["vox_offset"]) if hdr["vox_offset"] >= _HDR_SIZE else 352
    n = int(np.prod(shape))
    payload = raw[offset : offset + n * dtype.itemsize]
    if len(payload) < n * dtype.itemsize:
        raise DataError("malformed header: file truncated before end of voxel data")
    # NIfTI stores the first axis fastest
    data = np.frombuffer(payload, dtype=dtype).reshape(shape[::-1]).transpose()
    data = data.astype(np.float32)

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if not math.isfinite(slope):
        slope = 0.0
    if not math.isfinite(inter):
        inter = 0.0
    if slope not in (0.0, 1.0) or inter != 0.0:
        if slope == 0.0:
            slope = 1.0
        data = (data * np.float32(slope)) + np.float32(inter)
    if not np.all(np.isfinite(data)):
        raise DataError(f"non-finite voxel values in {path}")

    pixdim = hdr["pixdim"]
    spacing = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[:3, :] = hdr["srow"]
    elif hdr["qform_code"] > 0:
        affine = _quaternion_affine(hdr)
    else:
        affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
    return Volume3D(data=data, spacing=spacing, affine=affine)


def save_nifti(vol: Volume3D, path: str | Path) -> None:
    """Write a volume as single-file NIfTI-1, float32, gzipped iff the path
    ends in .gz. Gzip output carries no timestamp so identical volumes
    produce identical bytes."""
    path = Path(path)
    if not path.parent.is_dir():
        raise DataError(f"unwritable path: parent directory {path.parent} does not exist")

    data = np.ascontiguousarray(vol.data.astype(np.float32).transpose())
    dim = [3, *vol.dims, 1, 1, 1, 1]
    pixdim = [1.0, *vol.spacing, 0.0, 0.0, 0.0, 0.0]
    srow = vol.affine[:3, :].astype(np.float32).reshape(-1)
    header = struct.pack(
        _HDR_FMT.replace(" ", ""),
        348, b"", b"", 0, 0, b"r", b"\x00",
        *dim,
        0.0, 0.0, 0.0,
        0, 16, 32, 0,
        *pixdim,
        352.0, 1.0, 0.0,
        0, b"\x00", b"\x02",
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"", b"",
        0, 1,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        *srow.tolist(),
        b"", b"n+1\x00",
    )
    blob = header + b"\x00\x00\x00\x00" + data.tobytes()
    try:
        if path.name.endswith(".gz"):
            with open(path, "wb") as f:
                with gzip.GzipFile(filename="", fileobj=f, mode="wb", mtime=0) as gz:
                    gz.write(blob)
        else:
            with open(path, "wb") as f:
                f.write(blob)
    except OSError as exc:
        raise DataError(f"unwritable path: {path}: {exc}") from exc


# --------------------------------------------------------------------------
# Intensity normalization


def normalize_minmax(vol: Volume3D) -> tuple[Volume3D, float, float]:
    """Rescale to [0, 1], returning the original (min, max) so the mapping
    is invertible. Constant volumes map to all-zeros."""
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    if hi == lo:
        return vol.with_data(np.zeros_like(vol.data, dtype=np.float32)), lo, hi
    out = (vol.data.astype(np.float64) - lo) / (hi - lo)
    return vol.with_data(out.astype(np.float32)), lo, hi


def denormalize_minmax(vol: Volume3D, lo: float, hi: float) -> Volume3D:
    """Invert :func:`normalize_minmax` with the values it returned."""
    if hi == lo:
        return vol.with_data(np.full_like(vol.data, lo, dtype=np.float32))
    out = vol.data.astype(np.float64) * (hi - lo) + lo
    return vol.with_data(out.astype(np.float32))


# --------------------------------------------------------------------------
# Rigid resampling


def _grid_center(dims: tuple[int, int, int]) -> np.ndarray:
    return (np.asarray(dims, dtype=np.float64) - 1.0) / 2.0


def resample_rigid(vol: Volume3D, t: RigidTransform) -> Volume3D:
    """Move the image content by ``t`` and resample on the original grid
    with trilinear interpolation; samples leaving the field of view read 0.
    """
    if t.is_identity():
        return vol.copy()
    spacing = np.asarray(vol.spacing, dtype=np.float64)
    r_inv = t.rotation_matrix().T
    # pull map in index coords: i = S^-1 R^-1 S (o - c - S^-1 t) + c
    matrix = (r_inv * spacing[np.newaxis, :]) / spacing[:, np.newaxis]
    center = _grid_center(vol.dims)
    shift = center + np.asarray(t.translation, dtype=np.float64) / spacing
    offset = center - matrix @ shift
    out = ndimage.affine_transform(
        vol.data.astype(np.float64),
        matrix=matrix,
        offset=offset,
        order=1,
        mode="constant",
        cval=0.0,
        prefilter=False,
    )
    return vol.with_data(out.astype(vol.data.dtype))


# --------------------------------------------------------------------------
# 3D Fourier transforms


def fft3(vol: Volume3D) -> KSpace:
    """Forward 3D DFT (unnormalized)."""
    return KSpace(np.fft.fftn(vol.data), spacing=vol.spacing, affine=vol.affine.copy())


def ifft3(k: KSpace) -> Volume3D:
    """Inverse 3D DFT (scaled 1/N); returns the real part."""
    data = np.fft.ifftn(k.data).real
    return Volume3D(data=data, spacing=k.spacing, affine=np.asarray(k.affine).copy())
