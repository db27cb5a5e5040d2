"""Persistence for volumes, gradient tables, network checkpoints and streamlines.

NIfTI-1 support covers single-file, uncompressed, little-endian images with
float32 or int16 data.  Orientation fields are written as identity scaling by
the voxel size and never interpreted.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dwi_model import B0_THRESHOLD, GradientScheme
from .neural import PARAM_ORDER, NetworkParams

HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1\x00"
_DT_INT16 = 4
_DT_FLOAT32 = 16
_DATATYPES = {_DT_INT16: "<i2", _DT_FLOAT32: "<f4"}

CHECKPOINT_MAGIC = b"DTK1"
STREAMLINE_MAGIC = b"DTKS"
_MODE_TAGS = {"patch3": 0, "voxel1": 1}


class FormatError(ValueError):
    pass


@dataclass
class Volume:
    """A 3D or 4D grid; ``data`` is indexed ``[x, y, z(, t)]``."""

    data: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim not in (3, 4):
            raise FormatError(f"volumes must be 3D or 4D, got {self.data.ndim}D")
        vs = tuple(float(v) for v in np.broadcast_to(np.asarray(self.voxel_size, dtype=float), (3,)))
        if min(vs) <= 0:
            raise FormatError("voxel_size must be positive")
        self.voxel_size = vs

    @property
    def dims(self):
        return self.data.shape


def write_nifti(volume: Volume, path, descrip: str = "") -> None:
    """Write ``volume`` as float32 NIfTI-1 (.nii) with a 352-byte data offset.

    ``descrip`` (at most 79 ASCII characters) goes in the header's free-text field.
    """
    text = descrip.encode("ascii")
    if len(text) > 79:
        raise FormatError("descrip is limited to 79 characters")
    data = np.asarray(volume.data, dtype="<f4")
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dim = [data.ndim, *data.shape] + [1] * (7 - data.ndim)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<hh", hdr, 70, _DT_FLOAT32, 32)
    pixdim = [1.0, *volume.voxel_size] + [1.0] * 4
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<ff", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2 | 8)  # xyzt_units: mm, s
    struct.pack_into("<hh", hdr, 252, 0, 1)  # qform_code, sform_code
    vx, vy, vz = volume.voxel_size
    struct.pack_into("<4f", hdr, 280, vx, 0.0, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 296, 0.0, vy, 0.0, 0.0)
    struct.pack_into("<4f", hdr, 312, 0.0, 0.0, vz, 0.0)
    hdr[148 : 148 + len(text)] = text
    hdr[344:348] = NIFTI_MAGIC
    with open(path, "wb") as fh:
        fh.write(bytes(hdr))
        fh.write(b"\x00\x00\x00\x00")
        fh.write(data.tobytes(order="F"))


def read_nifti(path) -> Volume:
    """Read a single-file NIfTI-1 volume, applying ``scl_slope``/``scl_inter``.

    Returns float32 data for float32 files and for scaled int16 files; int16
    files without scaling are returned as float32 too, so callers always get
    floating data.
    """
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raise FormatError(f"{path}: gzip-compressed files are not supported (compression)")
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than the 348-byte header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise FormatError(f"{path}: big-endian files are not supported (sizeof_hdr)")
        raise FormatError(f"{path}: sizeof_hdr is {sizeof_hdr}, expected 348")
    if raw[344:348] != NIFTI_MAGIC:
        raise FormatError(f"{path}: magic is {raw[344:348]!r}, expected single-file 'n+1'")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise FormatError(f"{path}: dim[0]={ndim} out of range")
    shape = tuple(int(d) for d in dim[1 : ndim + 1])
    if any(d < 1 for d in shape):
        raise FormatError(f"{path}: non-positive entry in dim {shape}")
    # drop trailing singleton dimensions beyond 3
    while len(shape) > 3 and shape[-1] == 1:
        shape = shape[:-1]
    if len(shape) > 4:
        raise FormatError(f"{path}: dim {shape} has more than 4 dimensions")
    while len(shape) < 3:
        shape = shape + (1,)
    datatype, _ = struct.unpack_from("<hh", raw, 70)
    if datatype not in _DATATYPES:
        raise FormatError(f"{path}: datatype {datatype} unsupported (float32=16, int16=4)")
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    slope, inter = struct.unpack_from("<ff", raw, 112)
    offset = int(vox_offset)
    if offset < HEADER_SIZE or offset != vox_offset:
        raise FormatError(f"{path}: vox_offset {vox_offset} invalid")
    dtype = np.dtype(_DATATYPES[datatype])
    count = int(np.prod(shape))
    if len(raw) < offset + count * dtype.itemsize:
        raise FormatError(f"{path}: data shorter than dim {shape} requires")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape, order="F")
    data = data.astype(np.float32)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data * np.float32(slope if slope != 0 else 1.0) + np.float32(inter)
    vs = tuple(abs(p) if p != 0 else 1.0 for p in pixdim[1:4])
    return Volume(np.ascontiguousarray(data), vs)


def read_descrip(path) -> str:
    raw = Path(path).read_bytes()[148:228]
    return raw.split(b"\x00", 1)[0].decode("ascii", errors="replace")


def _read_rows(path, expected_rows):
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rows.append([float(tok) for tok in line.split()])
        except ValueError as exc:
            raise FormatError(f"{path}:{n}: non-numeric token ({exc})") from None
    if len(rows) != expected_rows:
        raise FormatError(f"{path}: expected {expected_rows} non-empty rows, found {len(rows)}")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise FormatError(f"{path}: rows have differing column counts {sorted(widths)}")
    return np.array(rows, dtype=np.float64)


def read_bvals_bvecs(bvals_path, bvecs_path) -> GradientScheme:
    """Read FSL-style ``bvals`` (one row) and ``bvecs`` (three rows) files."""
    bvals = _read_rows(bvals_path, 1)[0]
    bvecs = _read_rows(bvecs_path, 3).T
    if bvecs.shape[0] != bvals.size:
        raise FormatError(f"{bvals.size} columns in {bvals_path} but {bvecs.shape[0]} in {bvecs_path}")
    bvals = np.where(bvals < B0_THRESHOLD, 0.0, bvals)
    norms = np.linalg.norm(bvecs, axis=1)
    dw = bvals > 0
    bad = dw & ~((norms > 0.9) & (norms < 1.1))
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        raise FormatError(f"column {i}: direction norm {norms[i]:.3g} is not close to 1 for b={bvals[i]:g}")
    bvecs = np.where(dw[:, None], bvecs / np.where(norms > 0, norms, 1.0)[:, None], 0.0)
    return GradientScheme(bvals, bvecs)


def write_bvals_bvecs(scheme: GradientScheme, bvals_path, bvecs_path) -> None:
    Path(bvals_path).write_text(" ".join(f"{b:.10g}" for b in scheme.bvals) + "\n")
    lines = [" ".join(f"{v:.10g}" for v in row) for row in scheme.bvecs.T]
    Path(bvecs_path).write_text("\n".join(lines) + "\n")


def save_checkpoint(params: NetworkParams, path) -> None:
    """Binary checkpoint: magic, mode tag, per-array shapes, then float32 data."""
    arrays = params.arrays()
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<II", _MODE_TAGS[params.kernel_mode], len(arrays))
    for a in arrays:
        out += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    for a in arrays:
        out += np.ascontiguousarray(a, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> NetworkParams:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"checkpoint {path} not found (train a model first)")
    raw = p.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    try:
        tag, n = struct.unpack_from("<II", raw, 4)
        modes = {v: k for k, v in _MODE_TAGS.items()}
        if tag not in modes:
            raise FormatError(f"{path}: unknown kernel_mode tag {tag}")
        if n != len(PARAM_ORDER):
            raise FormatError(f"{path}: {n} arrays, expected {len(PARAM_ORDER)}")
        pos = 12
        shapes = []
        for _ in range(n):
            (nd,) = struct.unpack_from("<I", raw, pos)
            shapes.append(struct.unpack_from(f"<{nd}I", raw, pos + 4))
            pos += 4 + 4 * nd
        arrays = {}
        for name, shape in zip(PARAM_ORDER, shapes):
            count = int(np.prod(shape))
            if pos + 4 * count > len(raw):
                raise FormatError(f"{path}: truncated data for {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint header ({exc})") from None
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return NetworkParams(kernel_mode=modes[tag], **arrays)


def save_streamlines(streamlines, path) -> None:
    out = bytearray(STREAMLINE_MAGIC)
    out += struct.pack("<I", len(streamlines))
    for sl in streamlines:
        pts = np.asarray(sl, dtype="<f4").reshape(-1, 3)
        out += struct.pack("<I", len(pts)) + pts.tobytes()
    Path(path).write_bytes(bytes(out))


def load_streamlines(path) -> list:
    raw = Path(path).read_bytes()
    if raw[:4] != STREAMLINE_MAGIC:
        raise FormatError(f"{path}: bad streamline magic {raw[:4]!r}")
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated streamline header")
    (count,) = struct.unpack_from("<I", raw, 4)
    pos, out = 8, []
    for i in range(count):
        if pos + 4 > len(raw):
            raise FormatError(f"{path}: truncated at streamline {i}")
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if pos + 12 * n > len(raw):
            raise FormatError(f"{path}: truncated points in streamline {i}")
        out.append(np.frombuffer(raw, dtype="<f4", count=3 * n, offset=pos).reshape(n, 3).astype(np.float64))
        pos += 12 * n
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def streamlines_to_text(streamlines) -> str:
    """One streamline per line as ``x,y,z;x,y,z;...``."""
    return "".join(";".join(f"{x:.4f},{y:.4f},{z:.4f}" for x, y, z in np.asarray(sl)) + "\n" for sl in streamlines)


def save_tensors(tensors, path, voxel_size=(1.0, 1.0, 1.0), descrip: str = "") -> None:
    """Tensor field of shape (X, Y, Z, 6) as a 6-volume NIfTI."""
    write_nifti(Volume(np.asarray(tensors), voxel_size), path, descrip)


def load_tensors(path) -> np.ndarray:
    vol = read_nifti(path)
    if vol.data.ndim != 4 or vol.data.shape[3] != 6:
        raise FormatError(f"{path}: tensor field needs 6 volumes, dims are {vol.data.shape}")
    return vol.data.astype(np.float64)


def save_rois(rois: dict, path) -> None:
    payload = {name: [[list(map(int, box[0])), list(map(int, box[1]))] for box in pair] for name, pair in rois.items()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_rois(path) -> dict:
    payload = json.loads(Path(path).read_text())
    rois = {}
    for name, pair in payload.items():
        if len(pair) != 2 or any(len(box) != 2 or len(box[0]) != 3 or len(box[1]) != 3 for box in pair):
            raise FormatError(f"{path}: ROI {name!r} must be two boxes of two corners")
        rois[name] = tuple((tuple(box[0]), tuple(box[1])) for box in pair)
    return rois
