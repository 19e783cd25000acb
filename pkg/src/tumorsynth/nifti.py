"""Minimal NIfTI-1 reader/writer.

Supports the single-file `.nii` flavor only: little-endian, 348-byte
header, 4-byte extension flag, raw data at vox_offset 352.  Orientation
is restricted to axis-aligned grids: spacing comes from pixdim and the
world origin from the qoffset fields; rotation matrices are not honored.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .volume import (
    DEFAULT_VOXEL_CAP,
    GridGeometry,
    LabelVolume,
    MODALITIES,
    MultimodalCase,
    ScalarVolume,
)

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"

# NIfTI-1 datatype codes accepted on read; scalars are stored as float32
# and labels as uint8 on write.
DTYPE_CODES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
    64: np.dtype("<f8"),
    512: np.dtype("<u2"),
}
BITPIX = {2: 8, 4: 16, 16: 32, 64: 64, 512: 16}

_HDR = struct.Struct(
    "<i10s18sih2B8h3f4h8f3fh2B4f2i80s24s2h6f12f16s4s"
)
assert _HDR.size == HEADER_SIZE


def _pack_header(geom: GridGeometry, datatype: int) -> bytes:
    nx, ny, nz = geom.dims
    sx, sy, sz = geom.spacing
    ox, oy, oz = geom.origin
    return _HDR.pack(
        HEADER_SIZE,                      # sizeof_hdr
        b"", b"", 0, 0, ord("r"), 0,      # legacy fields, regular='r', dim_info
        3, nx, ny, nz, 1, 1, 1, 1,        # dim
        0.0, 0.0, 0.0,                    # intent_p1..p3
        0, datatype, BITPIX[datatype], 0,  # intent_code, datatype, bitpix, slice_start
        1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0,  # pixdim (qfac=1)
        float(VOX_OFFSET), 0.0, 0.0,      # vox_offset, scl_slope, scl_inter
        0, 0, 2,                          # slice_end, slice_code, xyzt_units=mm
        0.0, 0.0, 0.0, 0.0,               # cal_max, cal_min, slice_duration, toffset
        0, 0,                             # glmax, glmin
        b"", b"",                         # descrip, aux_file
        1, 1,                             # qform_code, sform_code
        0.0, 0.0, 0.0, ox, oy, oz,        # quatern_b..d, qoffset_x..z
        sx, 0.0, 0.0, ox,
        0.0, sy, 0.0, oy,
        0.0, 0.0, sz, oz,                 # srow_x, srow_y, srow_z
        b"",                              # intent_name
        MAGIC,
    )


def write_volume(vol: ScalarVolume | LabelVolume, path) -> None:
    """Write a volume as an uncompressed little-endian .nii file."""
    path = Path(path)
    if isinstance(vol, LabelVolume):
        datatype, data = 2, vol.labels
    elif isinstance(vol, ScalarVolume):
        datatype, data = 16, vol.values
    else:
        raise DataError(f"cannot write object of type {type(vol).__name__}")
    header = _pack_header(vol.geometry, datatype)
    with open(path, "wb") as f:
        f.write(header)
        f.write(b"\x00\x00\x00\x00")  # no extensions
        f.write(np.ravel(data, order="F").tobytes())


def read_volume(path, kind: str) -> ScalarVolume | LabelVolume:
    """Read an uncompressed .nii file as a scalar or label volume.

    kind must be "scalar" or "label".  scl_slope/scl_inter are applied
    to scalars when the slope is nonzero; labels reject any rescaling.
    """
    if kind not in ("scalar", "label"):
        raise DataError(f"kind must be 'scalar' or 'label', got {kind!r}")
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise DataError(f"{path}: file shorter than a NIfTI-1 header")
    fields = _HDR.unpack(raw[:HEADER_SIZE])
    sizeof_hdr = fields[0]
    if sizeof_hdr != HEADER_SIZE:
        raise DataError(
            f"{path}: sizeof_hdr={sizeof_hdr}, not a little-endian NIfTI-1 file"
        )
    magic = fields[-1]
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")

    # Unpacked tuple layout: 0 sizeof_hdr, 1-6 legacy, 7-14 dim,
    # 15-17 intent_p, 18 intent_code, 19 datatype, 20 bitpix,
    # 21 slice_start, 22-29 pixdim, 30 vox_offset, 31 scl_slope,
    # 32 scl_inter, ..., 44 qform_code, 45 sform_code, 46-48 quatern,
    # 49-51 qoffset, 52-63 srow, 64 intent_name, 65 magic.
    dim = fields[7:15]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise DataError(f"{path}: malformed header, dim[0]={ndim}")
    shape = list(dim[1:1 + min(ndim, 3)])
    if any(d < 1 for d in shape):
        raise DataError(f"{path}: malformed header, non-positive dim {tuple(dim)}")
    if any(d not in (0, 1) for d in dim[1 + min(ndim, 3):1 + ndim]):
        raise DataError(f"{path}: volumes with more than 3 dimensions are unsupported")
    while len(shape) < 3:
        shape.append(1)

    datatype = fields[19]
    bitpix = fields[20]
    if datatype not in DTYPE_CODES:
        raise DataError(f"{path}: unsupported datatype code {datatype}")
    if bitpix != BITPIX[datatype]:
        raise DataError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")

    pixdim = fields[22:30]
    spacing = pixdim[1:4]
    if any(not np.isfinite(s) or s <= 0 for s in spacing):
        raise DataError(f"{path}: malformed header, pixdim {spacing}")

    vox_offset = fields[30]
    if not np.isfinite(vox_offset) or vox_offset < HEADER_SIZE:
        raise DataError(f"{path}: bad vox_offset {vox_offset}")
    offset = int(vox_offset)

    scl_slope = fields[31]
    scl_inter = fields[32]
    origin = fields[49:52]

    geom = GridGeometry(tuple(shape), tuple(float(s) for s in spacing),
                        tuple(float(o) for o in origin),
                        voxel_cap=DEFAULT_VOXEL_CAP)
    dtype = DTYPE_CODES[datatype]
    count = geom.voxel_count
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise DataError(f"{path}: truncated data, expected {need} bytes, have {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = data.reshape(geom.dims, order="F")

    rescale = scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0)
    if kind == "label":
        if rescale:
            raise DataError(f"{path}: scl rescaling is not supported for label volumes")
        return LabelVolume(geom, data)
    if rescale:
        data = data.astype(np.float64) * scl_slope + scl_inter
    return ScalarVolume(geom, data.astype(np.float32))


CASE_FILES = tuple(f"{m}.nii" for m in MODALITIES) + ("seg.nii", "meta.json")


def write_case(case: MultimodalCase, case_dir) -> None:
    """Write a case directory: t1/t1ce/t2/flair/seg volumes plus meta.json."""
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    for m in MODALITIES:
        write_volume(case.modality(m), case_dir / f"{m}.nii")
    write_volume(case.seg, case_dir / "seg.nii")
    meta = dict(case.meta)
    meta.setdefault("id", case.id)
    write_json(meta, case_dir / "meta.json")


def read_case(case_dir) -> MultimodalCase:
    """Read a case directory written by write_case."""
    case_dir = Path(case_dir)
    missing = [f for f in CASE_FILES if not (case_dir / f).exists()]
    if missing:
        raise DataError(f"{case_dir}: missing case files {missing}")
    vols = {m: read_volume(case_dir / f"{m}.nii", "scalar") for m in MODALITIES}
    seg = read_volume(case_dir / "seg.nii", "label")
    meta = json.loads((case_dir / "meta.json").read_text())
    case_id = meta.get("id", case_dir.name)
    return MultimodalCase(id=case_id, seg=seg, meta=meta, **vols)


def write_json(obj, path) -> None:
    """Deterministic JSON serialization (sorted keys, fixed separators)."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
