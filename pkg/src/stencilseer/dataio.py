"""Dataset persistence: a little-endian binary container plus CSV export.

Layout: magic ``PDEK``, version u16, family u8, u32 W, H, C, N; then N
records of image f64[W*H*C] (space-major, channel-fastest), boundary
f64[2*H*C], meta (f64 a, b, cfl; u64 seed); trailing CRC32 of the record
payload.  Round trips are bit-exact.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import FormatError
from .pde import Dataset, Sample, SampleMeta

MAGIC = b"PDEK"
VERSION = 1
_HEADER = struct.Struct("<4sHB4I")
_META = struct.Struct("<dddQ")

FAMILY_CODES = {"hyperbolic": 0, "elliptic": 1, "parabolic": 2, "coupled": 3}
CODE_FAMILIES = {v: k for k, v in FAMILY_CODES.items()}


def save_dataset(dataset: Dataset, path) -> None:
    """Write the dataset with a deterministic byte layout."""
    first = dataset.samples[0]
    w, h, c = first.image.shape
    n = len(dataset.samples)
    family = first.meta.family
    parts = []
    for s in dataset.samples:
        if s.image.shape != (w, h, c) or s.meta.family != family:
            raise FormatError("all samples in a dataset must share family and shape")
        parts.append(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.boundary, dtype="<f8").tobytes())
        parts.append(_META.pack(s.meta.a, s.meta.b, s.meta.cfl, s.meta.seed & (2**64 - 1)))
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    header = _HEADER.pack(MAGIC, VERSION, FAMILY_CODES[family], w, h, c, n)
    Path(path).write_bytes(header + payload + struct.pack("<I", crc))


def load_dataset(path) -> Dataset:
    """Read a dataset back; any corruption raises before a Dataset exists."""
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size + 4:
        raise FormatError("file too short to be a dataset")
    magic, version, famcode, w, h, c, n = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if famcode not in CODE_FAMILIES:
        raise FormatError(f"unknown family code {famcode}")
    rec_size = 8 * (w * h * c) + 8 * (2 * h * c) + _META.size
    expected = _HEADER.size + n * rec_size + 4
    if len(blob) != expected:
        raise FormatError(f"truncated or padded file: {len(blob)} bytes, expected {expected}")
    payload = blob[_HEADER.size:-4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise FormatError("payload checksum mismatch")
    family = CODE_FAMILIES[famcode]
    samples = []
    off = 0
    img_bytes = 8 * w * h * c
    bnd_bytes = 8 * 2 * h * c
    for _ in range(n):
        image = np.frombuffer(payload, dtype="<f8", count=w * h * c, offset=off)
        image = image.reshape(w, h, c).copy()
        off += img_bytes
        boundary = np.frombuffer(payload, dtype="<f8", count=2 * h * c, offset=off)
        boundary = boundary.reshape(2, h, c).copy()
        off += bnd_bytes
        a, b, cfl, seed = _META.unpack_from(payload, off)
        off += _META.size
        samples.append(Sample(image, boundary, SampleMeta(family, a, b, cfl, seed)))
    return Dataset(samples)


def export_csv(dataset: Dataset, outdir) -> list[Path]:
    """One CSV per sample per channel: rows = space, cols = time."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, s in enumerate(dataset.samples):
        for ch in range(s.channels):
            p = outdir / f"sample_{i:03d}_ch{ch}.csv"
            np.savetxt(p, s.image[:, :, ch], fmt="%.17g", delimiter=",")
            written.append(p)
    return written
