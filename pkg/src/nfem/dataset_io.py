"""Binary dataset file format with CRC-checked, bit-exact round trips.

Layout (little-endian throughout):

    magic   8 bytes  ASCII "NFEMDS1\\n"
    u32     dim
    u32     rank, then u32 x rank grid shape
    u64     sample count
    f64     force range min, f64 max
    u64     seed
    u8      noise flag; if set: f64 threshold, f64 level
    data    per sample: f then u, contiguous f64 in raster order,
            channels last
    u32     CRC-32 of everything between the magic and this trailer
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .dataset import NoiseSpec, SampleSet

MAGIC = b"NFEMDS1\n"


class DatasetFormatError(ValueError):
    """Malformed, truncated or checksum-inconsistent dataset file."""


def save_dataset(samples: SampleSet, path: str | Path) -> None:
    """Serialize a sample set; ``load_dataset`` restores it bit-exactly.

    ``problem_id`` and the redraw counter are in-memory metadata and are not
    part of the file format.
    """
    if not 0 <= samples.seed < 2**64:
        raise ValueError("seed must fit an unsigned 64-bit integer")
    parts = [struct.pack("<II", samples.dim, len(samples.grid_shape))]
    parts.append(struct.pack(f"<{len(samples.grid_shape)}I", *samples.grid_shape))
    parts.append(struct.pack("<Q", samples.count))
    parts.append(struct.pack("<dd", *samples.force_range))
    parts.append(struct.pack("<Q", samples.seed))
    if samples.noise_spec is None:
        parts.append(struct.pack("<B", 0))
    else:
        parts.append(struct.pack("<Bdd", 1, samples.noise_spec.threshold,
                                 samples.noise_spec.level))
    for f, u in samples.samples:
        parts.append(np.ascontiguousarray(f, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(u, dtype="<f8").tobytes())
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(MAGIC + payload + struct.pack("<I", crc))


def load_dataset(path: str | Path,
                 expect_grid_shape: tuple[int, ...] | None = None) -> SampleSet:
    """Read a dataset file, verifying magic, lengths and the CRC trailer.

    ``expect_grid_shape`` rejects files written for a different grid before
    any sample data is interpreted.
    """
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic, not a dataset file")
    payload, (crc_stored,) = blob[len(MAGIC):-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise DatasetFormatError(f"{path}: CRC mismatch, file corrupt or truncated")

    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(payload):
            raise DatasetFormatError(f"{path}: truncated header")
        vals = struct.unpack_from(fmt, payload, off)
        off += size
        return vals

    dim, rank = take("<II")
    grid_shape = take(f"<{rank}I")
    if expect_grid_shape is not None and tuple(grid_shape) != tuple(expect_grid_shape):
        raise DatasetFormatError(
            f"{path}: grid shape {tuple(grid_shape)} does not match expected "
            f"{tuple(expect_grid_shape)}"
        )
    (count,) = take("<Q")
    lo, hi = take("<dd")
    (seed,) = take("<Q")
    (noise_flag,) = take("<B")
    noise = None
    if noise_flag:
        threshold, level = take("<dd")
        noise = NoiseSpec(threshold, level)

    per_field = int(np.prod(grid_shape)) * dim
    expect_bytes = count * 2 * per_field * 8
    if len(payload) - off != expect_bytes:
        raise DatasetFormatError(
            f"{path}: payload length {len(payload) - off} does not match "
            f"{count} samples of {2 * per_field} float64 values"
        )
    data = np.frombuffer(payload, dtype="<f8", offset=off).reshape(
        count, 2, *grid_shape, dim
    )
    return SampleSet(
        problem_id="",
        grid_shape=tuple(int(n) for n in grid_shape),
        dim=int(dim),
        f=np.ascontiguousarray(data[:, 0]),
        u=np.ascontiguousarray(data[:, 1]),
        force_range=(lo, hi),
        seed=int(seed),
        noise_spec=noise,
    )
