"""Weight checkpoint files with a config echo and CRC-checked round trips.

Layout (little-endian):

    magic   7 bytes  ASCII "NFEMW1\\n"
    u32     config block length, then that many UTF-8 bytes of
            "key = value" lines describing the architecture
    u32     array count
    per array:
        u16 name length, name bytes
        u8  rank, u32 x rank shape
        f64 data, C order
    u32     CRC-32 of everything between the magic and this trailer
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .unet import UNet, UNetConfig, build

MAGIC = b"NFEMW1\n"


class CheckpointFormatError(ValueError):
    """Malformed, truncated or checksum-inconsistent checkpoint file."""


def _config_lines(config: UNetConfig) -> str:
    return "".join(
        [
            f"dim = {config.dim}\n",
            f"grid_shape = {','.join(str(n) for n in config.grid_shape)}\n",
            f"mode = {config.mode}\n",
            f"levels = {config.levels}\n",
            f"base_channels = {config.base_channels}\n",
            f"input_pad = {config.input_pad}\n",
            f"sigma_p = {config.sigma_p!r}\n",
            f"constant_channels = {'true' if config.constant_channels else 'false'}\n",
        ]
    )


def _parse_config(text: str) -> UNetConfig:
    kv = {}
    for line in text.splitlines():
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    try:
        return UNetConfig(
            dim=int(kv["dim"]),
            grid_shape=tuple(int(n) for n in kv["grid_shape"].split(",")),
            mode=kv["mode"],
            levels=int(kv["levels"]),
            base_channels=int(kv["base_channels"]),
            input_pad=int(kv["input_pad"]),
            sigma_p=float(kv["sigma_p"]),
            constant_channels=kv["constant_channels"] == "true",
        )
    except KeyError as exc:
        raise CheckpointFormatError(f"config echo missing key {exc}") from None


def save_checkpoint(model: UNet, path: str | Path) -> None:
    """Write the model's config echo plus every parameter and buffer array."""
    cfg_bytes = _config_lines(model.config).encode("utf-8")
    parts = [struct.pack("<I", len(cfg_bytes)), cfg_bytes]
    arrays = model.store.arrays()
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = b"".join(parts)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(MAGIC + payload + struct.pack("<I", crc))


def load_checkpoint(path: str | Path) -> UNet:
    """Rebuild the model described by a checkpoint and restore its arrays."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic, not a checkpoint file")
    payload, (crc_stored,) = blob[len(MAGIC):-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CheckpointFormatError(f"{path}: CRC mismatch, file corrupt or truncated")

    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(payload):
            raise CheckpointFormatError(f"{path}: truncated payload")
        vals = struct.unpack_from(fmt, payload, off)
        off += size
        return vals

    (cfg_len,) = take("<I")
    config = _parse_config(payload[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    (n_arrays,) = take("<I")
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = take("<H")
        name = payload[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = take("<B")
        shape = take(f"<{rank}I")
        count = int(np.prod(shape)) if rank else 1
        nbytes = count * 8
        if off + nbytes > len(payload):
            raise CheckpointFormatError(f"{path}: truncated array data for {name}")
        arrays[name] = np.frombuffer(payload, dtype="<f8", offset=off,
                                     count=count).reshape(shape).copy()
        off += nbytes

    model = build(config, seed=0)
    model.store.load_arrays(arrays)
    return model
