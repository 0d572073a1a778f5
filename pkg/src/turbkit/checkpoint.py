"""Binary checkpoint and snapshot files.

Layout (little endian):

    b"TKSC" | version u16 | dimension u8 | N u32 | nu f64 | t f64 |
    step u64 | rng length u32 | rng state (JSON) |
    u components (re, im f64 pairs, row-major FFT order) |
    Z components | [pressure] | CRC-32 of everything before it

Snapshot files use the same layout with an empty rng blob; when the
pressure is stored it follows the Z arrays.
"""

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .spectral import SpectralField, ScalarField, WaveGrid

MAGIC = b"TKSC"
VERSION = 1
_HEADER = struct.Struct("<4sHBIddQI")


class CheckpointError(ValueError):
    """Unreadable checkpoint: bad magic, version, length or checksum."""


def _encode_array(data):
    return np.ascontiguousarray(data).astype("<c16").tobytes()


def _write(path, grid, nu, t, step, rng_blob, arrays):
    body = _HEADER.pack(MAGIC, VERSION, grid.dimension, grid.N, float(nu), float(t),
                        int(step), len(rng_blob)) + rng_blob
    body += b"".join(_encode_array(a) for a in arrays)
    payload = body + struct.pack("<I", zlib.crc32(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
    return path


def _read(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size + 4:
        raise CheckpointError(f"{path}: truncated file ({len(raw)} bytes)")
    magic, version, dim, N, nu, t, step, nrng = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    try:
        grid = WaveGrid(dim, N)
    except ValueError as exc:
        raise CheckpointError(f"{path}: invalid grid in header ({exc})") from None
    field_bytes = 16 * int(np.prod(grid.shape))
    start = _HEADER.size + nrng
    n_arrays, rest = divmod(len(raw) - 4 - start, field_bytes)
    if len(raw) - 4 < start or rest or n_arrays not in (2 * dim, 2 * dim + 1):
        raise CheckpointError(f"{path}: truncated or malformed payload")
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    rng_blob = raw[_HEADER.size:start]
    arrays = np.frombuffer(raw, dtype="<c16", count=n_arrays * field_bytes // 16, offset=start)
    arrays = arrays.astype(complex).reshape((n_arrays,) + grid.shape)
    return grid, nu, t, step, rng_blob, arrays


def save_checkpoint(state, path):
    """Write a SimState so that resuming reproduces the run bitwise."""
    grid = state.u.grid
    blob = json.dumps(state.rng.bit_generator.state).encode()
    arrays = list(state.u.data) + list(state.ou.Z.data)
    return _write(path, grid, state.nu, state.t, state.step_count, blob, arrays)


def load_checkpoint(path, spectrum):
    """Read a checkpoint written by save_checkpoint.

    The noise spectrum is not stored; the caller rebuilds it from the
    run configuration and it must live on the stored grid.
    """
    from .forcing import OUState
    from .integrator import SimState

    grid, nu, t, step, blob, arrays = _read(path)
    if not blob:
        raise CheckpointError(f"{path}: no rng state (snapshot file?)")
    if spectrum.grid != grid:
        raise CheckpointError(f"{path}: stored grid {grid} does not match the noise spectrum")
    if len(arrays) != 2 * grid.dimension:
        raise CheckpointError(f"{path}: unexpected array count {len(arrays)}")
    state = json.loads(blob.decode())
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    rng = np.random.Generator(bitgen)
    d = grid.dimension
    u = SpectralField(grid, arrays[:d], d > 1)
    Z = SpectralField(grid, arrays[d:], d > 1)
    return SimState(u, OUState(spectrum, Z, t), t, step, rng, nu)


def save_snapshot(snapshot, path, nu=0.0):
    grid = snapshot.u.grid
    arrays = list(snapshot.u.data) + list(snapshot.Z.data)
    if snapshot.p is not None:
        arrays.append(snapshot.p.data)
    return _write(path, grid, nu, snapshot.t, snapshot.step, b"", arrays)


def read_header(path):
    """Header fields of a checkpoint or snapshot file (validates the whole file)."""
    grid, nu, t, step, blob, arrays = _read(path)
    return {"dimension": grid.dimension, "N": grid.N, "nu": nu, "t": t, "step": step,
            "has_rng": bool(blob), "has_pressure": len(arrays) > 2 * grid.dimension}


def load_snapshot(path):
    """Snapshot with p = None when no pressure array was stored."""
    from .integrator import Snapshot

    grid, nu, t, step, _, arrays = _read(path)
    d = grid.dimension
    u = SpectralField(grid, arrays[:d], d > 1)
    Z = SpectralField(grid, arrays[d:2 * d], d > 1)
    p = ScalarField(grid, arrays[2 * d]) if len(arrays) > 2 * d else None
    return Snapshot(u, Z, t, step, p)
