"""CSV emission and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic "ESHIFT01"
    u32       format version
    u64 + n   header: UTF-8 JSON with the network spec, epoch and RNG state
    u64       number of arrays
    per array: u64 element count, then that many float64 values

Arrays follow the network's declaration order: each module's parameters,
then (for BN layers) running mean and running variance.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import CheckpointMagicError, CheckpointVersionError, TruncatedCheckpointError
from .networks import Network, NetworkSpec, build
from .tensor import RngState

MAGIC = b"ESHIFT01"
FORMAT_VERSION = 1


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def emit_csv(records: Sequence, path: str, fields: Optional[Sequence[str]] = None):
    """Header row plus one row per record.

    Records are either objects with ``FIELDS`` and ``row()`` or plain dicts.
    Reals are written with 17 significant digits so they parse back exactly.
    """
    records = list(records)
    if fields is None:
        if not records:
            raise ValueError("fields are required to write an empty record list")
        first = records[0]
        fields = list(first.keys()) if isinstance(first, dict) else list(first.FIELDS)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(fields)
        for r in records:
            row = [r[k] for k in fields] if isinstance(r, dict) else r.row()
            if len(row) != len(fields):
                raise ValueError("inhomogeneous records")
            w.writerow([format_value(v) for v in row])


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@dataclass
class Checkpoint:
    net: Network
    epoch: int = 0
    rng: Optional[RngState] = None


def save_checkpoint(net: Network, path: str, epoch: int = 0, rng: Optional[RngState] = None):
    header = json.dumps({
        "spec": json.loads(net.spec.to_json()),
        "epoch": int(epoch),
        "rng": rng.to_dict() if rng is not None else None,
    }, sort_keys=True).encode("utf-8")
    arrays = net.state_arrays()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(struct.pack("<Q", len(arrays)))
        for a in arrays:
            flat = np.ascontiguousarray(a, dtype="<f8").reshape(-1)
            f.write(struct.pack("<Q", flat.size))
            f.write(flat.tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError()
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def read_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if len(r.buf) < len(MAGIC):
        raise TruncatedCheckpointError()
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointMagicError(f"{path} is not an ESHIFT01 checkpoint")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    header = json.loads(r.take(r.u64()).decode("utf-8"))
    net = build(NetworkSpec.from_dict(header["spec"]))
    arrays = []
    for _ in range(r.u64()):
        n = r.u64()
        arrays.append(np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64))
    net.load_state_arrays(arrays)
    rng = RngState.from_dict(header["rng"]) if header.get("rng") else None
    return Checkpoint(net, int(header["epoch"]), rng)


def load_checkpoint(path: str) -> Network:
    return read_checkpoint(path).net

