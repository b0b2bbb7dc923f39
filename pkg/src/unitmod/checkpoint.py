"""Checkpoint container: named float32 tensors in a single binary file.

Layout: magic ``UMCK``, u32 little-endian entry count, then per entry a
u32 name length, the UTF-8 name, and the tensor in "UMT1" framing.  Entry
order is preserved.  Non-tensor trainer state (step counters, RNG state)
is encoded as small float arrays so everything fits one format.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ContractError
from .tensor import read_array, write_array

_MAGIC = b"UMCK"


def save_state(path, state: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            write_array(fh, np.asarray(arr))


def load_state(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ContractError(f"bad checkpoint magic {magic!r} in {path}")
        (count,) = struct.unpack("<I", fh.read(4))
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            state[name] = read_array(fh)
        return state


def scalar_entry(value: float) -> np.ndarray:
    return np.array([value], dtype=np.float32)


def encode_rng_state(gen: np.random.Generator) -> np.ndarray:
    """Serialize a Generator's bit-generator state as byte values; bytes
    0..255 are exact in float32."""
    raw = json.dumps(gen.bit_generator.state).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float32)


def decode_rng_state(arr: np.ndarray) -> np.random.Generator:
    raw = bytes(np.asarray(arr).astype(np.uint8).tolist())
    state = json.loads(raw.decode("utf-8"))
    gen = np.random.default_rng(0)
    gen.bit_generator.state = state
    return gen
