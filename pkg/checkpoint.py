"""Binary checkpoint format for named float arrays.

A checkpoint is a UTF-8 text header followed by raw little-endian float64
values::

    AQA-CHECKPOINT 1
    <path> <shape>
    ...
    END
    <binary payload>

``<path>`` is a parameter path without whitespace (e.g.
``encoder.blocks.0.attn.q_proj.weight``); ``<shape>`` is a comma separated
list of extents, or ``-`` for a scalar. The payload holds the arrays in header
order, each flattened in C order.
"""

import logging
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from utils import atomic_write

logger = logging.getLogger(__name__)

MAGIC = "AQA-CHECKPOINT 1"
END_MARKER = "END"
_PAYLOAD_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    """Raised for malformed checkpoint files or unsupported entries."""


def _format_shape(shape) -> str:
    return ",".join(str(int(d)) for d in shape) if shape else "-"


def _parse_shape(text: str, line_number: int) -> tuple:
    if text == "-":
        return ()
    try:
        shape = tuple(int(part) for part in text.split(","))
    except ValueError as e:
        raise CheckpointError(f"line {line_number}: bad shape {text!r}") from e
    if any(d < 0 for d in shape):
        raise CheckpointError(f"line {line_number}: negative extent in {text!r}")
    return shape


def save_checkpoint(path: Union[str, Path], arrays: Mapping[str, np.ndarray]) -> Path:
    """Write ``arrays`` to ``path`` in header order (mapping order)."""
    path = Path(path)
    header = [MAGIC]
    for name, array in arrays.items():
        if not name or any(ch.isspace() for ch in name):
            raise CheckpointError(f"Parameter path must be non-empty without whitespace: {name!r}")
        header.append(f"{name} {_format_shape(np.shape(array))}")
    header.append(END_MARKER)
    with atomic_write(path, "wb") as handle:
        handle.write(("\n".join(header) + "\n").encode("utf-8"))
        for array in arrays.values():
            handle.write(np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPE).tobytes())
    logger.debug(f"Saved checkpoint with {len(arrays)} arrays to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    path = Path(path)
    data = path.read_bytes()
    entries = []
    offset = 0
    line_number = 0
    while True:
        newline = data.find(b"\n", offset)
        if newline < 0:
            raise CheckpointError(f"{path}: header is not terminated by {END_MARKER}")
        line = data[offset:newline].decode("utf-8")
        offset = newline + 1
        line_number += 1
        if line_number == 1:
            if line != MAGIC:
                raise CheckpointError(f"{path}: not a checkpoint (first line {line!r})")
            continue
        if line == END_MARKER:
            break
        parts = line.split(" ")
        if len(parts) != 2:
            raise CheckpointError(f"{path}: line {line_number}: expected '<path> <shape>'")
        entries.append((parts[0], _parse_shape(parts[1], line_number)))

    if (len(data) - offset) % _PAYLOAD_DTYPE.itemsize:
        raise CheckpointError(f"{path}: truncated payload")
    payload = np.frombuffer(data, dtype=_PAYLOAD_DTYPE, offset=offset)
    expected = sum(int(np.prod(shape)) for _, shape in entries)
    if payload.size != expected:
        raise CheckpointError(
            f"{path}: payload holds {payload.size} values, header declares {expected}"
        )
    arrays: Dict[str, np.ndarray] = {}
    cursor = 0
    for name, shape in entries:
        count = int(np.prod(shape))
        arrays[name] = payload[cursor : cursor + count].astype(np.float64).reshape(shape)
        cursor += count
    return arrays
