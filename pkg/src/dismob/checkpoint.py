"""Checkpoint container: versioned UTF-8 header plus little-endian float32
payloads.

Header layout (all lines ``\\n``-terminated)::

    dismob-checkpoint v1
    count <N>
    <name>\\t<tag>\\t<flags>\\t<dtype>\\t<d0,d1,..>\\t<byte-offset>
    ... one line per parameter, offsets relative to the payload start ...
    end-header

Payloads follow immediately in header order.  Values round-trip bitwise.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import IntegrityError, MissingArtifactError, VersionError
from .layers import Parameter

MAGIC = "dismob-checkpoint"
VERSION = "v1"
_END = "end-header"


def save_checkpoint(path: str | Path, params: dict[str, Parameter]) -> None:
    path = Path(path)
    names = list(params)
    lines = [f"{MAGIC} {VERSION}", f"count {len(names)}"]
    payloads = []
    offset = 0
    for name in names:
        p = params[name]
        value = p.value.astype("<f4", copy=False)
        blob = value.tobytes(order="C")
        shape = ",".join(str(d) for d in value.shape)
        flags = "trainable" if p.trainable else "frozen"
        lines.append(f"{name}\t{p.tag}\t{flags}\tf4\t{shape}\t{offset}")
        payloads.append(blob)
        offset += len(blob)
    lines.append(_END)
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with path.open("wb") as fh:
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> dict[str, Parameter]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    end_marker = (_END + "\n").encode("utf-8")
    header_end = raw.find(end_marker)
    if header_end < 0:
        raise IntegrityError(f"{path}: header terminator missing")
    try:
        header = raw[:header_end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise IntegrityError(f"{path}: header is not valid UTF-8") from exc
    lines = header.splitlines()
    if len(lines) < 2:
        raise IntegrityError(f"{path}: truncated header")
    magic = lines[0].split(" ")
    if len(magic) != 2 or magic[0] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    if magic[1] != VERSION:
        raise VersionError(
            f"{path}: format {magic[1]} is incompatible with reader {VERSION}"
        )
    count_parts = lines[1].split(" ")
    if len(count_parts) != 2 or count_parts[0] != "count":
        raise IntegrityError(f"{path}: malformed count line")
    try:
        count = int(count_parts[1])
    except ValueError as exc:
        raise IntegrityError(f"{path}: malformed count line") from exc
    entries = lines[2:]
    if len(entries) != count:
        raise IntegrityError(
            f"{path}: header lists {len(entries)} parameters, expected {count}"
        )

    payload = raw[header_end + len(end_marker):]
    params: dict[str, Parameter] = {}
    expected_end = 0
    for line in entries:
        parts = line.split("\t")
        if len(parts) != 6:
            raise IntegrityError(f"{path}: malformed header entry {line!r}")
        name, tag, flags, dtype, shape_s, offset_s = parts
        if dtype != "f4":
            raise IntegrityError(f"{path}: unsupported dtype {dtype!r} for {name!r}")
        try:
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            offset = int(offset_s)
        except ValueError as exc:
            raise IntegrityError(f"{path}: malformed header entry {line!r}") from exc
        size = int(np.prod(shape, dtype=np.int64)) * 4
        if offset + size > len(payload):
            raise IntegrityError(
                f"{path}: truncated payload for {name!r} "
                f"(need {offset + size} bytes, have {len(payload)})"
            )
        value = np.frombuffer(payload, dtype="<f4", count=size // 4, offset=offset)
        value = value.reshape(shape).copy()
        params[name] = Parameter(name, value, tag, trainable=(flags == "trainable"))
        expected_end = max(expected_end, offset + size)
    if len(payload) != expected_end:
        raise IntegrityError(
            f"{path}: payload length {len(payload)} does not match header "
            f"({expected_end} bytes expected)"
        )
    return params
