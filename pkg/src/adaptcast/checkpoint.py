"""Self-describing checkpoint container.

Layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON header,
then raw tensor payloads. The header carries arbitrary run metadata under
"meta" plus a tensor directory of {name: {shape, offset}}; payloads are
little-endian float64 at byte offsets relative to the end of the header.
Round-trips are bit-exact.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"ADCAST01"


def save_checkpoint(path, meta: dict, tensors: dict) -> None:
    directory = {}
    offset = 0
    payloads = []
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        directory[name] = {"shape": list(arr.shape), "offset": offset}
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"meta": meta, "tensors": directory}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise ValueError("not a checkpoint file")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    tensors = {}
    for name, entry in header["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        tensors[name] = arr.reshape(shape).astype(np.float64)
    return header["meta"], tensors
