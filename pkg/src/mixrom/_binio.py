"""Length-prefixed binary blocks used by the MNET/MROB/MMIX bundles."""

import io
import json
import struct

import numpy as np

from .exceptions import FormatError


class BlockWriter:
    def __init__(self, magic, version=1):
        self._buf = io.BytesIO()
        self._buf.write(magic)
        self._buf.write(struct.pack("<B", version))

    def json(self, obj):
        self.bytes(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode())

    def array(self, arr):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        self.json({"shape": list(arr.shape)})
        self.bytes(arr.tobytes())

    def bytes(self, data):
        self._buf.write(struct.pack("<Q", len(data)))
        self._buf.write(data)

    def getvalue(self):
        return self._buf.getvalue()


class BlockReader:
    def __init__(self, data, magic, versions=(1,)):
        if data[: len(magic)] != magic:
            raise FormatError(f"bad magic: expected {magic!r}, got {data[:len(magic)]!r}")
        self._data = data
        self._pos = len(magic) + 1
        self.version = data[len(magic)]
        if self.version not in versions:
            raise FormatError(f"unsupported {magic.decode()} version {self.version}")

    def bytes(self):
        if self._pos + 8 > len(self._data):
            raise FormatError("truncated block header")
        (n,) = struct.unpack_from("<Q", self._data, self._pos)
        self._pos += 8
        if self._pos + n > len(self._data):
            raise FormatError("truncated block")
        out = self._data[self._pos : self._pos + n]
        self._pos += n
        return out

    def json(self):
        return json.loads(self.bytes().decode())

    def array(self):
        shape = tuple(self.json()["shape"])
        raw = self.bytes()
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        return arr.reshape(shape)
