"""Little-endian binary container helpers shared by the artifact formats."""

import struct

import numpy as np

from .exceptions import FormatError

HASH_BYTES = 32


class Writer:
    def __init__(self):
        self._parts = []

    def raw(self, data):
        self._parts.append(bytes(data))

    def u8(self, v):
        self._parts.append(struct.pack("<B", v))

    def u32(self, *vals):
        self._parts.append(struct.pack(f"<{len(vals)}I", *vals))

    def f64(self, *vals):
        self._parts.append(struct.pack(f"<{len(vals)}d", *vals))

    def text(self, s):
        b = s.encode("utf-8")
        self.u32(len(b))
        self.raw(b)

    def digest(self, hexdigest):
        b = bytes.fromhex(hexdigest) if hexdigest else b""
        self.raw(b.ljust(HASH_BYTES, b"\0"))

    def array(self, arr, dtype="<f8"):
        self.raw(np.ascontiguousarray(arr, dtype=dtype).tobytes())

    def getvalue(self):
        return b"".join(self._parts)


class Reader:
    """Sequential reader that raises :class:`FormatError` on truncation."""

    def __init__(self, data, what):
        self._data = memoryview(data)
        self._pos = 0
        self.what = what

    def raw(self, n):
        if self._pos + n > len(self._data):
            raise FormatError(
                f"{self.what}: truncated (needed {n} bytes at offset {self._pos}, "
                f"file has {len(self._data)})"
            )
        out = bytes(self._data[self._pos:self._pos + n])
        self._pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self.raw(1))[0]

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.raw(4 * count))
        return vals[0] if count == 1 else vals

    def f64(self, count=1):
        vals = struct.unpack(f"<{count}d", self.raw(8 * count))
        return vals[0] if count == 1 else vals

    def text(self):
        return self.raw(self.u32()).decode("utf-8")

    def digest(self):
        b = self.raw(HASH_BYTES)
        return "" if b == b"\0" * HASH_BYTES else b.hex()

    def array(self, shape, dtype="<f8"):
        dt = np.dtype(dtype)
        n = int(np.prod(shape, dtype=np.int64)) if len(shape) else 1
        return np.frombuffer(self.raw(n * dt.itemsize), dtype=dt).reshape(shape).copy()

    def finish(self):
        if self._pos != len(self._data):
            raise FormatError(f"{self.what}: {len(self._data) - self._pos} trailing bytes")


def check_magic(reader, magic, version_index=None):
    """Validate a magic string; ``version_index`` marks the version byte in it."""
    found = reader.raw(len(magic))
    if version_index is None:
        if found != magic:
            raise FormatError(f"{reader.what}: bad magic {found!r}, expected {magic!r}")
        return
    head, tail = version_index, version_index + 1
    if found[:head] != magic[:head] or found[tail:] != magic[tail:]:
        raise FormatError(f"{reader.what}: bad magic {found!r}, expected {magic!r}")
    if found[head] != magic[head]:
        raise FormatError(
            f"{reader.what}: unsupported version {chr(found[head])!r}, "
            f"expected {chr(magic[head])!r}"
        )
