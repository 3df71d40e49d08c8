"""Little-endian fixed-width binary packing used by every on-disk record."""

from __future__ import annotations

import struct

_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_F64 = struct.Struct("<d")


class Truncated(ValueError):
    pass


class Packer:
    def __init__(self):
        self.buf = bytearray()

    def u8(self, v: int) -> Packer:
        self.buf += _U8.pack(v)
        return self

    def u16(self, v: int) -> Packer:
        self.buf += _U16.pack(v)
        return self

    def u32(self, v: int) -> Packer:
        self.buf += _U32.pack(v)
        return self

    def u64(self, v: int) -> Packer:
        self.buf += _U64.pack(v)
        return self

    def f64(self, v: float) -> Packer:
        self.buf += _F64.pack(v)
        return self

    def boolean(self, v: bool) -> Packer:
        return self.u8(1 if v else 0)

    def blob(self, data: bytes) -> Packer:
        self.u64(len(data))
        self.buf += data
        return self

    def raw(self, data: bytes) -> Packer:
        self.buf += data
        return self

    def string(self, s: str) -> Packer:
        data = s.encode()
        self.u16(len(data))
        self.buf += data
        return self

    def optional_blob(self, data: bytes | None) -> Packer:
        self.boolean(data is not None)
        if data is not None:
            self.blob(data)
        return self

    def bytes(self) -> bytes:
        return bytes(self.buf)


class Unpacker:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = memoryview(data)
        self.pos = pos

    def _take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise Truncated(f"need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return _U8.unpack(self._take(1))[0]

    def u16(self) -> int:
        return _U16.unpack(self._take(2))[0]

    def u32(self) -> int:
        return _U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def f64(self) -> float:
        return _F64.unpack(self._take(8))[0]

    def boolean(self) -> bool:
        v = self.u8()
        if v > 1:
            raise Truncated(f"bad boolean {v} at offset {self.pos - 1}")
        return bool(v)

    def blob(self) -> bytes:
        return bytes(self._take(self.u64()))

    def raw(self, n: int) -> bytes:
        return bytes(self._take(n))

    def string(self) -> str:
        try:
            return bytes(self._take(self.u16())).decode()
        except UnicodeDecodeError as e:
            raise Truncated(str(e)) from None

    def optional_blob(self) -> bytes | None:
        return self.blob() if self.boolean() else None

    def done(self) -> bool:
        return self.pos == len(self.data)

    def expect_end(self) -> None:
        if not self.done():
            raise Truncated(f"{len(self.data) - self.pos} trailing bytes")
