"""Chunked binary record container (``.brc``).

Layout, all integers little-endian::

    header  (32 B)  magic "BRC1" | version u32 | chunk_target_bytes u64 | 16 zero bytes
    frames          payload_len u64 | len_crc u32 | payload | payload_crc u32
    index           (offset u64, frame_len u64) * records
                    (first_record u64, record_count u64) * chunks
    footer  (32 B)  index_offset u64 | record_count u64 | chunk_count u64 |
                    index_crc u32 | magic "BRCE"

A payload is one serialized sample (see :func:`encode_payload`).  All reads
on an open :class:`ContainerHandle` go through ``os.pread`` so a handle can
be shared by many threads without any locking.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import (
    CorruptIndex,
    CorruptRecord,
    DuplicateKey,
    EmptyInput,
    FormatError,
    IndexOutOfRange,
    InvalidArgument,
    PayloadError,
    TruncatedFile,
)

MAGIC = b"BRC1"
FOOTER_MAGIC = b"BRCE"
FORMAT_VERSION = 1
DEFAULT_CHUNK_BYTES = 8 * 1024 * 1024
MIN_CHUNK_BYTES = 4096

HEADER = struct.Struct("<4sIQ16s")
FOOTER = struct.Struct("<QQQI4s")
FRAME_HEAD = struct.Struct("<QI")
INDEX_ENTRY = struct.Struct("<QQ")
FRAME_OVERHEAD = FRAME_HEAD.size + 4

KIND_TENSOR = 0
KIND_ENCODED = 1
CODE_DTYPES = {0: np.dtype(np.uint8), 1: np.dtype("<f4")}

_PAYLOAD_HEAD = struct.Struct("<I")
_PAYLOAD_META = struct.Struct("<qB")
_TENSOR_HEAD = struct.Struct("<IIIB")


def crc32(data) -> int:
    """CRC-32/ISO-HDLC of ``data`` (zlib's polynomial and conventions)."""
    return zlib.crc32(data) & 0xFFFFFFFF


# -- payloads -----------------------------------------------------------------

@dataclass(frozen=True)
class SamplePayload:
    """One serialized sample.

    ``image`` is set for kind 0 (raw tensor), ``encoded`` for kind 1 (opaque
    bytes, e.g. a PPM file).
    """

    key: str
    label: int
    kind: int = KIND_TENSOR
    image: np.ndarray | None = field(default=None, compare=False)
    encoded: bytes | None = None

    def __eq__(self, other):
        if not isinstance(other, SamplePayload):
            return NotImplemented
        if (self.key, self.label, self.kind, self.encoded) != (
            other.key, other.label, other.kind, other.encoded
        ):
            return False
        if self.image is None or other.image is None:
            return self.image is None and other.image is None
        return (
            self.image.dtype == other.image.dtype
            and self.image.shape == other.image.shape
            and self.image.tobytes() == other.image.tobytes()
        )

    __hash__ = None


def encode_tensor_body(image: np.ndarray) -> bytes:
    """Kind-0 body: height, width, channels, dtype code, then pixel bytes.

    This is also the on-disk layout of a ``.brt`` file.
    """
    if image.ndim != 3:
        raise InvalidArgument(f"expected an HxWxC tensor, got shape {image.shape}")
    if image.dtype == np.uint8:
        code = 0
    elif image.dtype == np.float32:
        code = 1
    else:
        raise InvalidArgument(f"unsupported tensor dtype {image.dtype}")
    h, w, c = image.shape
    pixels = np.ascontiguousarray(image, dtype=CODE_DTYPES[code]).tobytes()
    return _TENSOR_HEAD.pack(h, w, c, code) + pixels


def decode_tensor_body(body, copy: bool = True) -> np.ndarray:
    """Inverse of :func:`encode_tensor_body`.

    With ``copy=False`` the array shares ``body``'s memory.
    """
    body = memoryview(body)
    if len(body) < _TENSOR_HEAD.size:
        raise PayloadError("tensor body shorter than its header")
    h, w, c, code = _TENSOR_HEAD.unpack_from(body)
    if code not in CODE_DTYPES:
        raise PayloadError(f"unknown dtype code {code}")
    dtype = CODE_DTYPES[code]
    expected = h * w * c * dtype.itemsize
    pixels = body[_TENSOR_HEAD.size:]
    if len(pixels) != expected:
        raise PayloadError(
            f"tensor body holds {len(pixels)} pixel bytes, expected {expected}"
        )
    image = np.frombuffer(pixels, dtype=dtype).reshape(h, w, c)
    return image.copy() if copy else image


def encode_payload(sample: SamplePayload) -> bytes:
    key = sample.key.encode("utf-8")
    head = _PAYLOAD_HEAD.pack(len(key)) + key + _PAYLOAD_META.pack(sample.label, sample.kind)
    if sample.kind == KIND_TENSOR:
        if sample.image is None:
            raise InvalidArgument(f"kind-0 sample {sample.key!r} has no image")
        return head + encode_tensor_body(sample.image)
    if sample.kind == KIND_ENCODED:
        if sample.encoded is None:
            raise InvalidArgument(f"kind-1 sample {sample.key!r} has no encoded bytes")
        return head + bytes(sample.encoded)
    raise InvalidArgument(f"unknown payload kind {sample.kind}")


def split_payload(payload) -> tuple[str, int, int, memoryview]:
    """Parse a payload's header into (key, label, kind, body view)."""
    view = memoryview(payload)
    try:
        (key_len,) = _PAYLOAD_HEAD.unpack_from(view)
        pos = _PAYLOAD_HEAD.size
        if pos + key_len + _PAYLOAD_META.size > len(view):
            raise PayloadError("payload shorter than its key and metadata")
        key = bytes(view[pos:pos + key_len]).decode("utf-8")
        pos += key_len
        label, kind = _PAYLOAD_META.unpack_from(view, pos)
        pos += _PAYLOAD_META.size
    except struct.error as exc:
        raise PayloadError(f"malformed payload header: {exc}") from exc
    except UnicodeDecodeError as exc:
        raise PayloadError(f"sample key is not valid UTF-8: {exc}") from exc
    return key, label, kind, view[pos:]


def decode_payload(payload) -> SamplePayload:
    key, label, kind, body = split_payload(payload)
    if kind == KIND_TENSOR:
        return SamplePayload(key, label, kind, image=decode_tensor_body(body))
    if kind == KIND_ENCODED:
        return SamplePayload(key, label, kind, encoded=bytes(body))
    raise PayloadError(f"unknown payload kind {kind}")


def encode_frame(payload: bytes) -> bytes:
    n = len(payload)
    length = struct.pack("<Q", n)
    return length + struct.pack("<I", crc32(length)) + payload + struct.pack("<I", crc32(payload))


# -- writing ------------------------------------------------------------------

@dataclass(frozen=True)
class ContainerSummary:
    record_count: int
    chunk_count: int
    total_bytes: int


def write_container(
    samples: Iterable[SamplePayload],
    chunk_target_bytes: int = DEFAULT_CHUNK_BYTES,
    destination: str | os.PathLike = "data.brc",
) -> ContainerSummary:
    """Serialize ``samples`` in order into a new container at ``destination``.

    A frame joins the current chunk unless that would push the chunk past
    ``chunk_target_bytes``; a lone oversized frame still gets its own chunk.
    The partially written file is removed if anything goes wrong.
    """
    if chunk_target_bytes < MIN_CHUNK_BYTES:
        raise InvalidArgument(f"chunk_target_bytes must be >= {MIN_CHUNK_BYTES}")
    records: list[tuple[int, int]] = []
    chunks: list[list[int]] = []
    chunk_bytes = 0
    seen: set[str] = set()
    offset = HEADER.size
    try:
        with open(destination, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, chunk_target_bytes, bytes(16)))
            for sample in samples:
                if sample.key in seen:
                    raise DuplicateKey(f"duplicate sample key {sample.key!r}")
                seen.add(sample.key)
                frame = encode_frame(encode_payload(sample))
                size = len(frame)
                if not chunks or (chunk_bytes + size > chunk_target_bytes and chunks[-1][1] > 0):
                    chunks.append([len(records), 0])
                    chunk_bytes = 0
                chunks[-1][1] += 1
                chunk_bytes += size
                records.append((offset, size))
                fh.write(frame)
                offset += size
            if not records:
                raise EmptyInput("no samples to write")
            index = b"".join(INDEX_ENTRY.pack(*r) for r in records)
            index += b"".join(INDEX_ENTRY.pack(*c) for c in chunks)
            fh.write(index)
            fh.write(FOOTER.pack(offset, len(records), len(chunks), crc32(index), FOOTER_MAGIC))
            total = offset + len(index) + FOOTER.size
    except BaseException:
        try:
            os.unlink(destination)
        except OSError:
            pass
        raise
    return ContainerSummary(len(records), len(chunks), total)


# -- reading ------------------------------------------------------------------

@dataclass(frozen=True)
class VerificationReport:
    ok: bool
    corrupt_records: list[int]


class ContainerHandle:
    """An open container: header, footer and index parsed, payloads untouched."""

    def __init__(self, path):
        self.path = os.fspath(path)
        self._fd = os.open(self.path, os.O_RDONLY)
        try:
            self._load()
        except BaseException:
            os.close(self._fd)
            self._fd = -1
            raise

    def _read(self, size: int, offset: int) -> bytes:
        data = os.pread(self._fd, size, offset)
        if len(data) != size:
            raise TruncatedFile(
                f"{self.path}: wanted {size} bytes at offset {offset}, got {len(data)}"
            )
        return data

    def _load(self):
        self.file_size = os.fstat(self._fd).st_size
        if self.file_size < HEADER.size:
            raise TruncatedFile(f"{self.path}: {self.file_size} bytes is too short for a header")
        magic, version, chunk_target, reserved = HEADER.unpack(self._read(HEADER.size, 0))
        if magic != MAGIC:
            raise FormatError(f"{self.path}: bad header magic {magic!r}")
        if version != FORMAT_VERSION:
            raise FormatError(f"{self.path}: unsupported format version {version}")
        if reserved != bytes(16) or chunk_target < MIN_CHUNK_BYTES:
            raise FormatError(f"{self.path}: malformed header")
        self.chunk_target_bytes = chunk_target
        if self.file_size < HEADER.size + FOOTER.size:
            raise TruncatedFile(f"{self.path}: no room for a footer")
        index_offset, n_records, n_chunks, index_crc, fmagic = FOOTER.unpack(
            self._read(FOOTER.size, self.file_size - FOOTER.size)
        )
        # every finished container ends with the footer magic, so its absence means
        # the tail of the file is gone
        if fmagic != FOOTER_MAGIC:
            raise TruncatedFile(f"{self.path}: footer magic missing (file truncated?)")
        index_len = (n_records + n_chunks) * INDEX_ENTRY.size
        if index_offset < HEADER.size or index_offset + index_len != self.file_size - FOOTER.size:
            raise CorruptIndex(f"{self.path}: footer does not describe a valid index range")
        raw = self._read(index_len, index_offset)
        if crc32(raw) != index_crc:
            raise CorruptIndex(f"{self.path}: index CRC mismatch")
        table = np.frombuffer(raw, dtype="<u8").reshape(-1, 2)
        self.offsets = table[:n_records, 0].astype(np.int64)
        self.frame_lens = table[:n_records, 1].astype(np.int64)
        self.chunks = table[n_records:].astype(np.int64)
        self.index_offset = index_offset
        self._check_index()
        # plain ints index faster than numpy scalars on the per-record path
        self._spans = list(zip(self.offsets.tolist(), self.frame_lens.tolist()))

    def _check_index(self):
        offs, lens = self.offsets, self.frame_lens
        if len(offs) == 0:
            raise CorruptIndex(f"{self.path}: container holds no records")
        if offs[0] != HEADER.size or np.any(lens < FRAME_OVERHEAD):
            raise CorruptIndex(f"{self.path}: inconsistent record table")
        if np.any(offs[1:] != offs[:-1] + lens[:-1]) or offs[-1] + lens[-1] != self.index_offset:
            raise CorruptIndex(f"{self.path}: record frames are not contiguous")
        firsts, counts = self.chunks[:, 0], self.chunks[:, 1]
        expected_firsts = np.concatenate(([0], np.cumsum(counts)[:-1]))
        if np.any(counts < 1) or np.any(firsts != expected_firsts) or counts.sum() != len(offs):
            raise CorruptIndex(f"{self.path}: chunk table does not partition the records")

    @property
    def record_count(self) -> int:
        return len(self.offsets)

    @property
    def chunk_count(self) -> int:
        return len(self.chunks)

    def chunk_range(self, chunk_id: int) -> range:
        first, count = self.chunks[chunk_id]
        return range(int(first), int(first + count))

    def _check_frame(self, index: int, frame) -> memoryview:
        view = memoryview(frame)
        length, len_crc = FRAME_HEAD.unpack_from(view)
        if crc32(view[:8]) != len_crc or length + FRAME_OVERHEAD != len(view):
            raise CorruptRecord(index)
        payload = view[FRAME_HEAD.size:FRAME_HEAD.size + length]
        (payload_crc,) = struct.unpack_from("<I", view, FRAME_HEAD.size + length)
        if crc32(payload) != payload_crc:
            raise CorruptRecord(index)
        return payload

    def read_payload_bytes(self, index: int) -> memoryview:
        """Checked payload of record ``index``, in a fresh writable buffer."""
        if not 0 <= index < len(self._spans):
            raise IndexOutOfRange(f"record {index} out of range [0, {self.record_count})")
        offset, size = self._spans[index]
        frame = bytearray(size)
        got = os.preadv(self._fd, [frame], offset)
        if got != size:
            raise TruncatedFile(
                f"{self.path}: wanted {size} bytes at offset {offset}, got {got}"
            )
        return self._check_frame(index, frame)

    def read_fields(self, index: int) -> tuple[str, int, int, memoryview]:
        """(key, label, kind, body) of record ``index`` without building a payload object."""
        return split_payload(self.read_payload_bytes(index))

    def read_record(self, index: int) -> SamplePayload:
        return decode_payload(self.read_payload_bytes(index))

    def _chunk_frames(self, chunk_id: int):
        if not 0 <= chunk_id < self.chunk_count:
            raise IndexOutOfRange(f"chunk {chunk_id} out of range [0, {self.chunk_count})")
        ids = self.chunk_range(chunk_id)
        start = int(self.offsets[ids.start])
        end = int(self.offsets[ids.stop - 1] + self.frame_lens[ids.stop - 1])
        block = memoryview(self._read(end - start, start))
        for i in ids:
            lo = int(self.offsets[i]) - start
            yield i, block[lo:lo + int(self.frame_lens[i])]

    def iterate_chunk(self, chunk_id: int) -> list[SamplePayload]:
        return [decode_payload(self._check_frame(i, f)) for i, f in self._chunk_frames(chunk_id)]

    def verify(self) -> VerificationReport:
        bad = []
        for chunk_id in range(self.chunk_count):
            for i, frame in self._chunk_frames(chunk_id):
                try:
                    self._check_frame(i, frame)
                except (CorruptRecord, struct.error):
                    bad.append(i)
        return VerificationReport(not bad, bad)

    def close(self):
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    @property
    def closed(self) -> bool:
        return self._fd < 0

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass

    def __repr__(self):
        return (
            f"ContainerHandle({self.path!r}, records={self.record_count}, "
            f"chunks={self.chunk_count})"
        )


def open_container(path) -> ContainerHandle:
    return ContainerHandle(path)


def read_record(handle: ContainerHandle, index: int) -> SamplePayload:
    return handle.read_record(index)


def iterate_chunk(handle: ContainerHandle, chunk_id: int) -> list[SamplePayload]:
    return handle.iterate_chunk(chunk_id)


def verify_container(handle: ContainerHandle) -> VerificationReport:
    return handle.verify()
