"""Container format: CRC, chunking, roundtrip, corruption detection, open cost."""

import os
import struct

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from loadforge.errors import (
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
from loadforge.record_format import (
    FOOTER,
    FRAME_OVERHEAD,
    HEADER,
    INDEX_ENTRY,
    KIND_ENCODED,
    SamplePayload,
    crc32,
    decode_payload,
    decode_tensor_body,
    encode_frame,
    encode_payload,
    encode_tensor_body,
    iterate_chunk,
    open_container,
    read_record,
    verify_container,
    write_container,
)

from conftest import payload_of_size, tensor_payload


def _reference_crc_table():
    table = []
    for n in range(256):
        c = n
        for _ in range(8):
            c = (c >> 1) ^ 0xEDB88320 if c & 1 else c >> 1
        table.append(c)
    return table


_TABLE = _reference_crc_table()


def reference_crc32(data: bytes) -> int:
    crc = 0xFFFFFFFF
    for b in data:
        crc = _TABLE[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFF


# -- crc32 -----------------------------------------------------------------------

def test_crc_empty_is_zero():
    assert crc32(b"") == 0
    assert reference_crc32(b"") == 0


def test_crc_check_value():
    assert reference_crc32(b"123456789") == 0xCBF43926
    assert crc32(b"123456789") == 0xCBF43926


def test_crc_order_matters():
    ab, ba = crc32(b"AB"), crc32(b"BA")
    assert ab != ba
    assert (ab, ba) == (reference_crc32(b"AB"), reference_crc32(b"BA"))


@given(st.binary(max_size=2048))
def test_crc_matches_reference(data):
    assert crc32(data) == reference_crc32(data)


# -- payload codec ----------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.uint8, np.float32])
def test_tensor_body_roundtrip(dtype):
    p = tensor_payload("k", (3, 7, 3), seed=4, dtype=dtype)
    back = decode_tensor_body(encode_tensor_body(p.image))
    assert back.dtype == p.image.dtype
    assert back.tobytes() == p.image.tobytes()


def test_tensor_body_rejects_bad_length():
    body = encode_tensor_body(np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(PayloadError):
        decode_tensor_body(body[:-1])


def test_tensor_body_rejects_unknown_dtype_code():
    body = bytearray(encode_tensor_body(np.zeros((1, 1, 1), np.uint8)))
    body[12] = 9
    with pytest.raises(PayloadError):
        decode_tensor_body(bytes(body))


def test_payload_layout():
    p = SamplePayload("ab", -3, KIND_ENCODED, encoded=b"xyz")
    raw = encode_payload(p)
    assert raw == struct.pack("<I", 2) + b"ab" + struct.pack("<qB", -3, 1) + b"xyz"
    assert decode_payload(raw) == p


def test_payload_bad_utf8_key():
    raw = struct.pack("<I", 1) + b"\xff" + struct.pack("<qB", 0, 1)
    with pytest.raises(PayloadError):
        decode_payload(raw)


def test_frame_layout():
    frame = encode_frame(b"hello")
    (length, len_crc) = struct.unpack_from("<QI", frame)
    assert length == 5
    assert len_crc == reference_crc32(frame[:8])
    assert frame[12:17] == b"hello"
    assert struct.unpack_from("<I", frame, 17)[0] == reference_crc32(b"hello")
    assert len(frame) == 5 + FRAME_OVERHEAD


# -- writing and chunking -------------------------------------------------------------

def _frame_sized(key, frame_len):
    # payload = key_len(4) + key + label/kind(9) + body
    body = frame_len - FRAME_OVERHEAD - 4 - len(key.encode()) - 9
    p = payload_of_size(key, body)
    assert len(encode_frame(encode_payload(p))) == frame_len
    return p


def test_single_record_single_chunk(tmp_path):
    # a 10-byte body; key and metadata add 14 bytes of payload header
    s = write_container([payload_of_size("a", 10)], 4096, tmp_path / "c.brc")
    assert (s.record_count, s.chunk_count) == (1, 1)


def test_three_3000_byte_frames_make_three_chunks(tmp_path):
    samples = [_frame_sized(k, 3000) for k in "abc"]
    s = write_container(samples, 4096, tmp_path / "c.brc")
    assert s.chunk_count == 3
    with open_container(tmp_path / "c.brc") as h:
        assert [list(h.chunk_range(i)) for i in range(3)] == [[0], [1], [2]]


def test_oversized_frame_gets_own_chunk(tmp_path):
    s = write_container([_frame_sized("a", 10_000)], 4096, tmp_path / "c.brc")
    assert s.chunk_count == 1


def test_frames_pack_up_to_target(tmp_path):
    # 2000 + 2000 fits 4096; the third would not
    samples = [_frame_sized(k, 2000) for k in "abcde"]
    s = write_container(samples, 4096, tmp_path / "c.brc")
    with open_container(tmp_path / "c.brc") as h:
        assert [len(h.chunk_range(i)) for i in range(h.chunk_count)] == [2, 2, 1]
    assert s.chunk_count == 3


def test_file_layout(tmp_path):
    samples = [tensor_payload(f"k{i}", seed=i) for i in range(3)]
    s = write_container(samples, 4096, tmp_path / "c.brc")
    raw = (tmp_path / "c.brc").read_bytes()
    assert len(raw) == s.total_bytes
    magic, version, target, reserved = HEADER.unpack_from(raw)
    assert (magic, version, target, reserved) == (b"BRC1", 1, 4096, bytes(16))
    index_offset, n_rec, n_chunks, index_crc, fmagic = FOOTER.unpack_from(raw, len(raw) - 32)
    assert fmagic == b"BRCE" and n_rec == 3
    index = raw[index_offset:len(raw) - 32]
    assert len(index) == (n_rec + n_chunks) * INDEX_ENTRY.size
    assert reference_crc32(index) == index_crc
    off, flen = INDEX_ENTRY.unpack_from(index)
    assert off == HEADER.size
    assert raw[off:off + flen] == encode_frame(encode_payload(samples[0]))


def test_duplicate_key_rejected_and_file_removed(tmp_path):
    dest = tmp_path / "c.brc"
    with pytest.raises(DuplicateKey):
        write_container([tensor_payload("x"), tensor_payload("x", seed=1)], 4096, dest)
    assert not dest.exists()


def test_empty_input_rejected(tmp_path):
    with pytest.raises(EmptyInput):
        write_container([], 4096, tmp_path / "c.brc")


def test_chunk_target_minimum(tmp_path):
    with pytest.raises(InvalidArgument):
        write_container([tensor_payload("x")], 4095, tmp_path / "c.brc")


# -- reading ------------------------------------------------------------------------

def test_roundtrip_two(tmp_path):
    s0, s1 = tensor_payload("s0", seed=1), tensor_payload("s1", seed=2, dtype=np.float32)
    write_container([s0, s1], 4096, tmp_path / "c.brc")
    with open_container(tmp_path / "c.brc") as h:
        assert h.record_count == 2
        assert read_record(h, 1) == s1
        assert read_record(h, 1) == s1  # side-effect free
        assert read_record(h, 0) == s0


def test_index_out_of_range(tmp_path):
    write_container([tensor_payload("a")], 4096, tmp_path / "c.brc")
    with open_container(tmp_path / "c.brc") as h:
        with pytest.raises(IndexOutOfRange):
            read_record(h, 1)
        with pytest.raises(IndexOutOfRange):
            iterate_chunk(h, h.chunk_count)


def test_chunks_concatenate_to_records(tmp_path):
    samples = [tensor_payload(f"k{i:02d}", (8, 9, 3), seed=i) for i in range(30)]
    write_container(samples, 4096, tmp_path / "c.brc")
    with open_container(tmp_path / "c.brc") as h:
        assert h.chunk_count > 1
        chained = [p for c in range(h.chunk_count) for p in iterate_chunk(h, c)]
        assert chained == [read_record(h, i) for i in range(h.record_count)] == samples
        firsts = [h.chunk_range(c).start for c in range(h.chunk_count)]
        assert firsts == sorted(firsts) and firsts[0] == 0


def test_single_chunk_iteration_equals_write_order(tmp_path):
    samples = [tensor_payload(f"k{i}", seed=i) for i in range(5)]
    write_container(samples, 1 << 20, tmp_path / "c.brc")
    with open_container(tmp_path / "c.brc") as h:
        assert h.chunk_count == 1
        assert iterate_chunk(h, 0) == samples


def test_iterate_chunk_uses_one_read(tmp_path, monkeypatch):
    samples = [tensor_payload(f"k{i}", seed=i) for i in range(6)]
    write_container(samples, 1 << 20, tmp_path / "c.brc")
    with open_container(tmp_path / "c.brc") as h:
        calls = []
        real = os.pread
        monkeypatch.setattr(os, "pread", lambda fd, n, off: calls.append((n, off)) or real(fd, n, off))
        iterate_chunk(h, 0)
    assert len(calls) == 1


# -- corruption ----------------------------------------------------------------------

def _write(tmp_path, n=6, name="c.brc"):
    samples = [tensor_payload(f"k{i}", (6, 5, 3), seed=i) for i in range(n)]
    path = tmp_path / name
    write_container(samples, 4096, path)
    with open_container(path) as h:
        spans = list(zip(h.offsets.tolist(), h.frame_lens.tolist()))
    return path, samples, spans


def _patch(path, offset, xor=0x01):
    raw = bytearray(path.read_bytes())
    raw[offset] ^= xor
    path.write_bytes(bytes(raw))


def test_truncated_file(tmp_path):
    path, _, _ = _write(tmp_path)
    path.write_bytes(path.read_bytes()[:-1])
    with pytest.raises(TruncatedFile):
        open_container(path)


def test_tiny_file_is_truncated(tmp_path):
    path = tmp_path / "tiny.brc"
    path.write_bytes(b"BRC1")
    with pytest.raises(TruncatedFile):
        open_container(path)


def test_bad_header_magic(tmp_path):
    path, _, _ = _write(tmp_path)
    _patch(path, 0)
    with pytest.raises(FormatError):
        open_container(path)


def test_bad_version(tmp_path):
    path, _, _ = _write(tmp_path)
    _patch(path, 4, 0x02)
    with pytest.raises(FormatError):
        open_container(path)


def test_index_crc_flipped(tmp_path):
    path, _, _ = _write(tmp_path)
    size = path.stat().st_size
    _patch(path, size - 32 + 24)  # index_crc field
    with pytest.raises(CorruptIndex):
        open_container(path)


def test_index_byte_flipped(tmp_path):
    path, _, spans = _write(tmp_path)
    index_offset = spans[-1][0] + spans[-1][1]
    _patch(path, index_offset + 3)
    with pytest.raises(CorruptIndex):
        open_container(path)


def test_payload_byte_flip_raises_corrupt_record(tmp_path):
    path, samples, spans = _write(tmp_path)
    off, _ = spans[2]
    _patch(path, off + 12 + 7)
    with open_container(path) as h:
        with pytest.raises(CorruptRecord) as info:
            read_record(h, 2)
        assert info.value.index == 2
        assert read_record(h, 1) == samples[1]


def test_verify_pristine(tmp_path):
    path, _, _ = _write(tmp_path)
    with open_container(path) as h:
        report = verify_container(h)
    assert report.ok and report.corrupt_records == []


def test_verify_single_corruption(tmp_path):
    path, _, spans = _write(tmp_path)
    _patch(path, spans[3][0] + 20)
    with open_container(path) as h:
        report = verify_container(h)
    assert not report.ok and report.corrupt_records == [3]


def test_verify_two_corruptions_ascending(tmp_path):
    path, _, spans = _write(tmp_path)
    _patch(path, spans[4][0] + 30)
    _patch(path, spans[1][0] + 2)  # length field
    with open_container(path) as h:
        assert verify_container(h).corrupt_records == [1, 4]


# -- properties -------------------------------------------------------------------

_payloads = st.lists(
    st.tuples(st.integers(0, 64 * 1024), st.integers(-(2**63), 2**63 - 1), st.integers(0, 2**32)),
    min_size=1, max_size=6,
)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(specs=_payloads, target=st.sampled_from([4096, 16384, 1 << 20]))
def test_roundtrip_property(tmp_path, specs, target):
    samples = []
    for i, (size, label, seed) in enumerate(specs):
        body = np.random.default_rng(seed).integers(0, 256, size, dtype=np.uint8).tobytes()
        samples.append(SamplePayload(f"s{i}", label, KIND_ENCODED, encoded=body))
    path = tmp_path / "prop.brc"
    write_container(samples, target, path)
    with open_container(path) as h:
        assert [read_record(h, i) for i in range(h.record_count)] == samples
        counts = [len(h.chunk_range(c)) for c in range(h.chunk_count)]
        assert sum(counts) == len(samples)
        for c in range(h.chunk_count):
            ids = h.chunk_range(c)
            if len(ids) > 1:
                assert int(h.frame_lens[ids.start:ids.stop].sum()) <= target


@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(record=st.integers(0, 3), where=st.floats(0, 1, exclude_max=True), bit=st.integers(0, 7),
       region=st.sampled_from(["length", "payload"]))
def test_single_bit_flip_detected(tmp_path, record, where, bit, region):
    path, _, spans = _write(tmp_path, n=4, name="flip.brc")
    off, flen = spans[record]
    if region == "length":
        pos = off + int(where * 8)
    else:
        pos = off + 12 + int(where * (flen - FRAME_OVERHEAD))
    _patch(path, pos, 1 << bit)
    with open_container(path) as h:
        assert verify_container(h).corrupt_records == [record]


def test_open_reads_only_header_footer_index(tmp_path, monkeypatch):
    small = [payload_of_size(f"k{i}", 16) for i in range(20)]
    large = [payload_of_size(f"k{i}", 200_000) for i in range(20)]
    # one chunk each, so both indexes are the same size
    write_container(small, 1 << 23, tmp_path / "small.brc")
    write_container(large, 1 << 23, tmp_path / "large.brc")

    real = os.pread
    reads = []

    def spy(fd, n, off):
        reads.append((off, n))
        return real(fd, n, off)

    monkeypatch.setattr(os, "pread", spy)
    touched = {}
    for name in ("small", "large"):
        reads.clear()
        h = open_container(tmp_path / f"{name}.brc")
        size = h.file_size
        allowed = [(0, HEADER.size), (size - FOOTER.size, size), (h.index_offset, size - FOOTER.size)]
        for off, n in reads:
            assert any(lo <= off and off + n <= hi for lo, hi in allowed), (name, off, n)
        touched[name] = sum(n for _, n in reads)
        h.close()
    assert touched["small"] == touched["large"]
