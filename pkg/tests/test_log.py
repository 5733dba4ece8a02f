import pytest
from hypothesis import given
from hypothesis import strategies as st

from push0.bus.log import HEADER, KIND_PUBLISH, CorruptLog, RecordFile, encode_record, scan

bodies = st.lists(st.binary(max_size=40), min_size=1, max_size=8)


def test_round_trip(tmp_path):
    f = RecordFile(tmp_path / "x.bin")
    f.append(KIND_PUBLISH, b"hello")
    f.append(2, b"")
    f.close()
    assert RecordFile(tmp_path / "x.bin").replayed.records == [(KIND_PUBLISH, b"hello"), (2, b"")]


@given(bodies)
def test_truncation_at_every_offset_restores_prefix(items):
    records = [encode_record(1 + i % 5, b) for i, b in enumerate(items)]
    data = b"".join(records)
    boundaries = [0]
    for r in records:
        boundaries.append(boundaries[-1] + len(r))
    for cut in range(len(data) + 1):
        res = scan(data[:cut])
        # Oracle: the longest whole-record prefix that fits in the cut.
        whole = max(i for i, b in enumerate(boundaries) if b <= cut)
        assert [b for _, b in res.records] == items[:whole]
        assert res.valid_bytes == boundaries[whole]
        assert res.discarded_bytes == cut - boundaries[whole]


def test_truncated_file_is_repaired_on_open(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(encode_record(1, b"abc") + encode_record(1, b"defg")[:-2])
    f = RecordFile(p)
    assert f.replayed.records == [(1, b"abc")] and f.replayed.discarded_bytes == HEADER.size + 2
    f.append(1, b"z")
    f.close()
    assert [b for _, b in RecordFile(p).replayed.records] == [b"abc", b"z"]


def test_bad_checksum_in_middle_is_corruption():
    a, b = encode_record(1, b"abc"), encode_record(1, b"def")
    bad = bytearray(a)
    bad[-1] ^= 0xFF
    with pytest.raises(CorruptLog):
        scan(bytes(bad) + b)


def test_bad_checksum_on_last_record_is_torn_tail():
    a, b = encode_record(1, b"abc"), bytearray(encode_record(1, b"def"))
    b[-1] ^= 0xFF
    res = scan(a + bytes(b))
    assert res.records == [(1, b"abc")]
