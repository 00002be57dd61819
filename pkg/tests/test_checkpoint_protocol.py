import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gcr import checkpoint
from gcr import protocol as P

names = st.text(min_size=1, max_size=12)
arrays = hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                    elements=st.floats(allow_nan=True, allow_infinity=True))


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(names, arrays, max_size=5))
def test_checkpoint_roundtrip_is_bit_exact(tensors):
    back = checkpoint.loads(checkpoint.dumps(tensors))
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == np.asarray(v, dtype="<f8").tobytes()


def test_checkpoint_file_roundtrip(tmp_path):
    t = {"w": np.arange(6.0).reshape(2, 3), "s": np.array(3.5)}
    path = tmp_path / "m.gcrt"
    checkpoint.save(path, t)
    back = checkpoint.load(path)
    np.testing.assert_array_equal(back["w"], t["w"])
    assert back["s"].shape == ()


@pytest.mark.parametrize("mutate, match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], "version"),
    (lambda b: b[:-3], "truncated"),
    (lambda b: b + b"\0", "trailing"),
])
def test_checkpoint_rejects_corruption(mutate, match):
    data = checkpoint.dumps({"w": np.ones(4)})
    with pytest.raises(checkpoint.CheckpointError, match=match):
        checkpoint.loads(mutate(data))


msg_types = st.sampled_from(list(P.MsgType))


@settings(max_examples=200, deadline=None)
@given(msg_types, st.binary(max_size=300))
def test_envelope_roundtrip(mtype, payload):
    frame = P.encode_envelope(P.Envelope(mtype, payload))
    assert len(frame) == P.FRAME_OVERHEAD + len(payload)
    back = P.decode_envelope(frame)
    assert (back.msg_type, back.payload) == (mtype, payload)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(msg_types, st.binary(max_size=50)), min_size=1, max_size=8),
       st.integers(1, 17))
def test_frame_reader_handles_arbitrary_chunking(msgs, chunk):
    stream = b"".join(P.encode_envelope(P.Envelope(t, p)) for t, p in msgs)
    reader = P.FrameReader()
    got = []
    for i in range(0, len(stream), chunk):
        got += reader.feed(stream[i:i + chunk])
    assert [(e.msg_type, e.payload) for e in got] == msgs
    assert reader.pending == 0


def _frame(payload=b"abc", mtype=P.MsgType.METRICS):
    return bytearray(P.encode_envelope(P.Envelope(mtype, payload)))


def test_error_codes():
    f = _frame()
    f[0] ^= 0xFF
    with pytest.raises(P.BadMagic) as e:
        P.decode_envelope(bytes(f))
    assert e.value.code == 1

    f = _frame()
    f[4] = 7
    with pytest.raises(P.BadVersion) as e:
        P.decode_envelope(bytes(f))
    assert e.value.code == 2

    f = _frame()
    f[5] = 200
    with pytest.raises(P.UnknownMsgType) as e:
        P.decode_envelope(bytes(f))
    assert e.value.code == 3

    with pytest.raises(P.Truncated) as e:
        P.decode_envelope(bytes(_frame())[:-1])
    assert e.value.code == 4

    f = _frame()
    f[P.HEADER_SIZE] ^= 1
    with pytest.raises(P.BadCrc) as e:
        P.decode_envelope(bytes(f))
    assert e.value.code == 5

    head = struct.pack("<4sBBI", P.MAGIC, P.VERSION, 1, P.MAX_PAYLOAD + 1)
    with pytest.raises(P.PayloadTooLarge) as e:
        P.decode_envelope(head + b"\0" * 4)
    assert e.value.code == 6

    with pytest.raises(P.TrailingData) as e:
        P.decode_envelope(bytes(_frame()) + b"\0")
    assert e.value.code == 7


def test_crc_is_over_payload():
    f = bytes(_frame(b"hello"))
    (crc,) = struct.unpack("<I", f[-4:])
    assert crc == zlib.crc32(b"hello")


def test_message_payload_roundtrip():
    obs = np.random.default_rng(0).random((6, 4, 4))
    frame = P.message(P.MsgType.TRANSITION, {"episode": 3, "done": False}, {"obs": obs})
    env = P.decode_envelope(frame)
    header, arrs = P.unpack_payload(env.payload)
    assert header == {"episode": 3, "done": False}
    assert arrs["obs"].tobytes() == obs.tobytes()


def test_unpack_payload_rejects_overrun():
    payload = P.pack_payload({}, {"x": np.ones(3)})
    with pytest.raises(P.Truncated):
        P.unpack_payload(payload[:-8])
    with pytest.raises(P.TrailingData):
        P.unpack_payload(payload + b"\0")
