"""Datagram codec: examples, totality on arbitrary bytes, encode/decode round trip."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from potentiostat_twin import wire
from potentiostat_twin.wire import (Cal, Err, GetI, GetV, Info, Ok, Ping, Run, Set, Stop, Sw, WireError,
                                    decode, decode_reply, encode)


@pytest.mark.parametrize("data, msg", [
    (b"SET 3 1400\n", Set(3, 1400)),
    (b"set 3 -1400\r\n", Set(3, -1400)),
    (b"SW 0 1\n", Sw(0, 1)),
    (b"GETI 0\n", GetI(0)),
    (b"GETV 7\n", GetV(7)),
    (b"PING\n", Ping()),
    (b"INFO\n", Info()),
    (b"CAL\n", Cal()),
    (b"RUN cv_100\n", Run("cv_100")),
    (b"STOP\n", Stop()),
    (b"  SET   1  +5 \n", Set(1, 5)),
])
def test_decode_examples(data, msg):
    assert decode(data) == msg


@pytest.mark.parametrize("data, code, reason", [
    (b"SET x y\n", 1, "bad-int"),
    (b"SET 1\n", 1, "arity"),
    (b"SW 0 2\n", 1, "bad-switch"),
    (b"PING", 1, "no-lf"),
    (b"", 1, "empty"),
    (b"\n", 1, "empty"),
    (b"PING\nPING\n", 1, "multi-line"),
    (b"SET 1 \xff\n", 1, "non-ascii"),
    (b"SET 1 2\x00\n", 1, "non-ascii"),
    (b"A" * 600 + b"\n", 1, "too-long"),
    (b"JUMP 1\n", 4, "unsupported"),
    (b"RUN ../etc/passwd\n", 1, "bad-name"),
    (b"SET 1 1234567890\n", 1, "bad-int"),
])
def test_decode_errors(data, code, reason):
    with pytest.raises(WireError) as ei:
        decode(data)
    assert ei.value.reply() == Err(code, reason)


def test_error_reply_bytes():
    assert encode(WireError(1, "bad-int").reply()) == b"ERR 1 bad-int\n"


@pytest.mark.parametrize("msg, data", [
    (Ok(), b"OK\n"),
    (Ok("PONG"), b"OK PONG\n"),
    (Ok("1650000"), b"OK 1650000\n"),
    (Err(2, "channel"), b"ERR 2 channel\n"),
])
def test_reply_encoding(msg, data):
    assert encode(msg) == data
    assert decode_reply(data) == msg


def test_error_codes_stable():
    assert [int(c) for c in wire.ErrorCode] == [1, 2, 3, 4]
    assert [c.name for c in wire.ErrorCode] == ["PARSE", "RANGE", "STATE", "UNSUPPORTED"]


def test_encode_rejects_bad_payloads():
    with pytest.raises(ValueError):
        encode(Ok("two\nlines"))
    with pytest.raises(ValueError):
        encode(Run("no spaces"))
    with pytest.raises(TypeError):
        encode(object())


@settings(max_examples=2000)
@given(st.binary(max_size=700))
def test_decode_is_total(data):
    try:
        msg = decode(data)
    except WireError as exc:
        assert exc.code in wire.ErrorCode
        assert encode(exc.reply()).endswith(b"\n")
    else:
        assert type(msg) in wire.COMMANDS


@settings(max_examples=1000)
@given(st.text(alphabet=st.characters(min_codepoint=0x20, max_codepoint=0x7e), max_size=80))
def test_decode_total_on_printable_lines(text):
    try:
        decode((text + "\n").encode())
    except WireError:
        pass


_ints = st.integers(-999_999_999, 999_999_999)
commands = st.one_of(
    st.builds(Ping), st.builds(Info), st.builds(Cal), st.builds(Stop),
    st.builds(Set, _ints, _ints), st.builds(Sw, _ints, st.sampled_from([0, 1])),
    st.builds(GetI, _ints), st.builds(GetV, _ints),
    st.builds(Run, st.from_regex(r"[A-Za-z0-9_.-]{1,64}", fullmatch=True)),
)
replies = st.one_of(
    st.builds(Ok, st.from_regex(r"[\x21-\x7e]([\x20-\x7e]{0,60}[\x21-\x7e])?", fullmatch=True) | st.just("")),
    st.builds(Err, st.integers(1, 4), st.from_regex(r"[\x21-\x7e][\x20-\x7e]{0,40}", fullmatch=True)),
)


@given(commands)
def test_command_round_trip(msg):
    data = encode(msg)
    assert len(data) <= wire.MAX_DATAGRAM
    assert decode(data) == msg


@given(replies)
def test_reply_round_trip(msg):
    assert decode_reply(encode(msg)) == msg
