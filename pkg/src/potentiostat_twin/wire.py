"""ASCII line protocol carried in UDP datagrams.

One request per datagram, one reply per request. Frames are printable
ASCII terminated by LF (a CR before the LF is tolerated), at most 512
bytes. Voltages travel as integer mV and currents as integer pA. See
PROTOCOL.md for the grammar.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import IntEnum

from .errors import ParseError

MAX_DATAGRAM = 512


class ErrorCode(IntEnum):
    PARSE = 1
    RANGE = 2
    STATE = 3
    UNSUPPORTED = 4


@dataclass(frozen=True)
class Ping:
    pass


@dataclass(frozen=True)
class Info:
    pass


@dataclass(frozen=True)
class Set:
    ch: int
    mv: int


@dataclass(frozen=True)
class Sw:
    ch: int
    on: int


@dataclass(frozen=True)
class GetI:
    ch: int


@dataclass(frozen=True)
class GetV:
    ch: int


@dataclass(frozen=True)
class Cal:
    pass


@dataclass(frozen=True)
class Run:
    name: str


@dataclass(frozen=True)
class Stop:
    pass


@dataclass(frozen=True)
class Ok:
    payload: str = ""


@dataclass(frozen=True)
class Err:
    code: int
    text: str


COMMANDS = (Ping, Info, Set, Sw, GetI, GetV, Cal, Run, Stop)
_VERBS = {"PING": Ping, "INFO": Info, "SET": Set, "SW": Sw, "GETI": GetI, "GETV": GetV,
          "CAL": Cal, "RUN": Run, "STOP": Stop}
_VERB_OF = {cls: verb for verb, cls in _VERBS.items()}
_INT = re.compile(r"^[+-]?[0-9]{1,9}$")
_NAME = re.compile(r"^[A-Za-z0-9_.-]{1,64}$")
_TEXT = re.compile(r"^[\x20-\x7e]*$")


class WireError(ParseError):
    """Decode failure carrying the ERR code to reply with."""

    def __init__(self, code: ErrorCode, reason: str):
        self.code = ErrorCode(code)
        super().__init__(reason)

    def reply(self) -> Err:
        return Err(int(self.code), self.reason)


def _line(data: bytes) -> str:
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise WireError(ErrorCode.PARSE, "not-bytes")
    data = bytes(data)
    if not data:
        raise WireError(ErrorCode.PARSE, "empty")
    if len(data) > MAX_DATAGRAM:
        raise WireError(ErrorCode.PARSE, "too-long")
    if any(b > 0x7E or (b < 0x20 and b not in (0x0A, 0x0D)) for b in data):
        raise WireError(ErrorCode.PARSE, "non-ascii")
    if not data.endswith(b"\n"):
        raise WireError(ErrorCode.PARSE, "no-lf")
    body = data[:-1]
    if body.endswith(b"\r"):
        body = body[:-1]
    if b"\n" in body or b"\r" in body:
        raise WireError(ErrorCode.PARSE, "multi-line")
    return body.decode("ascii")


def _int(tok: str) -> int:
    if not _INT.match(tok):
        raise WireError(ErrorCode.PARSE, "bad-int")
    return int(tok)


def decode(data: bytes):
    """Datagram -> command object; raises WireError."""
    toks = _line(data).split()
    if not toks:
        raise WireError(ErrorCode.PARSE, "empty")
    verb, args = toks[0].upper(), toks[1:]
    cls = _VERBS.get(verb)
    if cls is None:
        raise WireError(ErrorCode.UNSUPPORTED, "unsupported")
    arity = {Set: 2, Sw: 2, GetI: 1, GetV: 1, Run: 1}.get(cls, 0)
    if len(args) != arity:
        raise WireError(ErrorCode.PARSE, "arity")
    if cls in (Ping, Info, Cal, Stop):
        return cls()
    if cls is Run:
        if not _NAME.match(args[0]):
            raise WireError(ErrorCode.PARSE, "bad-name")
        return Run(args[0])
    nums = [_int(a) for a in args]
    if cls is Sw and nums[1] not in (0, 1):
        raise WireError(ErrorCode.PARSE, "bad-switch")
    return cls(*nums)


def encode(msg) -> bytes:
    """Command or reply object -> datagram bytes."""
    if isinstance(msg, Ok):
        if not _TEXT.match(msg.payload):
            raise ValueError("payload must be printable ASCII")
        line = "OK" + (f" {msg.payload}" if msg.payload else "")
    elif isinstance(msg, Err):
        if not _TEXT.match(msg.text) or not msg.text:
            raise ValueError("error text must be non-empty printable ASCII")
        line = f"ERR {int(msg.code)} {msg.text}"
    elif isinstance(msg, Run):
        if not _NAME.match(msg.name):
            raise ValueError(f"bad protocol name {msg.name!r}")
        line = f"RUN {msg.name}"
    elif isinstance(msg, (Set, Sw)):
        line = f"{_VERB_OF[type(msg)]} {int(msg.ch)} {int(msg.mv if isinstance(msg, Set) else msg.on)}"
    elif isinstance(msg, (GetI, GetV)):
        line = f"{_VERB_OF[type(msg)]} {int(msg.ch)}"
    elif type(msg) in _VERB_OF:
        line = _VERB_OF[type(msg)]
    else:
        raise TypeError(f"cannot encode {msg!r}")
    data = (line + "\n").encode("ascii")
    if len(data) > MAX_DATAGRAM:
        raise ValueError("frame exceeds 512 bytes")
    return data


def decode_reply(data: bytes):
    line = _line(data)
    if line == "OK":
        return Ok()
    if line.startswith("OK "):
        return Ok(line[3:])
    if line.startswith("ERR "):
        parts = line.split(" ", 2)
        if len(parts) == 3 and parts[1].isdigit() and parts[2]:
            return Err(int(parts[1]), parts[2])
    raise WireError(ErrorCode.PARSE, "bad-reply")
