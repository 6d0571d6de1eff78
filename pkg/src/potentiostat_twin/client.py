"""Wire-protocol client and the closed-loop (fluorescence tracking) harness."""

from __future__ import annotations

import math
import os
import socket
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path

from . import wire
from .device import Device, DeviceConfig
from .errors import RemoteError, Timeout
from .server import DEFAULT_PORT, DeviceService

TRACE_HEADER = "t_s,target,measured,u_mV"


class Client:
    """Blocking UDP client. One request in flight at a time (thread-safe).

    Every call returns a reply or raises Timeout after ``retries`` attempts
    of ``timeout_ms`` each. ERR replies raise RemoteError.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT,
                 timeout_ms: int = 200, retries: int = 3):
        if retries < 1 or timeout_ms <= 0:
            raise ValueError("need retries >= 1 and timeout_ms > 0")
        self.address = (host, port)
        self.timeout_ms = timeout_ms
        self.retries = retries
        self._lock = threading.Lock()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.settimeout(timeout_ms / 1000.0)

    def close(self):
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _flush_stale(self):
        # replies to earlier, timed-out attempts must not be read as ours
        self._sock.setblocking(False)
        try:
            while True:
                self._sock.recv(4096)
        except (BlockingIOError, OSError):
            pass
        finally:
            self._sock.settimeout(self.timeout_ms / 1000.0)

    def request_raw(self, data: bytes, timeout_ms: int | None = None) -> bytes:
        with self._lock:
            self._flush_stale()
            if timeout_ms is not None:
                self._sock.settimeout(timeout_ms / 1000.0)
            for _ in range(self.retries):
                try:
                    self._sock.sendto(data, self.address)
                    reply, _addr = self._sock.recvfrom(4096)
                    return reply
                except socket.timeout:
                    continue
                except ConnectionRefusedError:
                    # ICMP port unreachable: nothing listening; wait out the slot
                    time.sleep(self.timeout_ms / 1000.0)
                    continue
        raise Timeout(f"no reply from {self.address[0]}:{self.address[1]} "
                      f"after {self.retries} x {self.timeout_ms} ms")

    def request(self, cmd, timeout_ms: int | None = None) -> str:
        """Send a command object; return the OK payload or raise RemoteError."""
        reply = wire.decode_reply(self.request_raw(wire.encode(cmd), timeout_ms))
        if isinstance(reply, wire.Err):
            raise RemoteError(reply.code, reply.text)
        return reply.payload

    def ping(self) -> bool:
        return self.request(wire.Ping()) == "PONG"

    def info(self) -> dict:
        out = {}
        for tok in self.request(wire.Info()).split():
            k, _, v = tok.partition("=")
            out[k] = int(v) if v.lstrip("-").isdigit() else v
        return out

    def set_voltage(self, ch: int, mv: int):
        self.request(wire.Set(ch, int(mv)))

    def switch(self, ch: int, on: bool):
        self.request(wire.Sw(ch, int(bool(on))))

    def get_current(self, ch: int) -> int:
        return int(self.request(wire.GetI(ch)))

    def get_voltage(self, ch: int) -> int:
        return int(self.request(wire.GetV(ch)))

    def calibrate(self, timeout_ms: int = 5000) -> list[int]:
        # averaging thousands of no-load samples takes longer than a normal reply
        return [int(x) for x in self.request(wire.Cal(), timeout_ms).split()]

    def run(self, name: str):
        self.request(wire.Run(name))

    def stop(self):
        self.request(wire.Stop())


# --- controller -------------------------------------------------------------

@dataclass(frozen=True)
class ControllerState:
    k_p: float = 100.0  # V per unit intensity error
    k_i: float = 1.5  # V/s per unit intensity error
    integral: float = 0.0
    u_min: float = -1.4
    u_max: float = 1.4

    def __post_init__(self):
        if not self.u_min <= self.u_max:
            raise ValueError("u_min must not exceed u_max")


def _clamp(x, lo, hi):
    return lo if x < lo else hi if x > hi else x


def control_step(state: ControllerState, target: float, measured: float, dt: float):
    """PI law with output and integral clamping; returns ``(u_volts, state')``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not (0.0 <= target <= 1.0 and 0.0 <= measured <= 1.0):
        raise ValueError("target and measured must lie in [0, 1]")
    e = target - measured
    integral = _clamp(state.integral + state.k_i * e * dt, state.u_min, state.u_max)
    u = _clamp(state.k_p * e + integral, state.u_min, state.u_max)
    return u, replace(state, integral=integral)


# --- sensors ----------------------------------------------------------------

class SimulatedFluorescence:
    """Fluorescence proxy of an ion-pump cell inside an in-process twin."""

    def __init__(self, device: Device, channel: int):
        cell = device.cells[channel]
        if not hasattr(cell, "fluorescence"):
            raise ValueError(f"channel {channel} carries no ion-pump load")
        self.device = device
        self.channel = channel

    def read(self) -> float:
        return float(self.device.cells[self.channel].fluorescence())


class FileTailSensor:
    """Follows a text file with one decimal intensity per line; returns the
    newest complete value (blocking up to ``timeout_s`` for the first one)."""

    def __init__(self, path, timeout_s: float = 10.0, poll_s: float = 0.05):
        self.path = Path(path)
        self.timeout_s = timeout_s
        self.poll_s = poll_s
        self._pos = 0
        self._partial = ""
        self.value: float | None = None

    def _poll(self):
        try:
            with open(self.path, encoding="ascii") as fh:
                if os.fstat(fh.fileno()).st_size < self._pos:  # truncated / rotated
                    self._pos, self._partial = 0, ""
                fh.seek(self._pos)
                chunk = fh.read()
                self._pos = fh.tell()
        except FileNotFoundError:
            return
        lines = (self._partial + chunk).split("\n")
        self._partial = lines.pop()
        for line in lines:
            line = line.strip()
            if not line:
                continue
            try:
                v = float(line)
            except ValueError:
                continue
            if math.isfinite(v):
                self.value = min(1.0, max(0.0, v))

    def read(self) -> float:
        deadline = time.monotonic() + self.timeout_s
        self._poll()
        while self.value is None:
            if time.monotonic() > deadline:
                raise Timeout(f"no intensity in {self.path}")
            time.sleep(self.poll_s)
            self._poll()
        return self.value


# --- clocks -----------------------------------------------------------------

class TwinClock:
    """Lockstep time: the twin advances exactly one control period per call."""

    def __init__(self, service: DeviceService):
        self.service = service

    def now(self) -> float:
        return self.service.device.t

    def advance(self, seconds: float):
        self.service.advance(seconds)


class WallClock:
    """Real time, for a free-running server."""

    def __init__(self):
        self._t0 = time.monotonic()
        self._next = 0.0

    def now(self) -> float:
        return time.monotonic() - self._t0

    def advance(self, seconds: float):
        self._next += seconds
        delay = self._next - self.now()
        if delay > 0:
            time.sleep(delay)


# --- harness ----------------------------------------------------------------

def parse_target(spec: str):
    """``"0.6"`` or piecewise-constant ``"0:0.5,20:0.65"`` (t_s:intensity)."""
    pts = []
    for part in str(spec).split(","):
        part = part.strip()
        if ":" in part:
            t, v = part.split(":", 1)
            pts.append((float(t), float(v)))
        else:
            pts.append((0.0, float(part)))
    pts.sort()
    if not pts or any(not 0.0 <= v <= 1.0 for _, v in pts):
        raise ValueError(f"bad target spec {spec!r}: intensities must be in [0, 1]")

    def target(t):
        val = pts[0][1]
        for t0, v in pts:
            if t >= t0:
                val = v
        return val

    return target


def closed_loop_twin(config: DeviceConfig, channel: int = 0):
    """Fresh twin prepared for tracking: calibrated, ``channel`` connected at 0 V."""
    dev = Device(config)
    svc = DeviceService(dev)
    dev.calibrate()
    svc.execute(wire.Set(channel, 0))
    svc.execute(wire.Sw(channel, 1))
    return dev, svc


def _write_trace_header(fh, meta):
    for k, v in meta.items():
        fh.write(f"# {k}={v}\n")
    fh.write(TRACE_HEADER + "\n")


def run_closed_loop(client: Client, target_fn, duration_s: float, sensor, period_s: float = 2.0,
                    channel: int = 0, state: ControllerState | None = None, clock=None,
                    polarity: int = -1, trace_path=None, meta: dict | None = None):
    """Every period: read sensor, PI step, SET the channel, record a row.

    ``polarity=-1`` because a negative drive raises fluorescence on the
    ion pump. The row's ``u_mV`` is the value actually sent. On Timeout the
    rows so far are flushed to ``trace_path`` and the exception propagates.
    """
    if not period_s > 0:
        raise ValueError("period_s must be positive")
    state = state or ControllerState()
    clock = clock or WallClock()
    rows = []
    fh = open(trace_path, "w", encoding="ascii", newline="\n") if trace_path else None
    try:
        if fh:
            _write_trace_header(fh, {"channel": channel, "period_s": repr(period_s),
                                     "k_p": repr(state.k_p), "k_i": repr(state.k_i),
                                     "polarity": polarity, **(meta or {})})
        n = int(round(duration_s / period_s))
        for k in range(n + 1):
            t = k * period_s
            measured = sensor.read()
            target = float(target_fn(t))
            u, state = control_step(state, target, measured, period_s)
            u_mV = int(round(polarity * u * 1000.0))
            client.set_voltage(channel, u_mV)
            row = (t, target, measured, u_mV)
            rows.append(row)
            if fh:
                fh.write(f"{t!r},{target!r},{measured!r},{u_mV}\n")
            if k < n:
                clock.advance(period_s)
    finally:
        if fh:
            fh.close()
    return rows


def read_trace(path):
    meta, rows = {}, []
    with open(path, encoding="ascii") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                k, _, v = line[1:].strip().partition("=")
                meta[k] = v
            elif line == TRACE_HEADER or not line:
                continue
            else:
                t, tgt, m, u = line.split(",")
                rows.append((float(t), float(tgt), float(m), int(u)))
    return meta, rows


def replay_trace(path) -> list[float]:
    """Re-apply a trace's SETs on a fresh twin built from its metadata and
    return the measured series it produces."""
    meta, rows = read_trace(path)
    if "config" not in meta:
        raise ValueError("trace has no config metadata; cannot replay")
    cfg = DeviceConfig.from_description(meta["config"], seed=int(meta.get("seed", 0)))
    channel = int(meta["channel"])
    period = float(meta["period_s"])
    dev, svc = closed_loop_twin(cfg, channel)
    sensor = SimulatedFluorescence(dev, channel)
    out = []
    for k, (_t, _tgt, _m, u_mV) in enumerate(rows):
        out.append(sensor.read())
        svc.execute(wire.Set(channel, u_mV))
        if k < len(rows) - 1:
            svc.advance(period)
    return out
