"""Remote operation: a serialized command service around one Device and the
UDP front end that feeds it."""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from concurrent.futures import Future
from pathlib import Path

from . import wire
from .config import shipped
from .device import Device, Pacer, info
from .errors import BusyError, ParseError, RangeError, ValidationError
from .protocol import ProtocolRunner, parse_protocol
from .wire import Err, ErrorCode, Ok

log = logging.getLogger(__name__)

DEFAULT_PORT = 9750


class DeviceService:
    """Owns a device and applies commands one at a time.

    Without a tick thread (lockstep mode) commands apply immediately and
    simulated time only moves through ``advance()``. With ``start()`` a
    thread ticks the device against a Pacer and commands are queued and
    applied between ticks.
    """

    def __init__(self, device: Device, protocol_dir=None):
        self.device = device
        self.protocol_dir = Path(protocol_dir) if protocol_dir else None
        self.runner: ProtocolRunner | None = None
        self._lock = threading.RLock()
        self._queue: queue.Queue = queue.Queue()
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()

    # --- command application -------------------------------------------

    def _check_channel(self, ch):
        if not 0 <= ch < self.device.n_channels:
            raise RangeError("channel")

    def _find_protocol(self, name: str) -> Path | None:
        dirs = ([self.protocol_dir] if self.protocol_dir else []) + [shipped("protocols", "")]
        for d in dirs:
            for cand in (d / name, d / f"{name}.csv"):
                if cand.is_file():
                    return cand
        return None

    def execute(self, cmd):
        """Apply one decoded command; always returns an Ok or Err reply."""
        with self._lock:
            try:
                return self._apply(cmd)
            except RangeError as exc:
                return Err(ErrorCode.RANGE, str(exc) if str(exc) in ("channel", "range") else "range")
            except BusyError:
                return Err(ErrorCode.STATE, "busy")

    def _apply(self, cmd):
        dev = self.device
        if isinstance(cmd, wire.Ping):
            return Ok("PONG")
        if isinstance(cmd, wire.Info):
            return Ok(" ".join(f"{k}={v}" for k, v in info(dev).items()))
        if isinstance(cmd, (wire.Set, wire.Sw, wire.GetI, wire.GetV)):
            self._check_channel(cmd.ch)
        if isinstance(cmd, wire.GetI):
            return Ok(str(dev.read_current(cmd.ch)))
        if isinstance(cmd, wire.GetV):
            return Ok(str(dev.get_voltage(cmd.ch)))
        if isinstance(cmd, wire.Stop):
            self._finish_run(aborted=True)
            return Ok()
        if dev.busy:
            raise BusyError("protocol running")
        if isinstance(cmd, wire.Set):
            try:
                dev.set_voltage(cmd.ch, cmd.mv)
            except RangeError:
                raise RangeError("range") from None
            return Ok()
        if isinstance(cmd, wire.Sw):
            dev.set_switch(cmd.ch, bool(cmd.on))
            return Ok()
        if isinstance(cmd, wire.Cal):
            dev.calibrate()
            return Ok(" ".join(str(int(round(b * 1000))) for b in dev.baselines_nA))
        if isinstance(cmd, wire.Run):
            path = self._find_protocol(cmd.name)
            if path is None:
                return Err(ErrorCode.RANGE, "no-such-protocol")
            try:
                proto = parse_protocol(path.read_text(encoding="utf-8"), n_channels=dev.n_channels)
            except (ParseError, ValidationError, RangeError):
                return Err(ErrorCode.RANGE, "bad-protocol")
            dev._log_command(f"RUN {cmd.name}")
            try:
                self.runner = ProtocolRunner(dev, proto)
            except (ValidationError, RangeError):
                dev._log_command("ABORT")
                return Err(ErrorCode.RANGE, "bad-protocol")
            dev.busy = True
            if not self.runner.active:
                self._finish_run()
            return Ok()
        return Err(ErrorCode.UNSUPPORTED, "unsupported")

    def _finish_run(self, aborted=False):
        if self.runner is None:
            return
        self.runner = None
        self.device.open_all(log=False)
        self.device._log_command("ABORT" if aborted else "END")
        self.device.busy = False

    def _tick(self):
        with self._lock:
            if self.runner is not None:
                self.runner.tick()
                if not self.runner.active:
                    self._finish_run()
            else:
                self.device.tick()

    def advance(self, seconds: float) -> int:
        """Lockstep: tick the device for ``seconds`` of simulated time."""
        n = int(round(seconds / self.device.dt))
        for _ in range(n):
            self._tick()
        return n

    # --- queued mode ---------------------------------------------------

    def submit(self, cmd, timeout: float = 5.0):
        """Apply ``cmd`` at the next tick boundary (or immediately in lockstep)."""
        if self._thread is None:
            return self.execute(cmd)
        fut: Future = Future()
        self._queue.put((cmd, fut))
        try:
            return fut.result(timeout=timeout)
        except Exception:
            return Err(ErrorCode.STATE, "timeout")

    def _drain(self, wait: float = 0.0):
        deadline = time.monotonic() + wait
        while True:
            remaining = deadline - time.monotonic()
            try:
                cmd, fut = self._queue.get(timeout=remaining) if remaining > 0 else self._queue.get_nowait()
            except queue.Empty:
                return
            if not fut.set_running_or_notify_cancel():
                continue
            fut.set_result(self.execute(cmd))

    def start(self, pacer: Pacer):
        if self._thread is not None:
            return
        self._stop.clear()
        pacer.start(self.device.t)

        def loop():
            dev = self.device
            expected_t = dev.t
            while not self._stop.is_set():
                self._drain()
                if dev.t != expected_t:
                    # CAL advanced simulated time by itself; resume pacing from here
                    pacer.start(dev.t)
                self._tick()
                expected_t = dev.t
                self._drain(max(0.0, pacer.deadline(dev.t + dev.dt) - time.monotonic()))
            self._drain()

        self._thread = threading.Thread(target=loop, name="device-ticker", daemon=True)
        self._thread.start()

    def stop(self):
        if self._thread is None:
            return
        self._stop.set()
        self._thread.join()
        self._thread = None
        self._drain()


class UDPServer:
    """Receive loop: decode, hand to the service, reply to the sender."""

    def __init__(self, service: DeviceService, host: str = "127.0.0.1", port: int = DEFAULT_PORT):
        self.service = service
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind((host, port))
        self.sock.settimeout(0.2)
        self.address = self.sock.getsockname()
        self._shutdown = threading.Event()
        self._thread: threading.Thread | None = None
        self.n_requests = 0

    def handle(self, data: bytes) -> bytes:
        try:
            cmd = wire.decode(data)
        except wire.WireError as exc:
            return wire.encode(exc.reply())
        try:
            reply = self.service.submit(cmd)
        except Exception:
            log.exception("command %r failed", cmd)
            reply = Err(ErrorCode.STATE, "internal")
        return wire.encode(reply)

    def serve_forever(self):
        while not self._shutdown.is_set():
            try:
                data, addr = self.sock.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError as exc:
                if self._shutdown.is_set():
                    break
                log.warning("recvfrom failed: %s", exc)
                continue
            self.n_requests += 1
            reply = self.handle(data)
            try:
                self.sock.sendto(reply, addr)
            except OSError as exc:
                log.warning("sendto %s failed: %s", addr, exc)

    def start(self) -> "UDPServer":
        self._thread = threading.Thread(target=self.serve_forever, name="udp-server", daemon=True)
        self._thread.start()
        return self

    def shutdown(self):
        self._shutdown.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def serve(device: Device, host: str = "0.0.0.0", port: int = DEFAULT_PORT,
          pacer: Pacer | None = None, protocol_dir=None, stop: threading.Event | None = None,
          http_port: int | None = None):
    """Run the UDP control plane (and optionally the HTTP API on ``http_port``)
    until ``stop`` is set (or forever)."""
    service = DeviceService(device, protocol_dir)
    if not device.calibrated:
        device.calibrate()
    server = UDPServer(service, host, port)
    service.start(pacer or Pacer("realtime"))
    log.info("serving %d channels on udp %s:%d", device.n_channels, *server.address)
    server.start()
    http = None
    if http_port is not None:
        import uvicorn

        from .api import create_app

        http = uvicorn.Server(uvicorn.Config(create_app(service), host=host, port=http_port,
                                             log_level="warning"))
        threading.Thread(target=http.run, name="http-api", daemon=True).start()
        log.info("http api on %s:%d", host, http_port)
    try:
        while not (stop and stop.is_set()):
            time.sleep(0.2)
    finally:
        if http is not None:
            http.should_exit = True
        server.shutdown()
        service.stop()
