"""Standalone CSV protocols: holds, ramps, open-circuit phases and loops.

File layout::

    # name=cv_100                 optional metadata lines
    # sample_rate_Hz=15
    step,channel,action,v1_mV,v2_mV,duration_s,repeat
    0,0,RAMP,-900,500,14,1
    1,0,RAMP,500,-900,14,1

``channel`` is a 0-based index or ``ALL``. ``HOLD`` drives ``v1_mV`` with the
switch closed, ``RAMP`` sweeps ``v1_mV`` -> ``v2_mV``, ``OPEN`` disconnects
(``duration_s`` may be 0), ``LOOP`` jumps back to step ``v1_mV`` until the
block has run ``repeat`` times in total. ``repeat`` on HOLD/RAMP replays
that step back to back.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

from . import signal_chain as sc
from .device import MV_MAX, MV_MIN, Device, Pacer
from .errors import AbortError, BusyError, ParseError, RangeError, ValidationError

HEADER = "step,channel,action,v1_mV,v2_mV,duration_s,repeat"
ACTIONS = ("HOLD", "RAMP", "OPEN", "LOOP")
ALL = "ALL"
DEFAULT_RATE_HZ = 15.0


@dataclass(frozen=True)
class ProtocolStep:
    index: int
    channel: int | str
    action: str
    v1_mV: int | None = None
    v2_mV: int | None = None
    duration_s: float = 0.0
    repeat: int = 1

    @property
    def loop_to(self) -> int | None:
        return self.v1_mV if self.action == "LOOP" else None


@dataclass
class Protocol:
    name: str = "protocol"
    steps: list[ProtocolStep] = field(default_factory=list)
    sample_rate_Hz: float = DEFAULT_RATE_HZ

    def channels(self) -> set:
        return {s.channel for s in self.steps if s.action != "LOOP"}

    def duration_s(self) -> float:
        """Total scheduled time, loops expanded."""
        return sum(s.duration_s * s.repeat for s in expand(self))


def _int(text, lineno, what):
    text = text.strip()
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"bad-int {what}={text!r}", lineno) from None


def _num(text, lineno, what):
    try:
        x = float(text)
    except ValueError:
        raise ParseError(f"bad-number {what}={text!r}", lineno) from None
    if not math.isfinite(x):
        raise ParseError(f"bad-number {what}={text!r}", lineno)
    return x


def _check_mv(mv, step):
    if not MV_MIN <= mv <= MV_MAX:
        raise ValidationError(step, f"{mv} mV outside drive range {MV_MIN}..{MV_MAX}")


def parse_protocol(csv_text: str, name: str | None = None, n_channels: int | None = None) -> Protocol:
    meta = {}
    steps = []
    header_seen = False
    for lineno, raw in enumerate(csv_text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = (s.strip() for s in body.split("=", 1))
                meta[k] = v
            continue
        if not header_seen:
            if line.replace(" ", "") != HEADER:
                raise ParseError("bad-header", lineno)
            header_seen = True
            continue
        cols = [c.strip() for c in line.split(",")]
        if len(cols) != 7:
            raise ParseError(f"expected 7 fields, got {len(cols)}", lineno)
        s_idx, s_ch, action, s_v1, s_v2, s_dur, s_rep = cols
        index = _int(s_idx, lineno, "step")
        action = action.upper()
        if action not in ACTIONS:
            raise ParseError(f"unknown action {action!r}", lineno)
        if index != len(steps):
            raise ValidationError(index, f"step indices must be dense from 0 (expected {len(steps)})")
        if s_ch.upper() == ALL or (action == "LOOP" and s_ch == ""):
            channel = ALL
        else:
            channel = _int(s_ch, lineno, "channel")
            if channel < 0:
                raise ValidationError(index, f"negative channel {channel}")
        v1 = _int(s_v1, lineno, "v1_mV") if s_v1 else None
        v2 = _int(s_v2, lineno, "v2_mV") if s_v2 else None
        duration = _num(s_dur, lineno, "duration_s") if s_dur else 0.0
        repeat = _int(s_rep, lineno, "repeat") if s_rep else 1
        if repeat < 1:
            raise ValidationError(index, "repeat must be >= 1")
        if action == "HOLD":
            if v1 is None:
                raise ValidationError(index, "HOLD needs v1_mV")
            _check_mv(v1, index)
            if not duration > 0:
                raise ValidationError(index, "HOLD needs duration_s > 0")
        elif action == "RAMP":
            if v1 is None or v2 is None:
                raise ValidationError(index, "RAMP needs v1_mV and v2_mV")
            _check_mv(v1, index)
            _check_mv(v2, index)
            if v1 == v2:
                raise ValidationError(index, "RAMP start equals end")
            if not duration > 0:
                raise ValidationError(index, "RAMP needs duration_s > 0")
        elif action == "OPEN":
            if duration < 0:
                raise ValidationError(index, "OPEN needs duration_s >= 0")
        else:
            if v1 is None:
                raise ValidationError(index, "LOOP needs a target step in v1_mV")
            if not 0 <= v1 < index:
                raise ValidationError(index, f"LOOP target {v1} must precede step {index}")
            duration = 0.0
        steps.append(ProtocolStep(index, channel, action, v1, v2, duration, repeat))
    if not header_seen:
        raise ParseError("bad-header", None)
    rate = DEFAULT_RATE_HZ
    if "sample_rate_Hz" in meta:
        try:
            rate = float(meta["sample_rate_Hz"])
        except ValueError:
            raise ParseError("bad-number sample_rate_Hz", None) from None
    proto = Protocol(name or meta.get("name", "protocol"), steps, rate)
    if n_channels is not None:
        validate_channels(proto, n_channels)
    return proto


def validate_channels(protocol: Protocol, n_channels: int):
    for s in protocol.steps:
        if s.action != "LOOP" and s.channel != ALL and not 0 <= s.channel < n_channels:
            raise ValidationError(s.index, f"channel {s.channel} outside 0..{n_channels - 1}")


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(int(x)) if x.is_integer() else repr(x)
    return str(x)


def protocol_to_csv(protocol: Protocol) -> str:
    lines = [f"# name={protocol.name}", f"# sample_rate_Hz={_fmt(float(protocol.sample_rate_Hz))}", HEADER]
    for s in protocol.steps:
        lines.append(",".join([str(s.index), str(s.channel), s.action, _fmt(s.v1_mV), _fmt(s.v2_mV),
                               _fmt(float(s.duration_s)), str(s.repeat)]))
    return "\n".join(lines) + "\n"


def make_cv(channel: int, v_lo_mV: int, v_hi_mV: int, rate_mV_per_s: float, cycles: int = 1,
            sample_rate_Hz: float = DEFAULT_RATE_HZ, name: str | None = None) -> Protocol:
    """Triangular sweep starting at ``v_lo_mV``: up, then back down, per cycle."""
    if not v_lo_mV < v_hi_mV:
        raise RangeError("v_lo_mV must be below v_hi_mV")
    if not (MV_MIN <= v_lo_mV and v_hi_mV <= MV_MAX):
        raise RangeError("sweep limits outside drive range")
    if not rate_mV_per_s > 0 or cycles < 1 or channel < 0:
        raise RangeError("rate must be > 0, cycles >= 1, channel >= 0")
    half = (v_hi_mV - v_lo_mV) / rate_mV_per_s
    steps = []
    for _ in range(cycles):
        steps.append(ProtocolStep(len(steps), channel, "RAMP", v_lo_mV, v_hi_mV, half, 1))
        steps.append(ProtocolStep(len(steps), channel, "RAMP", v_hi_mV, v_lo_mV, half, 1))
    rate_txt = f"{rate_mV_per_s:g}"
    return Protocol(name or f"cv_{rate_txt}", steps, sample_rate_Hz)


def make_electrode_cycle(channels, amp_mV: int, period_s: float, skip=(),
                         sample_rate_Hz: float = DEFAULT_RATE_HZ, name: str = "electrode_cycle") -> Protocol:
    """Square wave (+amp then -amp, half a period each) on one electrode at a
    time, in order; every other electrode stays open-circuit."""
    channels = list(channels)
    if not channels:
        raise RangeError("no electrodes given")
    if not period_s > 0:
        raise RangeError("period_s must be > 0")
    if not (0 < amp_mV and -amp_mV >= MV_MIN and amp_mV <= MV_MAX):
        raise RangeError(f"amplitude {amp_mV} mV outside drive range")
    active = [ch for ch in channels if ch not in set(skip)]
    if not active:
        raise ValidationError(0, "every electrode skipped; nothing to drive")
    steps = [ProtocolStep(0, ALL, "OPEN", None, None, 0.0, 1)]
    half = period_s / 2.0
    for ch in active:
        steps.append(ProtocolStep(len(steps), ch, "HOLD", amp_mV, None, half, 1))
        steps.append(ProtocolStep(len(steps), ch, "HOLD", -amp_mV, None, half, 1))
        steps.append(ProtocolStep(len(steps), ch, "OPEN", None, None, 0.0, 1))
    return Protocol(name, steps, sample_rate_Hz)


def expand(protocol: Protocol):
    """Yield steps in execution order with loops unrolled lazily."""
    steps = protocol.steps
    passes = {}
    pc = 0
    while pc < len(steps):
        s = steps[pc]
        if s.action == "LOOP":
            done = passes.get(pc, 1)
            if done < s.repeat:
                passes[pc] = done + 1
                pc = s.v1_mV
            else:
                passes.pop(pc, None)
                pc += 1
            continue
        yield s
        pc += 1


class ProtocolRunner:
    """Drives a device through a protocol one tick at a time.

    ``tick()`` applies the next setpoints and advances the device by one
    sample period; ``active`` turns False once the schedule is exhausted.
    """

    def __init__(self, device: Device, protocol: Protocol, sample_rate_Hz: float | None = None):
        rate = sample_rate_Hz or protocol.sample_rate_Hz
        if not 0 < rate <= device.params.max_sample_rate_Hz:
            raise RangeError(f"sample rate {rate} Hz outside (0, 860]")
        validate_channels(protocol, device.n_channels)
        self.device = device
        self.protocol = protocol
        self.rate = rate
        self.dt = 1.0 / rate
        self.step: ProtocolStep | None = None
        self._gen = self._schedule()
        self.active = True
        self._advance_schedule()

    def _targets(self, step):
        return range(self.device.n_channels) if step.channel == ALL else (step.channel,)

    def _schedule(self):
        dev = self.device
        p = dev.params
        for step in expand(self.protocol):
            self.step = step
            chans = self._targets(step)
            dev._log_command(f"STEP {step.index} {step.action} ch={step.channel}"
                             + (f" v1={step.v1_mV}" if step.v1_mV is not None else "")
                             + (f" v2={step.v2_mV}" if step.v2_mV is not None else ""))
            n = max(0, round(step.duration_s * self.rate))
            if step.action == "OPEN":
                for ch in chans:
                    dev.set_switch(ch, False, log=False)
                for _ in range(n * step.repeat):
                    yield
            elif step.action == "HOLD":
                for ch in chans:
                    dev.set_voltage(ch, step.v1_mV, log=False)
                    dev.set_switch(ch, True, log=False)
                for _ in range(max(1, n) * step.repeat):
                    yield
            else:
                n = max(1, n)
                span = step.v2_mV - step.v1_mV
                for ch in chans:
                    dev.set_switch(ch, True, log=False)
                idx = list(chans)
                for _ in range(step.repeat):
                    for k in range(n):
                        dev.set_codes(idx, sc.code_for_mV(step.v1_mV + span * k / n, p))
                        yield

    def _advance_schedule(self):
        try:
            next(self._gen)
        except StopIteration:
            self.active = False

    def tick(self):
        """One sample period under the current setpoints; None when finished."""
        if not self.active:
            return None
        batch = self.device.tick(self.dt)
        self._advance_schedule()
        return batch


def run_protocol(device: Device, protocol: Protocol, log_path, sample_rate_Hz: float | None = None,
                 abort: threading.Event | None = None, pacer: Pacer | None = None,
                 on_tick=None, wallclock: str | None = None):
    """Execute ``protocol`` to completion, logging every sample to ``log_path``.

    Setting ``abort`` (or Ctrl-C) stops at the next tick with AbortError;
    the log is flushed and switches are opened either way.
    """
    if device.busy:
        raise BusyError("a protocol is already running")
    runner = ProtocolRunner(device, protocol, sample_rate_Hz)
    pacer = pacer or Pacer(device.config.time_mode, device.config.accel_factor)
    device.open_log(log_path, wallclock, {"protocol": protocol.name,
                                          "sample_rate_Hz": f"{runner.rate:g}"})
    device.busy = True
    t0 = device.t
    pacer.start(0.0)
    aborted = False
    try:
        while runner.active:
            if abort is not None and abort.is_set():
                aborted = True
                raise AbortError("protocol aborted")
            batch = runner.tick()
            if batch is None:
                break
            if on_tick is not None:
                on_tick(device, batch)
            pacer.wait(device.t - t0, abort)
    except KeyboardInterrupt:
        aborted = True
        raise AbortError("protocol aborted by user") from None
    finally:
        device.open_all(log=False)
        device._log_command("ABORT" if aborted else "END")
        device.busy = False
        device.close_log()
    return log_path
