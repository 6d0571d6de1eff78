"""The virtual instrument: boards of eight channels sharing one tick clock."""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import signal_chain as sc
from .cells import cell_from_spec
from .errors import BusyError, ConfigError, RangeError
from .signal_chain import LSB_PA, ChannelState, FilterState, Sample, SignalChainParams

FIRMWARE_VERSION = "potentiostat-twin 0.1.0"
CHANNELS_PER_BOARD = 8
MAX_BOARDS = 8
LOG_HEADER = "t_s,channel,set_mV,switch,current_pA"
MV_MIN, MV_MAX = -4000, 3984


@dataclass
class DeviceConfig:
    n_boards: int = 1
    sample_rate_Hz: float = 15.0
    mode: str = "ideal"  # ideal | noisy
    time_mode: str = "accelerated"  # accelerated | realtime
    accel_factor: float = 0.0  # 0 runs unpaced
    seed: int = 0
    noise_sigma_A: float = 0.8e-9
    drive_noise_sigma_V: float = 100e-6
    cell: dict = field(default_factory=lambda: {"type": "none"})
    # per-channel overrides: {"cell": {...}, "offset_nA": x, "drive_offset_mV": y}
    channels: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.n_boards, int) or not 1 <= self.n_boards <= MAX_BOARDS:
            raise ConfigError(f"n_boards must be 1..{MAX_BOARDS}, got {self.n_boards!r}")
        if not 0 < self.sample_rate_Hz <= SignalChainParams.max_sample_rate_Hz:
            raise ConfigError(f"sample_rate_Hz must be in (0, 860], got {self.sample_rate_Hz}")
        if self.mode not in ("ideal", "noisy"):
            raise ConfigError(f"mode must be ideal or noisy, got {self.mode!r}")
        if self.time_mode not in ("accelerated", "realtime"):
            raise ConfigError(f"time_mode must be accelerated or realtime, got {self.time_mode!r}")
        if self.accel_factor < 0:
            raise ConfigError("accel_factor must be >= 0")
        if self.noise_sigma_A < 0 or self.drive_noise_sigma_V < 0:
            raise ConfigError("noise sigmas must be >= 0")
        for ch in self.channels:
            if not 0 <= ch < self.n_channels:
                raise ConfigError(f"channel {ch} outside 0..{self.n_channels - 1}")

    @property
    def n_channels(self) -> int:
        return CHANNELS_PER_BOARD * self.n_boards

    @property
    def params(self) -> SignalChainParams:
        return SignalChainParams(noise_sigma_A=self.noise_sigma_A,
                                 drive_noise_sigma_V=self.drive_noise_sigma_V)

    def describe(self) -> str:
        """Single-line JSON of everything that shapes the sample stream."""
        d = {
            "n_boards": self.n_boards, "sample_rate_Hz": self.sample_rate_Hz,
            "mode": self.mode, "noise_sigma_A": self.noise_sigma_A,
            "drive_noise_sigma_V": self.drive_noise_sigma_V, "cell": self.cell,
            "channels": {str(k): v for k, v in sorted(self.channels.items())},
        }
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_description(cls, text: str, **overrides) -> "DeviceConfig":
        """Inverse of ``describe()`` (the seed and pacing come from ``overrides``)."""
        d = json.loads(text)
        d["channels"] = {int(k): v for k, v in d.get("channels", {}).items()}
        d.update(overrides)
        return cls(**d)


class SampleBatch(NamedTuple):
    t: float
    set_mV: np.ndarray
    switch: np.ndarray
    current_pA: np.ndarray

    def samples(self) -> list[Sample]:
        t = self.t
        return [Sample(t, k, mv, sw, pa) for k, (mv, sw, pa) in
                enumerate(zip(self.set_mV.tolist(), self.switch.tolist(), self.current_pA.tolist()))]


class SampleLog:
    """CSV run log: ``#`` metadata lines, the column header, then one row per
    sample. Commands are recorded in time order as ``# cmd,<t_s>,<text>``.
    """

    def __init__(self, path, meta: dict | None = None):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8", newline="\n")
        self._rows = []
        self.last_t = 0.0
        self.n_samples = 0
        self._fh.write("# potentiostat-twin run log\n")
        for key, value in (meta or {}).items():
            self._fh.write(f"# {key}={value}\n")
        self._fh.write(LOG_HEADER + "\n")

    def command(self, t: float, text: str):
        self._rows.append(f"# cmd,{t:.6f},{text}\n")

    def batch(self, b: SampleBatch):
        ts = f"{b.t:.6f}"
        rows = self._rows
        for k, (mv, sw, pa) in enumerate(zip(b.set_mV.tolist(), b.switch.tolist(),
                                             b.current_pA.tolist())):
            rows.append(f"{ts},{k},{mv},{sw},{pa}\n")
        self.n_samples += len(b.set_mV)
        self.last_t = b.t
        if len(rows) > 8192:
            self.flush()

    def flush(self):
        if self._rows:
            self._fh.write("".join(self._rows))
            self._rows = []
        self._fh.flush()

    def close(self):
        if not self._fh.closed:
            self.flush()
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


CAL_SAMPLES = 2048


class Pacer:
    """Maps simulated time onto the wall clock (or not at all)."""

    def __init__(self, time_mode="accelerated", accel_factor=0.0):
        self.time_mode = time_mode
        self.factor = 1.0 if time_mode == "realtime" else accel_factor
        self._start = None

    def start(self, t_sim=0.0):
        self._start = time.monotonic() - (t_sim / self.factor if self.factor else 0.0)

    def deadline(self, t_sim: float) -> float:
        """Monotonic wall time at which ``t_sim`` is due."""
        if not self.factor:
            return time.monotonic()
        if self._start is None:
            self.start(t_sim)
        return self._start + t_sim / self.factor

    def wait(self, t_sim: float, stop: threading.Event | None = None):
        if not self.factor:
            return
        delay = self.deadline(t_sim) - time.monotonic()
        if delay > 0:
            if stop is not None:
                stop.wait(delay)
            else:
                time.sleep(delay)


class Device:
    """Multi-channel potentiostat twin.

    One writer advances the device; every public mutator validates its
    arguments and raises ``RangeError`` before touching any state.
    """

    def __init__(self, config: DeviceConfig | None = None):
        self.config = config or DeviceConfig()
        cfg = self.config
        self.params = cfg.params
        self.noisy = cfg.mode == "noisy"
        self.rng = np.random.default_rng(cfg.seed)
        n = self.n_channels = cfg.n_channels
        self.dt = 1.0 / cfg.sample_rate_Hz
        self._request_mV = np.zeros(n, dtype=np.int64)
        self._code = np.full(n, sc.code_for_mV(0, self.params), dtype=np.int64)
        self._closed = np.zeros(n, dtype=bool)
        self._baseline = np.zeros(n, dtype=np.int64)
        self._offset_A = np.zeros(n)
        self._drive_offset_V = np.zeros(n)
        self._filter = FilterState.bank(n)
        self._last_lsb = np.zeros(n, dtype=np.int64)
        self._last_pA = np.zeros(n, dtype=np.int64)
        self._last_drive = np.zeros(n)
        self.cells = []
        try:
            for ch in range(n):
                over = cfg.channels.get(ch, {})
                self.cells.append(cell_from_spec(over.get("cell", cfg.cell)))
                self._offset_A[ch] = over.get("offset_nA", 0.0) * 1e-9
                self._drive_offset_V[ch] = over.get("drive_offset_mV", 0.0) * 1e-3
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        self._update_drive()
        self.t = 0.0
        self.n_ticks = 0
        self.busy = False
        self.log: SampleLog | None = None
        self.calibrated = False

    # --- commands -----------------------------------------------------

    def _check_channel(self, ch):
        if isinstance(ch, bool) or not isinstance(ch, (int, np.integer)) or not 0 <= ch < self.n_channels:
            raise RangeError(f"channel {ch!r} outside 0..{self.n_channels - 1}")
        return int(ch)

    def _log_command(self, text):
        if self.log is not None:
            self.log.command(self.t, text)

    def _update_drive(self):
        self._drive_V = sc.drive_voltage(self._code, self.params) - self._drive_offset_V

    def set_voltage(self, ch: int, mv: int, log: bool = True) -> int:
        """Quantize and apply a drive request; returns the readback in mV."""
        ch = self._check_channel(ch)
        if isinstance(mv, bool) or not isinstance(mv, (int, np.integer)) or not MV_MIN <= mv <= MV_MAX:
            raise RangeError(f"set voltage {mv!r} mV outside {MV_MIN}..{MV_MAX}")
        self._request_mV[ch] = mv
        self._code[ch] = sc.code_for_mV(int(mv), self.params)
        self._drive_V[ch] = sc.drive_voltage(int(self._code[ch]), self.params) - self._drive_offset_V[ch]
        if log:
            self._log_command(f"SET {ch} {mv}")
        return self.get_voltage(ch)

    def set_code(self, ch: int, code: int):
        """Write a raw DAC code (used by ramps); not logged as a command."""
        self._code[ch] = code
        self._drive_V[ch] = sc.drive_voltage(int(code), self.params) - self._drive_offset_V[ch]

    def set_codes(self, channels, code: int):
        """Write one raw DAC code to several channels at once (ramp fast path)."""
        idx = np.asarray(channels, dtype=np.intp)
        self._code[idx] = code
        self._drive_V[idx] = sc.drive_voltage(int(code), self.params) - self._drive_offset_V[idx]

    def get_voltage(self, ch: int) -> int:
        ch = self._check_channel(ch)
        return sc.readback_mV(int(self._code[ch]), self.params)

    def set_switch(self, ch: int, closed: bool, log: bool = True):
        ch = self._check_channel(ch)
        self._closed[ch] = bool(closed)
        if log:
            self._log_command(f"SW {ch} {int(bool(closed))}")

    def open_all(self, log: bool = True):
        self._closed[:] = False
        if log:
            self._log_command("OPEN ALL")

    def switch_closed(self, ch: int) -> bool:
        return bool(self._closed[self._check_channel(ch)])

    def read_current(self, ch: int) -> int:
        """Most recent baseline-corrected reading in pA."""
        return int(self._last_pA[self._check_channel(ch)])

    def inject_offset(self, ch: int, offset_nA: float):
        """Amplifier input offset, the error source that calibration nulls."""
        self._offset_A[self._check_channel(ch)] = offset_nA * 1e-9

    def set_drive_offset(self, ch: int, offset_mV: float):
        """Output-stage error: the load sees the set voltage minus this."""
        ch = self._check_channel(ch)
        self._drive_offset_V[ch] = offset_mV * 1e-3
        self._drive_V[ch] = sc.drive_voltage(int(self._code[ch]), self.params) - self._drive_offset_V[ch]

    @property
    def baselines_nA(self) -> list[float]:
        return [b * LSB_PA / 1000.0 for b in self._baseline.tolist()]

    def channel(self, ch: int) -> ChannelState:
        ch = self._check_channel(ch)
        return ChannelState(
            index=ch, set_mV=int(self._request_mV[ch]), code=int(self._code[ch]),
            switch_closed=bool(self._closed[ch]), baseline_lsb=int(self._baseline[ch]),
            filter=FilterState(float(self._filter.y_prev[ch]), bool(self._filter.initialized[ch])),
            offset_A=float(self._offset_A[ch]), drive_offset_V=float(self._drive_offset_V[ch]),
            last_lsb=int(self._last_lsb[ch]),
        )

    def drive_output(self) -> np.ndarray:
        """Voltages presented to the loads during the last tick."""
        return self._last_drive.copy()

    # --- sampling -----------------------------------------------------

    def _advance(self, dt: float) -> np.ndarray:
        """Move every channel through one sample period; returns raw ADC counts."""
        p = self.params
        n = self.n_channels
        v = self._drive_V
        if self.noisy:
            v = v + self.rng.normal(0.0, p.drive_noise_sigma_V, n)
        self._last_drive = v
        closed = self._closed
        i_cell = np.zeros(n)
        vs = v.tolist()
        for k, cell in enumerate(self.cells):
            if closed[k]:
                i_cell[k] = cell.step(vs[k], dt)
            else:
                cell.step(None, dt)
                i_cell[k] = cell.dc_current(vs[k])
        i_ch = sc.switch_current(closed, i_cell, p)
        v_amp = sc.sense_current(i_ch + self._offset_A, p)
        noise = self.rng.normal(0.0, p.noise_sigma_A * p.transimpedance, n) if self.noisy else 0.0
        y, self._filter = sc.shift_and_filter(v_amp, self._filter, dt, noise, p)
        lsb = sc.adc_counts(y, p)
        self._last_lsb = lsb
        self.t = round(self.t + dt, 12)
        self.n_ticks += 1
        return lsb

    def tick(self, dt: float | None = None) -> SampleBatch:
        dt = self.dt if dt is None else dt
        if not dt > 0:
            raise ValueError("dt must be positive")
        lsb = self._advance(dt)
        self._last_pA = (lsb - self._baseline) * LSB_PA
        b = SampleBatch(self.t, sc.readback_mV(self._code, self.params),
                        self._closed.astype(np.int64), self._last_pA)
        if self.log is not None:
            self.log.batch(b)
        return b

    def sample_all(self, dt: float | None = None) -> list[Sample]:
        return self.tick(dt).samples()

    def calibrate(self, n_samples: int = CAL_SAMPLES) -> list[float]:
        """Open every switch, average ``n_samples`` no-load readings per
        channel, store them as baselines. Switches are left open.

        With 0.8 nA of read noise the baseline's standard error is
        0.8/sqrt(n) nA; 2048 samples keep every channel of a full
        64-channel stack within one ADC LSB of its true offset.

        Readings from the first ~12 filter time constants are discarded so
        the tail of a previously flowing current does not leak into the
        baseline (a full-scale tail decays below half an LSB by then).
        """
        if self.busy:
            raise BusyError("protocol running")
        if n_samples < 1:
            raise RangeError("n_samples must be >= 1")
        self._closed[:] = False
        tau = 1.0 / (2.0 * math.pi * self.params.lpf_cutoff_Hz)
        for _ in range(math.ceil(12.0 * tau / self.dt)):
            self._advance(self.dt)
        acc = np.zeros(self.n_channels, dtype=np.int64)
        for _ in range(n_samples):
            acc += self._advance(self.dt)
        self._baseline = np.floor(acc / n_samples + 0.5).astype(np.int64)
        self._last_pA = (self._last_lsb - self._baseline) * LSB_PA
        self.calibrated = True
        self._log_command("CAL baselines_nA=" + ";".join(f"{b:g}" for b in self.baselines_nA))
        return self.baselines_nA

    # --- logging ------------------------------------------------------

    def open_log(self, path, wallclock: str | None = None, extra: dict | None = None) -> SampleLog:
        meta = {
            "firmware": FIRMWARE_VERSION,
            "start_wallclock": wallclock or "unset",
            "seed": self.config.seed,
            "config": self.config.describe(),
            "baselines_nA": ";".join(f"{b:g}" for b in self.baselines_nA),
            "t0_s": f"{self.t:.6f}",
        }
        meta.update(extra or {})
        self.log = SampleLog(path, meta)
        return self.log

    def close_log(self):
        if self.log is not None:
            self.log.close()
            self.log = None


def create_device(config: DeviceConfig | None = None) -> Device:
    return Device(config)


def info(device: Device) -> dict:
    p = device.params
    return {
        "fw": FIRMWARE_VERSION.replace(" ", "/"),
        "boards": device.config.n_boards,
        "channels": device.n_channels,
        "rate_mHz": int(round(device.config.sample_rate_Hz * 1000)),
        "mode": device.config.mode,
        "drive_min_mV": MV_MIN,
        "drive_max_mV": MV_MAX,
        "range_pA": int(round(p.current_range_A * 1e12)),
        "rating_pA": int(round(p.rated_current_A * 1e12)),
        "lsb_pA": LSB_PA,
        # two 4-input ADCs per board at 860 SPS each
        "adc_per_channel_mHz": int(round(2 * p.max_sample_rate_Hz / CHANNELS_PER_BOARD * 1000)),
        "calibrated": int(device.calibrated),
    }


__all__ = [
    "Device", "DeviceConfig", "SampleBatch", "SampleLog", "Pacer", "Sample", "ChannelState",
    "create_device", "info", "FIRMWARE_VERSION", "LOG_HEADER", "MV_MIN", "MV_MAX",
]

