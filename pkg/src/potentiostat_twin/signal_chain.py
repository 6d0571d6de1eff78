"""One channel's analog path: DAC -> level shifter -> switch -> shunt ammeter
-> level shift + RC filter -> ADC.

Every function accepts scalars or numpy arrays (one element per channel) so
the device can push a whole bank through the same code in one call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np


@dataclass(frozen=True)
class SignalChainParams:
    dac_bits: int = 12
    dac_fullscale_V: float = 3.3
    shift_gain: float = 2.42
    shift_offset_V: float = -4.0
    shunt_ohm: float = 10_000.0
    amp_gain: float = 100.0
    adc_lsb_V: float = 125e-6
    adc_range_V: float = 3.3
    input_shift_V: float = 1.65
    lpf_cutoff_Hz: float = 72.0
    switch_leak_A: float = 10e-12
    noise_sigma_A: float = 0.8e-9
    # output-stage noise seen by the load; not a datasheet figure
    drive_noise_sigma_V: float = 100e-6
    max_sample_rate_Hz: float = 860.0
    # advertised safe drive rating, distinct from the +-1650 nA input window
    rated_current_A: float = 1.5e-6

    @property
    def dac_codes(self) -> int:
        return 1 << self.dac_bits

    @property
    def dac_step_V(self) -> float:
        return self.dac_fullscale_V / self.dac_codes

    @property
    def output_lsb_V(self) -> float:
        return self.dac_step_V * self.shift_gain

    @property
    def transimpedance(self) -> float:
        """Volts at the amplifier output per amp of channel current."""
        return self.shunt_ohm * self.amp_gain

    @property
    def adc_lsb_A(self) -> float:
        return self.adc_lsb_V / self.transimpedance

    @property
    def current_range_A(self) -> float:
        return self.input_shift_V / self.transimpedance

    @property
    def drive_min_V(self) -> float:
        return self.shift_offset_V

    @property
    def drive_max_V(self) -> float:
        return self.shift_gain * (self.dac_codes - 1) * self.dac_step_V + self.shift_offset_V

    def filter_alpha(self, dt: float) -> float:
        return 1.0 - math.exp(-2.0 * math.pi * self.lpf_cutoff_Hz * dt)


DEFAULT_PARAMS = SignalChainParams()


def _out(x):
    # numpy scalars back to Python numbers for scalar callers
    return x.item() if isinstance(x, np.ndarray) and x.ndim == 0 else x


def dac_quantize(v_request, p: SignalChainParams = DEFAULT_PARAMS):
    """Saturating DAC: returns ``(code, v_dac)``."""
    v = np.clip(np.asarray(v_request, dtype=float), 0.0, p.dac_fullscale_V)
    code = np.clip(np.floor(v / p.dac_step_V + 0.5), 0, p.dac_codes - 1).astype(np.int64)
    return _out(code), _out(code * p.dac_step_V)


def dac_voltage(code, p: SignalChainParams = DEFAULT_PARAMS):
    return _out(np.asarray(code) * p.dac_step_V)


def level_shift(v_dac, p: SignalChainParams = DEFAULT_PARAMS):
    return _out(p.shift_gain * np.asarray(v_dac, dtype=float) + p.shift_offset_V)


def level_shift_inverse(v_out, p: SignalChainParams = DEFAULT_PARAMS):
    return _out((np.asarray(v_out, dtype=float) - p.shift_offset_V) / p.shift_gain)


def code_for_mV(mv, p: SignalChainParams = DEFAULT_PARAMS):
    """DAC code whose shifted output is nearest to ``mv`` millivolts."""
    code, _ = dac_quantize(level_shift_inverse(np.asarray(mv, dtype=float) / 1000.0, p), p)
    return code


def drive_voltage(code, p: SignalChainParams = DEFAULT_PARAMS):
    """Level-shifter output for a DAC code."""
    return level_shift(dac_voltage(code, p), p)


def readback_mV(code, p: SignalChainParams = DEFAULT_PARAMS):
    return _out(np.floor(np.asarray(drive_voltage(code, p)) * 1000.0 + 0.5).astype(np.int64))


def switch_current(closed, i_cell, p: SignalChainParams = DEFAULT_PARAMS):
    """Closed switch passes the cell current; open switch leaks at most 10 pA."""
    i = np.asarray(i_cell, dtype=float)
    leak = np.clip(i, -p.switch_leak_A, p.switch_leak_A)
    return _out(np.where(closed, i, leak))


def sense_current(i_channel, p: SignalChainParams = DEFAULT_PARAMS):
    rail = p.input_shift_V
    return _out(np.clip(np.asarray(i_channel, dtype=float) * p.transimpedance, -rail, rail))


@dataclass(frozen=True)
class FilterState:
    y_prev: object = 0.0
    initialized: object = False

    @classmethod
    def bank(cls, n: int) -> "FilterState":
        return cls(np.zeros(n), np.zeros(n, dtype=bool))


def shift_and_filter(v_amp, state: FilterState, dt: float, noise_sample=0.0,
                     p: SignalChainParams = DEFAULT_PARAMS):
    """Shift to the ADC window and run the single-pole RC low-pass.

    The first call presets the filter to its input.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    u = np.asarray(v_amp, dtype=float) + p.input_shift_V + noise_sample
    alpha = p.filter_alpha(dt)
    y_prev = np.asarray(state.y_prev, dtype=float)
    y = np.where(state.initialized, y_prev + alpha * (u - y_prev), u)
    init = np.ones_like(np.asarray(state.initialized), dtype=bool)
    return _out(y), FilterState(_out(y), _out(init))


def adc_counts(v_adc_in, p: SignalChainParams = DEFAULT_PARAMS):
    """Signed ADC count relative to mid-rail, one count per 0.125 nA."""
    v = np.clip(np.asarray(v_adc_in, dtype=float), 0.0, p.adc_range_V)
    return _out(np.floor((v - p.input_shift_V) / p.adc_lsb_V + 0.5).astype(np.int64))


def adc_read(v_adc_in, p: SignalChainParams = DEFAULT_PARAMS):
    """ADC reading in nA, always an exact multiple of the LSB current."""
    return _out(np.asarray(adc_counts(v_adc_in, p)) * (p.adc_lsb_A * 1e9))


LSB_PA = 125


class Sample(NamedTuple):
    t: float
    channel: int
    set_mV: int
    switch: int
    current_pA: int


@dataclass
class ChannelState:
    index: int
    set_mV: int = 0
    code: int = 0
    switch_closed: bool = False
    baseline_lsb: int = 0
    filter: FilterState = field(default_factory=FilterState)
    # injected amplifier offset (A) and output-stage offset error (V)
    offset_A: float = 0.0
    drive_offset_V: float = 0.0
    last_lsb: int = 0

    @property
    def baseline_nA(self) -> float:
        return self.baseline_lsb * LSB_PA / 1000.0

    def readback_mV(self, p: SignalChainParams = DEFAULT_PARAMS) -> int:
        return readback_mV(self.code, p)


def chain_step(params: SignalChainParams, channel: ChannelState, cell, dt: float,
               rng=None, t: float = 0.0):
    """Advance one channel by ``dt``; returns ``(Sample, channel', cell')``.

    ``rng`` is a numpy Generator; ``None`` selects the ideal (noise-free) chain.
    The cell argument is cloned, never mutated.
    """
    cell = cell.copy()
    v_drive = drive_voltage(channel.code, params) - channel.drive_offset_V
    if rng is not None:
        v_drive += rng.normal(0.0, params.drive_noise_sigma_V)
    if channel.switch_closed:
        i_cell = cell.step(v_drive, dt)
    else:
        cell.step(None, dt)
        i_cell = cell.dc_current(v_drive)
    i_ch = switch_current(channel.switch_closed, i_cell, params)
    v_amp = sense_current(i_ch + channel.offset_A, params)
    noise = rng.normal(0.0, params.noise_sigma_A * params.transimpedance) if rng is not None else 0.0
    v_adc, filt = shift_and_filter(v_amp, channel.filter, dt, noise, params)
    lsb = adc_counts(v_adc, params)
    sample = Sample(t, channel.index, channel.readback_mV(params), int(channel.switch_closed),
                    (lsb - channel.baseline_lsb) * LSB_PA)
    return sample, replace(channel, filter=filt, last_lsb=lsb), cell
