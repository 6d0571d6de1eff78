"""Desk-scale versions of the instrument's validation experiments.

Each function builds its own twin from a DeviceConfig, writes plain CSV
files into ``out`` and returns a small dict of headline numbers plus the
list of files written.
"""

from __future__ import annotations

import csv
import dataclasses
from pathlib import Path

import numpy as np

from . import analysis
from .cells import IonPump
from .config import resolve_protocol
from .device import Device, DeviceConfig
from .protocol import make_cv, make_electrode_cycle, parse_protocol, run_protocol

# full scales used for the "% of full scale" figures
OUTPUT_FS_V = 4.0
INPUT_FS_nA = 1650.0


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _settle(dev: Device, n: int):
    for _ in range(n):
        dev.tick()


# --- characterization -------------------------------------------------------

def characterize(config: DeviceConfig, out, load_ohm: float | None = None,
                 settle_ticks: int = 30, dac_stride: int = 1) -> dict:
    """Output linearity vs DAC code, input transfer, and a resistive load fit.

    Runs at the instrument's maximum sample rate so the 72 Hz front end
    settles quickly; all channels are exercised together.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if load_ohm is None:
        load_ohm = float(config.cell.get("R_ohm", 1e6)) if config.cell.get("type") == "resistor" else 1e6
    base = dataclasses.replace(config, sample_rate_Hz=860.0, channels={})
    files = []

    # (a) output stage: drive every code, read back the actual output voltage
    dev = Device(dataclasses.replace(base, cell={"type": "none"}))
    codes = np.arange(0, dev.params.dac_codes, dac_stride)
    rows, xs, ys = [], [], []
    for code in codes:
        for ch in range(dev.n_channels):
            dev.set_code(ch, int(code))
        dev.tick()
        vout = dev.drive_output()
        for ch in range(dev.n_channels):
            rows.append([int(code), ch, float(vout[ch])])
            xs.append(code)
            ys.append(vout[ch])
    slope, icpt, resid = analysis.linear_fit(xs, ys)
    out_err = analysis.full_scale_error(resid, OUTPUT_FS_V)
    files.append(_write_csv(out / "char_output.csv", ["dac_code", "channel", "v_out_V", "residual_V"],
                            [r + [float(e)] for r, e in zip(rows, resid)]))

    # (b) input stage: known currents in, counts out
    dev = Device(dataclasses.replace(base, cell={"type": "none"}))
    dev.calibrate()
    currents = np.linspace(-1500.0, 1500.0, 61)
    rows, xs, ys = [], [], []
    for i_nA in currents:
        for ch in range(dev.n_channels):
            dev.inject_offset(ch, float(i_nA))
        _settle(dev, settle_ticks)
        for ch in range(dev.n_channels):
            got = dev.read_current(ch) / 1000.0
            rows.append([float(i_nA), ch, got])
            xs.append(i_nA)
            ys.append(got)
    in_slope, in_icpt, in_resid = analysis.linear_fit(xs, ys)
    in_err = analysis.full_scale_error(in_resid, INPUT_FS_nA)
    files.append(_write_csv(out / "char_input.csv", ["i_in_nA", "channel", "i_read_nA", "residual_nA"],
                            [r + [float(e)] for r, e in zip(rows, in_resid)]))

    # (c) resistive load swept -1.65 .. +1.65 V on every channel at once
    dev = Device(dataclasses.replace(base, cell={"type": "resistor", "R_ohm": load_ohm}))
    dev.calibrate()
    for ch in range(dev.n_channels):
        dev.set_switch(ch, True, log=False)
    rows, xs, ys = [], [], []
    for mv in range(-1650, 1651, 50):
        for ch in range(dev.n_channels):
            dev.set_voltage(ch, mv, log=False)
        _settle(dev, settle_ticks)
        for ch in range(dev.n_channels):
            v = dev.get_voltage(ch)
            i = dev.read_current(ch) / 1000.0
            rows.append([mv, ch, v, i])
            xs.append(v)
            ys.append(i)
    g, _, _ = analysis.linear_fit(xs, ys)  # nA/mV is uS, so R = 1e6 / g ohm
    r_fit = 1e6 / g
    files.append(_write_csv(out / "char_load.csv", ["set_mV", "channel", "readback_mV", "i_nA"], rows))

    summary = {
        "output_slope_mV_per_code": slope * 1000.0,
        "output_intercept_V": icpt,
        "output_error_pct_fs": 100.0 * out_err,
        "input_gain": in_slope,
        "input_offset_nA": in_icpt,
        "input_error_pct_fs": 100.0 * in_err,
        "load_configured_ohm": load_ohm,
        "load_fitted_ohm": r_fit,
    }
    files.append(_write_csv(out / "char_summary.csv", ["metric", "value"],
                            [[k, repr(float(v))] for k, v in summary.items()]))
    return {**summary, "files": [str(f) for f in files]}


# --- cyclic voltammetry -----------------------------------------------------

def cv(config: DeviceConfig, out, rate_mV_s: float = 100.0, offset_mV: float = 0.0,
       channel: int = 0, v_lo_mV: int = -900, v_hi_mV: int = 500, cycles: int = 1) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dev = Device(config)
    dev.calibrate()
    if offset_mV:
        dev.set_drive_offset(channel, offset_mV)
    proto = make_cv(channel, v_lo_mV, v_hi_mV, rate_mV_s, cycles, config.sample_rate_Hz)
    stem = f"cv_{rate_mV_s:g}"
    log_path = out / f"{stem}_log.csv"
    run_protocol(dev, proto, log_path)
    log = analysis.read_log(log_path).for_channel(channel)
    peaks = analysis.detect_peaks(log.set_mV, log.current_pA)
    files = [log_path]
    files.append(_write_csv(out / f"{stem}_iv.csv", ["t_s", "v_mV", "i_nA"],
                            [[f"{t:.6f}", int(v), i / 1000.0] for t, v, i in
                             zip(log.t, log.set_mV, log.current_pA)]))
    files.append(_write_csv(out / f"{stem}_peaks.csv", ["v_V", "i_nA", "kind", "scan"],
                            [[f"{p.v_V:.4f}", f"{p.i_A * 1e9:.3f}", p.kind, p.scan] for p in peaks]))
    return {"rate_mV_s": rate_mV_s, "offset_mV": offset_mV, "duration_s": proto.duration_s(),
            "peaks": peaks, "files": [str(f) for f in files]}


# --- ion pump electrode cycle ------------------------------------------------

def ionpump(config: DeviceConfig, out, electrodes=range(9), skip=(3, 5), amp_mV: int = 1400,
            period_s: float = 30.0) -> dict:
    """One square-wave period per electrode in turn; all others open.

    ``skip`` holds 0-based channel indices (3 and 5 are electrodes 4 and 6).
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    electrodes = list(electrodes)
    dev = Device(config)
    for ch in electrodes:
        if not isinstance(dev.cells[ch], IonPump):
            raise ValueError(f"channel {ch} has no ion-pump load; use an ion-pump config")
    dev.calibrate()
    proto = make_electrode_cycle(electrodes, amp_mV, period_s, skip, config.sample_rate_Hz)
    fluor = [[dev.cells[ch].fluorescence() for ch in electrodes]]

    def record(d, _batch):
        fluor.append([d.cells[ch].fluorescence() for ch in electrodes])

    log_path = out / "ionpump_log.csv"
    run_protocol(dev, proto, log_path, on_tick=record)
    log = analysis.read_log(log_path)
    F = np.asarray(fluor)  # row 0 = before first tick, row k = after tick k
    t_axis = np.unique(log.t)

    files = [log_path]
    files.append(_write_csv(out / "ionpump_fluorescence.csv",
                            ["t_s"] + [f"f{ch}" for ch in electrodes],
                            [[f"{t:.6f}"] + [f"{x:.9f}" for x in row] for t, row in zip(t_axis, F[1:])]))

    phases = ionpump_phases(log, F, electrodes)
    files.append(_write_csv(out / "ionpump_phases.csv",
                            ["electrode", "channel", "half", "t_start_s", "t_end_s", "n_samples",
                             "mean_current_nA", "delta_fluorescence"],
                            [[p["channel"] + 1, p["channel"], p["half"], f"{p['t_start']:.6f}",
                              f"{p['t_end']:.6f}", p["n"], f"{p['mean_nA']:.4f}", f"{p['dF']:.9f}"]
                             for p in phases]))
    rho = analysis.spearman([p["mean_nA"] for p in phases], [p["dF"] for p in phases])
    active = sorted({p["channel"] for p in phases})
    return {"active_channels": active, "phases": phases, "spearman": rho,
            "files": [str(f) for f in files]}


def ionpump_phases(log: analysis.RunLog, F: np.ndarray, electrodes) -> list[dict]:
    """Half-phases (contiguous closed-switch runs at one drive sign) per channel.

    ``F[k]`` is the fluorescence after tick ``k`` (row 0 before the run).
    """
    t_axis = np.unique(log.t)
    out = []
    for col, ch in enumerate(electrodes):
        sub = log.for_channel(ch)
        closed = sub.switch.astype(bool)
        sign = np.sign(sub.set_mV) * closed
        edges = np.flatnonzero(np.diff(np.concatenate([[0], sign, [0]])))
        for a, b in zip(edges[:-1], edges[1:]):
            if sign[a] == 0:
                continue
            k0 = int(np.searchsorted(t_axis, sub.t[a]))
            k1 = int(np.searchsorted(t_axis, sub.t[b - 1]))
            out.append({
                "channel": ch, "half": "+" if sign[a] > 0 else "-",
                "t_start": float(sub.t[a]), "t_end": float(sub.t[b - 1]), "n": int(b - a),
                "mean_nA": float(np.mean(sub.current_pA[a:b])) / 1000.0,
                "dF": float(F[k1 + 1, col] - F[k0, col]),
            })
    out.sort(key=lambda p: p["t_start"])
    return out


# --- generic protocol run -----------------------------------------------------

def run_file(config: DeviceConfig, protocol_path, out, calibrate: bool = True) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = resolve_protocol(protocol_path)
    proto = parse_protocol(path.read_text(encoding="utf-8"), name=path.stem)
    dev = Device(config)
    if calibrate:
        dev.calibrate()
    log_path = out / f"{path.stem}_log.csv"
    run_protocol(dev, proto, log_path)
    return {"protocol": proto.name, "duration_s": proto.duration_s(), "ticks": dev.n_ticks,
            "files": [str(log_path)]}


# --- closed loop on an in-process twin ---------------------------------------

def closedloop(config: DeviceConfig, out, target: str = "0:0.5,20:0.65", duration_s: float = 400.0,
               period_s: float = 2.0, channel: int = 0, k_p: float | None = None,
               k_i: float | None = None) -> dict:
    """Track a fluorescence target over real UDP against a lockstep twin."""
    from .client import (Client, ControllerState, SimulatedFluorescence, TwinClock,
                         closed_loop_twin, parse_target, run_closed_loop)
    from .server import UDPServer

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    state = ControllerState()
    state = dataclasses.replace(state, k_p=state.k_p if k_p is None else k_p,
                                k_i=state.k_i if k_i is None else k_i)
    dev, svc = closed_loop_twin(config, channel)
    trace = out / "closedloop_trace.csv"
    with UDPServer(svc, "127.0.0.1", 0).start() as srv, Client(*srv.address) as client:
        rows = run_closed_loop(client, parse_target(target), duration_s,
                               SimulatedFluorescence(dev, channel), period_s, channel, state,
                               TwinClock(svc), trace_path=trace,
                               meta={"config": config.describe(), "seed": config.seed,
                                     "target": target})
    return {"rows": rows, "files": [str(trace)]}


def settle_time(rows, tol: float = 0.02, t_from: float = 0.0):
    """Time after ``t_from`` from which |measured - target| stays below
    ``tol`` x target; None if it never settles."""
    last_bad = None
    for t, tgt, m, _u in rows:
        if t >= t_from and abs(m - tgt) >= tol * tgt:
            last_bad = t
    if rows and last_bad == rows[-1][0]:
        return None
    if last_bad is None:
        return 0.0
    step = rows[1][0] - rows[0][0] if len(rows) > 1 else 0.0
    return last_bad + step - t_from


__all__ = ["characterize", "cv", "ionpump", "ionpump_phases", "run_file", "closedloop",
           "settle_time", "OUTPUT_FS_V", "INPUT_FS_nA"]
