"""Post-processing of run logs: linear fits, CV peak finding, phase stats."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy import signal, stats

from .device import LOG_HEADER


@dataclass
class RunLog:
    meta: dict
    commands: list  # (t_s, text)
    t: np.ndarray
    channel: np.ndarray
    set_mV: np.ndarray
    switch: np.ndarray
    current_pA: np.ndarray

    def for_channel(self, ch: int) -> "RunLog":
        m = self.channel == ch
        return RunLog(self.meta, self.commands, self.t[m], self.channel[m], self.set_mV[m],
                      self.switch[m], self.current_pA[m])


def read_log(path) -> RunLog:
    meta, commands, rows = {}, [], []
    header_seen = False
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("# cmd,"):
                _, t, text = line.rstrip("\n").split(",", 2)
                commands.append((float(t), text))
            elif line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    k, v = body.split("=", 1)
                    meta[k.strip()] = v.strip()
            elif not header_seen:
                if line.strip() != LOG_HEADER:
                    raise ValueError(f"{path}: unexpected header {line.strip()!r}")
                header_seen = True
            else:
                rows.append(line)
    if not header_seen:
        raise ValueError(f"{path}: missing column header")
    if rows:
        data = np.loadtxt(io.StringIO("".join(rows)), delimiter=",", ndmin=2)
    else:
        data = np.zeros((0, 5))
    ints = data[:, 1:].astype(np.int64)
    return RunLog(meta, commands, data[:, 0], ints[:, 0], ints[:, 1], ints[:, 2], ints[:, 3])


def linear_fit(x, y):
    """OLS line; returns ``(slope, intercept, residuals)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept), y - (slope * x + intercept)


def full_scale_error(residuals, full_scale) -> float:
    """Max |residual| as a fraction of full scale."""
    r = np.asarray(residuals, dtype=float)
    return float(np.max(np.abs(r)) / full_scale) if r.size else 0.0


@dataclass(frozen=True)
class Peak:
    v_V: float
    i_A: float
    kind: str  # "max" or "min"
    scan: str  # "forward" or "reverse"


def scan_direction(v) -> np.ndarray:
    """+1/-1 per sample; flat steps inherit the neighbouring direction."""
    v = np.asarray(v, dtype=float)
    d = np.sign(np.diff(v))
    if d.size == 0:
        return np.ones(v.size, dtype=int)
    nz = np.flatnonzero(d)
    if nz.size == 0:
        return np.ones(v.size, dtype=int)
    # forward-fill zeros, seed leading zeros with the first real direction
    idx = np.where(d != 0, np.arange(d.size), 0)
    np.maximum.accumulate(idx, out=idx)
    filled = d[idx]
    filled[: nz[0]] = d[nz[0]]
    return np.concatenate([[filled[0]], filled]).astype(int)


def _branches(direction):
    edges = np.flatnonzero(np.diff(direction)) + 1
    starts = np.concatenate([[0], edges])
    stops = np.concatenate([edges, [direction.size]])
    return list(zip(starts.tolist(), stops.tolist()))


def detect_peaks(v_mV, i_pA, window: int = 5, min_prominence: float = 0.05,
                 prominence_span_V: float = 0.2, min_separation_V: float = 0.025) -> list[Peak]:
    """Local extrema of a CV trace, per scan branch.

    The current is smoothed by a ``window``-point moving average; extrema
    need a prominence of at least ``min_prominence`` x max |I|, measured
    within ``prominence_span_V`` of the extremum (so the flat stretch
    between two same-sign peaks does not count as a valley). Extrema of
    one kind closer than ``min_separation_V`` are merged. Positions are
    refined by a parabola through the three samples around the extremum.
    """
    v = np.asarray(v_mV, dtype=float)
    i = np.asarray(i_pA, dtype=float)
    if v.size < window + 2:
        return []
    prom = min_prominence * float(np.max(np.abs(i)))
    if prom <= 0:
        return []
    half = window // 2
    kernel = np.ones(window) / window
    direction = scan_direction(v)
    found = []
    for start, stop in _branches(direction):
        if stop - start < window + 2:
            continue
        vb, ib = v[start:stop], i[start:stop]
        smooth = np.convolve(ib, kernel, mode="valid")
        # ramps are linear in sample index; map fractional index -> volts
        vslope, vint = np.polyfit(np.arange(vb.size), vb, 1)
        per_V = 1000.0 / max(abs(vslope), 1e-9)  # samples per volt
        wlen = max(3, int(prominence_span_V * per_V) | 1)
        distance = max(1, int(round(min_separation_V * per_V)))
        scan = "forward" if direction[start] > 0 else "reverse"
        for kind, sgn in (("max", 1.0), ("min", -1.0)):
            locs, _ = signal.find_peaks(sgn * smooth, prominence=prom, wlen=wlen, distance=distance)
            for loc in locs:
                frac = float(loc)
                if 0 < loc < smooth.size - 1:
                    y0, y1, y2 = smooth[loc - 1], smooth[loc], smooth[loc + 1]
                    denom = y0 - 2 * y1 + y2
                    if denom != 0:
                        frac = loc + 0.5 * (y0 - y2) / denom
                pos = frac + half
                found.append(Peak(float((vslope * pos + vint) / 1000.0), float(smooth[loc] * 1e-12),
                                  kind, scan))
    return found


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y).statistic)
