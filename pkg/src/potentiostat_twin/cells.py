"""Electrochemical loads driven by one channel.

Each model exposes ``step(v, dt) -> i`` (``v is None`` means the switch is
open and no current flows), ``dc_current(v)`` (static current used to size
switch leakage, no state change) and ``copy()``. Models are plain
dataclasses; clone before a what-if run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import NonFiniteInput

FARADAY = 96485.0


def _check(v):
    if v is not None and not math.isfinite(v):
        raise NonFiniteInput(f"applied voltage {v!r} is not finite")


@dataclass
class NoCell:
    """Unconnected channel."""

    def step(self, v, dt):
        _check(v)
        return 0.0

    def dc_current(self, v):
        return 0.0

    def copy(self):
        return replace(self)


@dataclass
class Resistor:
    R: float = 1e6

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError("R must be positive")

    def step(self, v, dt):
        _check(v)
        return 0.0 if v is None else v / self.R

    def dc_current(self, v):
        return v / self.R

    def copy(self):
        return replace(self)


@dataclass
class Randles:
    """Rs in series with (Rct || Cdl); ``v_c`` is the capacitor voltage."""

    Rs: float = 100e3
    Rct: float = 1e6
    Cdl: float = 1e-6
    v_c: float = 0.0
    # explicit Euler sub-steps per time constant; 50 keeps a CV sweep within
    # ~0.3% of a converged integrator (10 would be ~1.5%)
    substeps_per_tau: int = 50

    def __post_init__(self):
        if not (self.Rs > 0 and self.Rct > 0 and self.Cdl > 0):
            raise ValueError("Rs, Rct and Cdl must be positive")
        if self.substeps_per_tau < 10:
            raise ValueError("substeps_per_tau must be >= 10")

    @property
    def tau(self) -> float:
        return self.Rs * self.Rct / (self.Rs + self.Rct) * self.Cdl

    def step(self, v, dt):
        _check(v)
        if not dt > 0:
            raise ValueError("dt must be positive")
        n = max(1, math.ceil(dt / (self.tau / self.substeps_per_tau)))
        h = dt / n
        v_c = self.v_c
        if v is None:
            # open circuit: Cdl discharges through Rct only
            for _ in range(n):
                v_c -= h * v_c / (self.Rct * self.Cdl)
            self.v_c = v_c
            return 0.0
        i0 = (v - v_c) / self.Rs
        for _ in range(n):
            i = (v - v_c) / self.Rs
            v_c += h * (i - v_c / self.Rct) / self.Cdl
        self.v_c = v_c
        return i0

    def dc_current(self, v):
        return v / (self.Rs + self.Rct)

    def copy(self):
        return replace(self)


@dataclass(frozen=True)
class PeakSpec:
    v_center: float
    height: float
    width: float
    direction: str  # "anodic" or "cathodic"

    def __post_init__(self):
        if self.direction not in ("anodic", "cathodic"):
            raise ValueError(f"unknown peak direction {self.direction!r}")
        if not self.width > 0:
            raise ValueError("peak width must be positive")
        if self.direction == "anodic" and not self.height > 0:
            raise ValueError("anodic peak height must be positive")
        if self.direction == "cathodic" and not self.height < 0:
            raise ValueError("cathodic peak height must be negative")

    def current(self, v):
        return self.height * math.exp(-(((v - self.v_center) / self.width) ** 2))


# Surface processes of a Pd-coated electrode vs AgCl: oxide formation,
# oxide reduction, hydride formation, hydrogen desorption. Heights and
# widths are surrogate values sized for the +-1650 nA input window.
PD_PEAKS = (
    PeakSpec(0.15, 300e-9, 0.06, "anodic"),
    PeakSpec(-0.20, -350e-9, 0.06, "cathodic"),
    PeakSpec(-0.65, -600e-9, 0.05, "cathodic"),
    PeakSpec(-0.75, 450e-9, 0.05, "anodic"),
)


@dataclass
class PdSurface:
    """Capacitive baseline plus scan-direction-gated Gaussian peaks."""

    C: float = 0.2e-6
    peaks: tuple = PD_PEAKS
    # scan reverses only after the drive retreats this far from its extreme,
    # so sub-LSB ramps and drive noise do not flip the active peak set
    hysteresis_V: float = 5e-3
    v_prev: float | None = None
    v_turn: float | None = None
    direction: int = 1

    def __post_init__(self):
        if not self.C > 0:
            raise ValueError("C must be positive")
        if self.hysteresis_V < 0:
            raise ValueError("hysteresis_V must be >= 0")
        self.peaks = tuple(self.peaks)

    def step(self, v, dt):
        _check(v)
        if v is None:
            self.v_prev = self.v_turn = None
            return 0.0
        if not dt > 0:
            raise ValueError("dt must be positive")
        cap = 0.0
        if self.v_prev is not None:
            cap = self.C * (v - self.v_prev) / dt
        if self.v_turn is None:
            self.v_turn = v
        elif self.direction > 0:
            if v < self.v_turn - self.hysteresis_V:
                self.direction, self.v_turn = -1, v
            else:
                self.v_turn = max(self.v_turn, v)
        else:
            if v > self.v_turn + self.hysteresis_V:
                self.direction, self.v_turn = 1, v
            else:
                self.v_turn = min(self.v_turn, v)
        active = "anodic" if self.direction > 0 else "cathodic"
        faradaic = sum(pk.current(v) for pk in self.peaks if pk.direction == active)
        self.v_prev = v
        return cap + faradaic

    def dc_current(self, v):
        return 0.0

    def copy(self):
        return replace(self)


@dataclass
class IonPumpState:
    c_target: float = 0.1  # mol/m^3
    c_reservoir: float = 0.1  # equilibrium the target relaxes toward
    volume_target: float = 1e-8  # m^3
    transfer_eff: float = 0.5
    leak_rate: float = 2e-3  # 1/s
    F_const: float = FARADAY
    c_half: float = 0.1

    def __post_init__(self):
        if self.c_target < 0 or self.c_reservoir < 0:
            raise ValueError("concentrations must be non-negative")
        if not (self.volume_target > 0 and self.c_half > 0):
            raise ValueError("volume_target and c_half must be positive")
        if not 0.0 <= self.transfer_eff <= 1.0:
            raise ValueError("transfer_eff must be in [0, 1]")


def ionpump_step(state: IonPumpState, i_channel: float, dt: float) -> IonPumpState:
    """Move charge ``i_channel * dt`` worth of protons into the target well.

    Positive current adds protons to the target; the target also relaxes
    toward the reservoir concentration at ``leak_rate``.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    dn = state.transfer_eff * i_channel * dt / state.F_const
    c = (state.c_target + dn / state.volume_target
         - state.leak_rate * (state.c_target - state.c_reservoir) * dt)
    return replace(state, c_target=max(0.0, c))


def fluorescence(state: IonPumpState) -> float:
    """pH-dye proxy in [0, 1]; brighter with fewer protons."""
    return 1.0 / (1.0 + state.c_target / state.c_half)


@dataclass
class IonPump:
    conductance_S: float = 5e-7
    state: IonPumpState = field(default_factory=IonPumpState)

    def __post_init__(self):
        if not self.conductance_S > 0:
            raise ValueError("conductance_S must be positive")

    def step(self, v, dt):
        _check(v)
        i = 0.0 if v is None else self.conductance_S * v
        self.state = ionpump_step(self.state, i, dt)
        return i

    def dc_current(self, v):
        return self.conductance_S * v

    def fluorescence(self) -> float:
        return fluorescence(self.state)

    def copy(self):
        return replace(self)


def cell_current(model, v_applied, dt):
    """Functional form: returns ``(i, model')`` and leaves ``model`` untouched."""
    _check(v_applied)
    m = model.copy()
    return m.step(v_applied, dt), m


# key=value config keys per cell type (``cell.<key>`` in a config file)
CELL_KEYS = {
    "none": {},
    "resistor": {"R_ohm": "R"},
    "randles": {"Rs_ohm": "Rs", "Rct_ohm": "Rct", "Cdl_F": "Cdl", "v_c_V": "v_c"},
    "pd_surface": {"C_F": "C", "hysteresis_V": "hysteresis_V"},
    "ion_pump": {"conductance_S": "conductance_S"},
}
ION_PUMP_STATE_KEYS = {
    "c_target": "c_target", "c_reservoir": "c_reservoir", "volume_m3": "volume_target",
    "transfer_eff": "transfer_eff", "leak_rate": "leak_rate", "c_half": "c_half",
}


def _peak_from_text(text):
    parts = [s.strip() for s in text.split(",")]
    if len(parts) != 4:
        raise ValueError(f"peak needs 'v_center_V, height_A, width_V, anodic|cathodic': {text!r}")
    return PeakSpec(float(parts[0]), float(parts[1]), float(parts[2]), parts[3])


def _peak_order(key):
    suffix = key.split(".", 1)[1]
    return (0, int(suffix), "") if suffix.isdigit() else (1, 0, suffix)


def cell_from_spec(spec: dict):
    """Build a cell from ``{"type": ..., <key>: <text>}``; raises ValueError."""
    kind = spec.get("type", "none")
    if kind not in CELL_KEYS:
        raise ValueError(f"unknown cell type {kind!r}")
    known = dict(CELL_KEYS[kind])
    if kind == "ion_pump":
        known.update(ION_PUMP_STATE_KEYS)
    kwargs, state_kwargs, peaks = {}, {}, []
    for key, text in spec.items():
        if key == "type":
            continue
        if kind == "pd_surface" and key.startswith("peak."):
            peaks.append((key, _peak_from_text(text)))
            continue
        if key not in known:
            raise ValueError(f"unknown key {key!r} for cell type {kind!r}")
        if kind == "ion_pump" and key in ION_PUMP_STATE_KEYS:
            state_kwargs[known[key]] = float(text)
        else:
            kwargs[known[key]] = float(text)
    if kind == "none":
        return NoCell()
    if kind == "resistor":
        return Resistor(**kwargs)
    if kind == "randles":
        return Randles(**kwargs)
    if kind == "pd_surface":
        if peaks:
            kwargs["peaks"] = tuple(pk for _, pk in sorted(peaks, key=lambda kp: _peak_order(kp[0])))
        return PdSurface(**kwargs)
    return IonPump(state=IonPumpState(**state_kwargs), **kwargs)
