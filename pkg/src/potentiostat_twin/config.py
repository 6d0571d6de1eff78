"""Plain-text ``key = value`` configuration for the device and its loads.

Device keys: ``n_boards``, ``sample_rate_Hz``, ``mode``, ``time_mode``,
``accel_factor``, ``seed``, ``noise_sigma_A``, ``drive_noise_sigma_V``.

``cell = <type>`` and ``cell.<key> = <value>`` set the load on every channel;
``ch.<N>.cell...`` (or ``ch.<A>-<B>.cell...`` for a range) overrides it.
``ch.<N>.offset_nA`` injects an amplifier offset, ``ch.<N>.drive_offset_mV``
an output-stage error. Cell types and their keys:

    none
    resistor     R_ohm
    randles      Rs_ohm Rct_ohm Cdl_F v_c_V
    pd_surface   C_F  peak.<k> = v_center_V, height_A, width_V, anodic|cathodic
    ion_pump     conductance_S c_target c_reservoir volume_m3 transfer_eff
                 leak_rate c_half

Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import re
from importlib import resources
from pathlib import Path

from .device import DeviceConfig
from .errors import ConfigError

_DEVICE_KEYS = {
    "n_boards": int,
    "sample_rate_Hz": float,
    "mode": str,
    "time_mode": str,
    "accel_factor": float,
    "seed": int,
    "noise_sigma_A": float,
    "drive_noise_sigma_V": float,
}
_CH_KEY = re.compile(r"^ch\.(\d+)(?:-(\d+))?\.(.+)$")


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def _cell_spec(items: dict[str, str], prefix: str) -> dict | None:
    spec = {}
    for key, value in items.items():
        if key == prefix:
            spec["type"] = value
        elif key.startswith(prefix + "."):
            spec[key[len(prefix) + 1:]] = value
    return spec or None


def config_from_kv(items: dict[str, str], **overrides) -> DeviceConfig:
    kwargs = {}
    channels: dict[int, dict] = {}
    ch_items: dict[tuple[int, int], dict[str, str]] = {}
    for key, value in items.items():
        if key in _DEVICE_KEYS:
            try:
                kwargs[key] = _DEVICE_KEYS[key](value)
            except ValueError:
                raise ConfigError(f"{key}: cannot parse {value!r}") from None
            continue
        m = _CH_KEY.match(key)
        if m:
            lo = int(m.group(1))
            hi = int(m.group(2)) if m.group(2) else lo
            if hi < lo:
                raise ConfigError(f"{key}: empty channel range")
            ch_items.setdefault((lo, hi), {})[m.group(3)] = value
            continue
        if key != "cell" and not key.startswith("cell."):
            raise ConfigError(f"unknown key {key!r}")
    default_cell = _cell_spec(items, "cell")
    if default_cell is not None:
        default_cell.setdefault("type", "none")
        kwargs["cell"] = default_cell
    # wider ranges first so single-channel entries win
    for (lo, hi), sub in sorted(ch_items.items(), key=lambda kv: (-(kv[0][1] - kv[0][0]), kv[0])):
        for key in sub:
            if key != "cell" and not key.startswith("cell.") and key not in ("offset_nA", "drive_offset_mV"):
                raise ConfigError(f"unknown channel key {key!r}")
        spec = _cell_spec(sub, "cell")
        for ch in range(lo, hi + 1):
            entry = channels.setdefault(ch, {})
            if spec is not None:
                merged = dict(entry.get("cell", {}))
                merged.update(spec)
                merged.setdefault("type", "none")
                entry["cell"] = merged
            for key in ("offset_nA", "drive_offset_mV"):
                if key in sub:
                    try:
                        entry[key] = float(sub[key])
                    except ValueError:
                        raise ConfigError(f"ch.{ch}.{key}: cannot parse {sub[key]!r}") from None
    kwargs["channels"] = channels
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return DeviceConfig(**kwargs)


def load_config(path=None, text: str | None = None, **overrides) -> DeviceConfig:
    """Read a config file (or text). ``overrides`` such as ``mode=`` or
    ``seed=`` replace file values when not None."""
    if text is None:
        if path is None:
            return config_from_kv({}, **overrides)
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_kv(parse_kv(text), **overrides)


def shipped(kind: str, name: str) -> Path:
    """Path of a bundled file; ``kind`` is ``configs`` or ``protocols``."""
    return Path(str(resources.files("potentiostat_twin") / "data" / kind / name))


def resolve_protocol(name_or_path) -> Path:
    """A protocol file by path, or a bundled one by name (``cv_100``)."""
    p = Path(name_or_path)
    if p.is_file():
        return p
    for cand in (shipped("protocols", str(name_or_path)), shipped("protocols", f"{name_or_path}.csv")):
        if cand.is_file():
            return cand
    raise FileNotFoundError(f"no protocol file or bundled protocol named {str(name_or_path)!r}")


def resolve_config(name_or_path, **overrides) -> DeviceConfig:
    """Load a config by path, or by bundled name (``pd_surface`` etc.)."""
    if name_or_path is None:
        return load_config(None, **overrides)
    p = Path(name_or_path)
    if not p.exists():
        candidate = shipped("configs", p.name if p.suffix else p.name + ".cfg")
        if candidate.exists():
            p = candidate
        else:
            raise ConfigError(f"config {name_or_path} not found")
    return load_config(p, **overrides)
