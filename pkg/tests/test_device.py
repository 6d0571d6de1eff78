"""The multi-channel device: construction, commands, calibration, logging."""

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from potentiostat_twin import analysis
from potentiostat_twin.config import config_from_kv, load_config, parse_kv, resolve_config
from potentiostat_twin.device import LOG_HEADER, Device, DeviceConfig, Pacer, create_device, info
from potentiostat_twin.errors import BusyError, ConfigError, RangeError
from potentiostat_twin.protocol import parse_protocol, run_protocol

R1M = {"type": "resistor", "R_ohm": "1e6"}


# --- construction ------------------------------------------------------------------

@pytest.mark.parametrize("boards, channels", [(1, 8), (3, 24), (8, 64)])
def test_board_count_sets_channels(boards, channels):
    assert create_device(DeviceConfig(n_boards=boards)).n_channels == channels


@pytest.mark.parametrize("kwargs", [dict(n_boards=0), dict(n_boards=9), dict(sample_rate_Hz=861),
                                    dict(sample_rate_Hz=0), dict(mode="loud"), dict(time_mode="warp"),
                                    dict(channels={8: {}})])
def test_bad_config_rejected(kwargs):
    with pytest.raises(ConfigError):
        DeviceConfig(**kwargs)


def test_fresh_device_is_open_at_zero_request():
    dev = Device(DeviceConfig(cell=R1M))
    for ch in range(8):
        assert not dev.switch_closed(ch)
        assert abs(dev.get_voltage(ch)) <= 2
        assert dev.channel(ch).set_mV == 0
    assert dev.baselines_nA == [0.0] * 8
    dev.tick()
    # open channels drive nothing: readings stay at zero
    assert all(dev.read_current(ch) == 0 for ch in range(8))


# --- commands --------------------------------------------------------------------------

def test_set_voltage_quantizes_and_reads_back():
    dev = Device()
    assert dev.set_voltage(0, -4000) == -4000
    assert dev.channel(0).code == 0
    got = dev.set_voltage(1, 1400)
    assert abs(got - 1400) <= 1
    assert dev.get_voltage(1) == got


@pytest.mark.parametrize("ch, mv", [(0, 5000), (0, -4001), (0, 3985), (8, 0), (-1, 0), (0, 1.5), (True, 0)])
def test_set_voltage_range_errors(ch, mv):
    dev = Device()
    before = dev.channel(0)
    with pytest.raises(RangeError):
        dev.set_voltage(ch, mv)
    assert dev.channel(0) == before


def test_closed_channel_reads_ohms_law():
    dev = Device(DeviceConfig(cell=R1M, sample_rate_Hz=860))
    mv = dev.set_voltage(2, 1000)
    dev.set_switch(2, True)
    for _ in range(40):
        dev.tick()
    assert abs(dev.read_current(2) - mv * 1000) <= 1000  # readback is rounded to 1 mV
    assert dev.read_current(2) % 125 == 0


def test_open_channel_with_load_reads_zero():
    dev = Device(DeviceConfig(cell=R1M))
    dev.set_voltage(0, 1000)
    for _ in range(10):
        dev.tick()
    assert dev.read_current(0) == 0


def test_reconnect_applies_retained_voltage():
    dev = Device(DeviceConfig(cell=R1M, sample_rate_Hz=860))
    dev.set_voltage(0, 500)
    dev.set_switch(0, True)
    dev.set_switch(0, False)
    for _ in range(20):
        dev.tick()
    dev.set_switch(0, True)
    for _ in range(40):
        dev.tick()
    assert abs(dev.read_current(0) - 500_000) <= 2_000


def test_sample_all_fans_out_with_shared_time():
    dev = Device(DeviceConfig(n_boards=8))
    samples = dev.sample_all()
    assert len(samples) == 64
    assert len({s.t for s in samples}) == 1
    assert [s.channel for s in samples] == list(range(64))


def test_clock_after_860_ticks():
    dev = Device(DeviceConfig(sample_rate_Hz=860))
    for _ in range(860):
        b = dev.tick()
    assert b.t == pytest.approx(1.0, abs=1 / 860)


# --- calibration --------------------------------------------------------------------------

def test_calibration_nulls_injected_offset():
    dev = Device(DeviceConfig(mode="noisy", seed=4))
    dev.inject_offset(3, 0.5)
    dev.calibrate()
    for _ in range(3):
        dev.tick()
    assert abs(dev.channel(3).baseline_nA - 0.5) <= 0.125
    readings = []
    for _ in range(200):
        dev.tick()
        readings.append(dev.read_current(3))
    assert abs(np.mean(readings)) <= 125


def test_ideal_calibration_is_zero():
    dev = Device()
    assert dev.calibrate() == [0.0] * 8
    assert dev.calibrated


def test_calibration_opens_switches():
    dev = Device()
    dev.set_switch(1, True)
    dev.calibrate()
    assert not any(dev.switch_closed(ch) for ch in range(8))


def test_calibration_refused_while_busy():
    dev = Device()
    dev.busy = True
    with pytest.raises(BusyError):
        dev.calibrate()


def test_baselines_are_lsb_multiples():
    dev = Device(DeviceConfig(mode="noisy", seed=9, channels={k: {"offset_nA": 0.3 * k} for k in range(8)}))
    for b in dev.calibrate():
        assert (b / 0.125) == pytest.approx(round(b / 0.125))


# --- channel independence ----------------------------------------------------------------------

_cmd = st.one_of(
    st.tuples(st.just("set"), st.integers(-4000, 3984)),
    st.tuples(st.just("sw"), st.booleans()),
    st.tuples(st.just("off"), st.floats(-1.0, 1.0)),
    st.tuples(st.just("tick"), st.just(None)),
)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(victim=st.integers(0, 7), cmds=st.lists(_cmd, min_size=1, max_size=30), mode=st.sampled_from(["ideal", "noisy"]))
def test_channel_independence(victim, cmds, mode):
    cfg = DeviceConfig(cell=R1M, mode=mode, seed=11)
    a, b = Device(cfg), Device(cfg)
    for dev in (a, b):
        for ch in range(8):
            dev.set_voltage(ch, 100 * ch - 300)
            dev.set_switch(ch, True)
    for kind, arg in cmds:
        if kind == "tick":
            ra, rb = a.tick(), b.tick()
            others = [ch for ch in range(8) if ch != victim]
            assert list(ra.current_pA[others]) == list(rb.current_pA[others])
            assert list(ra.set_mV[others]) == list(rb.set_mV[others])
        elif kind == "set":
            b.set_voltage(victim, arg)
        elif kind == "sw":
            b.set_switch(victim, arg)
        else:
            b.inject_offset(victim, arg)
    for ch in range(8):
        if ch != victim:
            assert a.channel(ch) == b.channel(ch)


# --- logging ------------------------------------------------------------------------------------

def test_log_records_commands_and_samples_in_order(tmp_path):
    dev = Device(DeviceConfig(cell=R1M))
    dev.open_log(tmp_path / "run.csv")
    dev.set_voltage(0, 700)
    dev.tick()
    dev.set_switch(0, True)
    dev.tick()
    dev.tick()
    dev.open_all()
    dev.close_log()
    text = (tmp_path / "run.csv").read_text()
    assert "\r" not in text
    lines = text.splitlines()
    assert LOG_HEADER in lines
    cmds = [ln.split(",", 2)[2] for ln in lines if ln.startswith("# cmd,")]
    assert cmds == ["SET 0 700", "SW 0 1", "OPEN ALL"]
    log = analysis.read_log(tmp_path / "run.csv")
    assert len(log.t) == 3 * 8
    assert np.all(np.diff(log.t) >= 0)
    assert all(c % 125 == 0 for c in log.current_pA)
    assert log.meta["start_wallclock"] == "unset"
    assert log.meta["firmware"].startswith("potentiostat-twin")


def _short_run(tmp_path, name, pacer):
    cfg = DeviceConfig(cell=R1M, mode="noisy", seed=21, sample_rate_Hz=100)
    dev = Device(cfg)
    dev.calibrate()
    proto = parse_protocol("# sample_rate_Hz=100\nstep,channel,action,v1_mV,v2_mV,duration_s,repeat\n"
                           "0,ALL,RAMP,-500,500,0.3,1\n1,2,HOLD,900,,0.1,1\n")
    path = tmp_path / name
    run_protocol(dev, proto, path, pacer=pacer)
    return path.read_bytes()


def test_realtime_and_accelerated_logs_identical(tmp_path):
    fast = _short_run(tmp_path, "a.csv", Pacer("accelerated", 0.0))
    paced = _short_run(tmp_path, "b.csv", Pacer("realtime"))
    scaled = _short_run(tmp_path, "c.csv", Pacer("accelerated", 4.0))
    assert fast == paced == scaled


def test_info_fields():
    d = info(Device(DeviceConfig(n_boards=2)))
    assert d["channels"] == 16
    assert d["lsb_pA"] == 125
    assert d["range_pA"] == 1_650_000
    assert d["rating_pA"] == 1_500_000
    assert (d["drive_min_mV"], d["drive_max_mV"]) == (-4000, 3984)


# --- config files -------------------------------------------------------------------------------

def test_config_parsing_and_channel_overrides():
    text = """
    n_boards = 2   # sixteen channels
    mode = noisy
    cell = resistor
    cell.R_ohm = 2e6
    ch.0-9.cell = ion_pump
    ch.4.cell.conductance_S = 1e-7
    ch.12.offset_nA = 0.25
    ch.13.drive_offset_mV = 50
    """
    cfg = load_config(text=text, seed=5)
    assert cfg.n_channels == 16 and cfg.mode == "noisy" and cfg.seed == 5
    dev = Device(cfg)
    assert type(dev.cells[9]).__name__ == "IonPump"
    assert dev.cells[4].conductance_S == 1e-7
    assert dev.cells[3].conductance_S == 5e-7
    assert type(dev.cells[10]).__name__ == "Resistor" and dev.cells[10].R == 2e6
    assert dev.channel(12).offset_A == pytest.approx(0.25e-9)
    assert dev.channel(13).drive_offset_V == pytest.approx(0.05)


@pytest.mark.parametrize("text", ["bogus = 1", "n_boards = two", "ch.3.colour = red", "cell = warp",
                                  "no equals sign", "ch.5-2.offset_nA = 1"])
def test_bad_config_text(text):
    with pytest.raises(ConfigError):
        Device(load_config(text=text))


def test_parse_kv_strips_comments():
    assert parse_kv("a = 1 # c\n\n# x\nb=2") == {"a": "1", "b": "2"}


@pytest.mark.parametrize("name", ["pd_surface", "ionpump", "resistor_1M", "randles"])
def test_shipped_configs_load(name):
    Device(resolve_config(name))


def test_missing_config():
    with pytest.raises(ConfigError):
        resolve_config("/nonexistent/cfg")


def test_description_round_trip():
    cfg = config_from_kv(parse_kv("n_boards=2\ncell=randles\nch.3.offset_nA=0.5"), seed=3)
    again = DeviceConfig.from_description(cfg.describe(), seed=3)
    assert again.describe() == cfg.describe()


def test_calibration_ignores_previous_current_tail():
    for rate in (15, 100, 860):
        dev = Device(DeviceConfig(cell=R1M, sample_rate_Hz=rate))
        for ch in range(8):
            dev.set_voltage(ch, 1650)
            dev.set_switch(ch, True)
        for _ in range(5):
            dev.tick()
        assert dev.calibrate() == [0.0] * 8
