"""Client transport policy, PI controller, sensors and the closed-loop harness."""

import socket
import threading
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from potentiostat_twin.client import (Client, ControllerState, FileTailSensor, SimulatedFluorescence,
                                      Timeout, TwinClock, closed_loop_twin, control_step, parse_target,
                                      read_trace, replay_trace, run_closed_loop)
from potentiostat_twin.config import resolve_config
from potentiostat_twin.experiments import closedloop, settle_time
from potentiostat_twin.server import UDPServer

# --- controller -------------------------------------------------------------------------------


def test_zero_error_zero_output():
    u, s = control_step(ControllerState(), 0.5, 0.5, 2.0)
    assert u == 0.0 and s.integral == 0.0


def test_proportional_saturates():
    u, s = control_step(ControllerState(k_p=2.8, k_i=0.0), 0.75, 0.25, 1e-9)
    assert u == pytest.approx(1.4)
    u, _ = control_step(ControllerState(k_p=2.8, k_i=0.0), 0.0, 1.0, 1e-9)
    assert u == -1.4


def test_proportional_hand_value():
    u, s = control_step(ControllerState(k_p=2.0, k_i=0.5), 0.6, 0.5, 2.0)
    # integral = 0.5 * 0.1 * 2 = 0.1 ; u = 2 * 0.1 + 0.1
    assert s.integral == pytest.approx(0.1)
    assert u == pytest.approx(0.3)


def test_integral_rises_to_clamp_and_stops():
    s = ControllerState(k_p=0.0, k_i=1.0)
    prev = s.integral
    for _ in range(200):
        _, s = control_step(s, 0.9, 0.1, 0.05)
        assert prev <= s.integral <= s.u_max
        prev = s.integral
    assert s.integral == s.u_max


@pytest.mark.parametrize("args", [(0.5, 0.5, 0.0), (0.5, 0.5, -1.0), (1.2, 0.5, 1.0), (0.5, -0.1, 1.0)])
def test_control_step_preconditions(args):
    with pytest.raises(ValueError):
        control_step(ControllerState(), *args)


def test_bad_clamp_bounds():
    with pytest.raises(ValueError):
        ControllerState(u_min=1.0, u_max=-1.0)


unit = st.floats(0.0, 1.0)


@given(st.floats(0, 1e4), st.floats(0, 1e3),
       st.lists(st.tuples(unit, unit, st.floats(1e-3, 100.0)), min_size=1, max_size=60))
def test_output_and_integral_always_clamped(kp, ki, seq):
    s = ControllerState(k_p=kp, k_i=ki)
    for target, measured, dt in seq:
        u, s = control_step(s, target, measured, dt)
        assert s.u_min <= u <= s.u_max
        assert s.u_min <= s.integral <= s.u_max


# --- targets ----------------------------------------------------------------------------------

def test_parse_target():
    f = parse_target("0:0.5,20:0.65")
    assert (f(0), f(19.9), f(20), f(1e6)) == (0.5, 0.5, 0.65, 0.65)
    assert parse_target("0.3")(123) == 0.3
    with pytest.raises(ValueError):
        parse_target("0:1.5")


# --- transport --------------------------------------------------------------------------------

def test_timeout_after_retries():
    sink = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sink.bind(("127.0.0.1", 0))  # bound but never answers
    try:
        with Client(*sink.getsockname(), timeout_ms=200, retries=3) as c:
            t0 = time.monotonic()
            with pytest.raises(Timeout):
                c.ping()
            elapsed = time.monotonic() - t0
        assert 0.55 <= elapsed <= 1.2
        sink.settimeout(0.1)
        got = 0
        try:
            while True:
                sink.recv(100)
                got += 1
        except socket.timeout:
            pass
        assert got == 3
    finally:
        sink.close()


def test_unreachable_port_times_out():
    probe = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]
    probe.close()
    with Client("127.0.0.1", port, timeout_ms=100, retries=3) as c:
        t0 = time.monotonic()
        with pytest.raises(Timeout):
            c.ping()
        assert time.monotonic() - t0 <= 1.0


def test_client_rejects_bad_policy():
    with pytest.raises(ValueError):
        Client(retries=0)


def test_client_shared_across_threads():
    dev, svc = closed_loop_twin(resolve_config("ionpump"))
    with UDPServer(svc, "127.0.0.1", 0).start() as srv, Client(*srv.address) as c:
        errors = []

        def worker(ch):
            try:
                for k in range(50):
                    c.set_voltage(ch, 10 * k)
                    assert c.get_voltage(ch) == pytest.approx(10 * k, abs=1)
            except Exception as exc:  # pragma: no cover - reported below
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(ch,)) for ch in range(4)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert errors == []


# --- sensors ------------------------------------------------------------------------------------

def test_file_tail_sensor_follows_newest_complete_line(tmp_path):
    path = tmp_path / "f.txt"
    s = FileTailSensor(path, timeout_s=0.2, poll_s=0.01)
    with pytest.raises(Timeout):
        s.read()
    path.write_text("0.4\n0.45\n0.5")  # last line incomplete
    assert s.read() == 0.45
    with open(path, "a") as fh:
        fh.write("2\njunk\n1.7\n")
    assert s.read() == 1.0  # 0.52 completes, then 1.7 clamps to 1
    path.write_text("0.1\n")  # truncated / rotated
    assert s.read() == 0.1


def test_simulated_sensor_needs_ion_pump():
    dev, _ = closed_loop_twin(resolve_config("resistor_1M"))
    with pytest.raises(ValueError):
        SimulatedFluorescence(dev, 0)


# --- closed loop -------------------------------------------------------------------------------------

class _LocalClient:
    """Client stand-in that applies commands straight to a lockstep service."""

    def __init__(self, svc):
        from potentiostat_twin import wire
        self.svc, self.wire = svc, wire

    def set_voltage(self, ch, mv):
        reply = self.svc.execute(self.wire.Set(ch, mv))
        assert reply == self.wire.Ok()


def test_equilibrium_target_holds_still():
    dev, svc = closed_loop_twin(resolve_config("ionpump"))
    sensor = SimulatedFluorescence(dev, 0)
    f0 = sensor.read()
    rows = run_closed_loop(_LocalClient(svc), lambda t: f0, 60, sensor, clock=TwinClock(svc))
    assert all(abs(u) <= 2 for *_, u in rows)
    assert all(abs(m - f0) < 1e-3 for _, _, m, _ in rows)


@pytest.mark.parametrize("target", [0.35, 0.65])
def test_negative_feedback(target):
    """A tracking error of either sign yields a drive that shrinks it."""
    dev, svc = closed_loop_twin(resolve_config("ionpump"))
    sensor = SimulatedFluorescence(dev, 0)
    e0 = target - sensor.read()
    rows = run_closed_loop(_LocalClient(svc), lambda t: target, 10, sensor, clock=TwinClock(svc))
    errs = [tgt - m for _, tgt, m, _ in rows]
    assert abs(errs[-1]) < abs(e0)
    assert all(e * e0 > 0 for e in errs)  # no overshoot in the first seconds
    # the drive's sign opposes the error's sign (negative voltage raises fluorescence)
    assert all(u * e0 < 0 for *_, u in rows[:3])


@pytest.fixture(scope="module")
def step_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cl")
    res = closedloop(resolve_config("ionpump"), out, "0:0.5,20:0.65", 400, 2.0)
    return out, res["rows"]


def test_step_tracking_settles_within_300s(step_run):
    _, rows = step_run
    ts = settle_time(rows, 0.02, t_from=20.0)
    assert ts is not None and ts <= 300
    assert all(abs(u) <= 1400 for *_, u in rows)


def test_trace_is_self_contained_and_replays(step_run):
    out, rows = step_run
    meta, again = read_trace(out / "closedloop_trace.csv")
    assert again == rows
    assert {"config", "seed", "k_p", "k_i", "period_s", "channel"} <= set(meta)
    assert replay_trace(out / "closedloop_trace.csv") == [m for _, _, m, _ in rows]


def test_replay_without_config_refused(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("t_s,target,measured,u_mV\n0.0,0.5,0.5,0\n")
    with pytest.raises(ValueError):
        replay_trace(p)


def test_timeout_flushes_partial_trace(tmp_path):
    class Flaky:
        def __init__(self):
            self.n = 0

        def set_voltage(self, ch, mv):
            self.n += 1
            if self.n > 3:
                raise Timeout("gone")

    dev, svc = closed_loop_twin(resolve_config("ionpump"))
    path = tmp_path / "partial.csv"
    with pytest.raises(Timeout):
        run_closed_loop(Flaky(), lambda t: 0.6, 100, SimulatedFluorescence(dev, 0),
                        clock=TwinClock(svc), trace_path=path)
    _, rows = read_trace(path)
    assert len(rows) == 3
