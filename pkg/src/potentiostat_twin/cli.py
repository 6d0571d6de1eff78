"""Command-line entry point.

    potentiostat-twin [--config C] [--seed N] [--out DIR] [--mode ideal|noisy] <command> ...

Exit status: 0 success, 2 configuration/input error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from datetime import datetime, timezone
from pathlib import Path

from . import experiments as ex
from .config import resolve_config
from .errors import ConfigError, ParseError, RangeError, TwinError, ValidationError

log = logging.getLogger("potentiostat_twin")

DEFAULT_CONFIGS = {"characterize": "resistor_1M", "cv": "pd_surface", "ionpump": "ionpump",
                   "closedloop": "ionpump", "run": None, "serve": None}


def _config(args):
    name = args.config or DEFAULT_CONFIGS.get(args.command)
    return resolve_config(name, seed=args.seed, mode=args.mode)


def _manifest(args, files, cfg=None):
    out = Path(args.out)
    files = [str(Path(f).relative_to(out)) if Path(f).is_relative_to(out) else str(f) for f in files]
    data = {"subcommand": args.command, "config": args.config or DEFAULT_CONFIGS.get(args.command),
            "seed": cfg.seed if cfg is not None else args.seed,
            "mode": cfg.mode if cfg is not None else args.mode, "out": str(out),
            "files": files + ["manifest.json"]}
    (out / "manifest.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def cmd_characterize(args):
    cfg = _config(args)
    res = ex.characterize(cfg, args.out, load_ohm=args.load_ohm)
    print(f"output: slope {res['output_slope_mV_per_code']:.4f} mV/code, "
          f"error {res['output_error_pct_fs']:.4f} % FS")
    print(f"input:  gain {res['input_gain']:.5f}, error {res['input_error_pct_fs']:.4f} % FS")
    print(f"load:   configured {res['load_configured_ohm'] / 1e6:.5f} MOhm, "
          f"fitted {res['load_fitted_ohm'] / 1e6:.5f} MOhm")
    _manifest(args, res["files"], cfg)


def cmd_cv(args):
    cfg = _config(args)
    res = ex.cv(cfg, args.out, args.rate, args.offset_mv, args.channel, args.v_lo, args.v_hi, args.cycles)
    print(f"cv {args.rate:g} mV/s, {res['duration_s']:g} s, offset {args.offset_mv:g} mV: "
          f"{len(res['peaks'])} peaks")
    for p in res["peaks"]:
        print(f"  {p.v_V:+.4f} V  {p.i_A * 1e9:+9.2f} nA  {p.kind:3s} {p.scan}")
    _manifest(args, res["files"], cfg)


def cmd_ionpump(args):
    cfg = _config(args)
    skip = [e - 1 for e in args.skip]  # electrodes are numbered from 1
    res = ex.ionpump(cfg, args.out, range(args.electrodes), skip, args.amp_mv, args.period)
    print(f"active electrodes: {[c + 1 for c in res['active_channels']]}")
    print(f"half-phases: {len(res['phases'])}, spearman(current, dF) = {res['spearman']:.3f}")
    _manifest(args, res["files"], cfg)


def cmd_run(args):
    cfg = _config(args)
    res = ex.run_file(cfg, args.protocol, args.out)
    print(f"ran {res['protocol']}: {res['duration_s']:g} s, {res['ticks']} ticks")
    _manifest(args, res["files"], cfg)


def cmd_closedloop(args):
    if args.port is not None:
        return _closedloop_remote(args)
    cfg = _config(args)
    res = ex.closedloop(cfg, args.out, args.target, args.duration, args.period, args.channel,
                        args.kp, args.ki)
    rows = res["rows"]
    t_last, tgt, m, u = rows[-1]
    print(f"closed loop: {len(rows)} periods, final target {tgt:.4f}, measured {m:.4f}, u {u} mV")
    _manifest(args, res["files"], cfg)


def _closedloop_remote(args):
    """Track against an external server, reading intensities from a file."""
    from .client import (Client, ControllerState, FileTailSensor, WallClock, parse_target,
                         run_closed_loop)
    if not args.sensor_file:
        raise ConfigError("--port needs --sensor-file (one intensity per line)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = ControllerState()
    if args.kp is not None or args.ki is not None:
        state = ControllerState(k_p=args.kp if args.kp is not None else state.k_p,
                                k_i=args.ki if args.ki is not None else state.k_i)
    trace = out / "closedloop_trace.csv"
    with Client(args.host, args.port) as client:
        client.switch(args.channel, True)
        run_closed_loop(client, parse_target(args.target), args.duration, FileTailSensor(args.sensor_file),
                        args.period, args.channel, state, WallClock(), trace_path=trace,
                        meta={"target": args.target, "server": f"{args.host}:{args.port}"})
    print(f"trace written to {trace}")
    _manifest(args, [trace])


def cmd_serve(args):
    from .device import Device, Pacer
    from .server import serve

    cfg = _config(args)
    dev = Device(cfg)
    pacer = Pacer(cfg.time_mode if args.accel is None else "accelerated",
                  cfg.accel_factor if args.accel is None else args.accel)
    if not pacer.factor:
        pacer = Pacer("realtime")
    if args.log:
        dev.open_log(args.log, datetime.now(timezone.utc).isoformat(timespec="seconds"))
    stop = threading.Event()
    try:
        serve(dev, args.host, args.port, pacer, args.protocol_dir, stop, http_port=args.http_port)
    except KeyboardInterrupt:
        stop.set()
    finally:
        dev.close_log()


def cmd_send(args):
    from . import wire
    from .client import Client

    with Client(args.host, args.port, args.timeout_ms, args.retries) as client:
        line = " ".join(args.words) + "\n"
        reply = client.request_raw(line.encode("ascii"))
    text = reply.decode("ascii", "replace").rstrip("\n")
    print(text)
    if not isinstance(wire.decode_reply(reply), wire.Ok):
        raise RuntimeError(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="potentiostat-twin",
                                description="Device twin of a multi-channel mini-potentiostat array.")
    p.add_argument("--config", help="config file, or a bundled name (pd_surface, ionpump, resistor_1M, randles)")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (overrides the config)")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--mode", choices=("ideal", "noisy"), default=None, help="override the noise mode")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("characterize", help="output/input linearity and resistive load fit")
    s.add_argument("--load-ohm", type=float, default=None, help="test load (default: config or 1 MOhm)")
    s.set_defaults(func=cmd_characterize)

    s = sub.add_parser("cv", help="cyclic voltammetry on the Pd surface load")
    s.add_argument("--rate", type=float, default=100.0, help="scan rate in mV/s (default 100)")
    s.add_argument("--offset-mv", type=float, default=0.0, help="output-stage offset on the channel")
    s.add_argument("--channel", type=int, default=0)
    s.add_argument("--v-lo", type=int, default=-900)
    s.add_argument("--v-hi", type=int, default=500)
    s.add_argument("--cycles", type=int, default=1)
    s.set_defaults(func=cmd_cv)

    s = sub.add_parser("ionpump", help="square-wave cycle across ion-pump electrodes")
    s.add_argument("--electrodes", type=int, default=9)
    s.add_argument("--skip", type=int, nargs="*", default=[4, 6], help="electrode numbers (1-based) to skip")
    s.add_argument("--amp-mv", type=int, default=1400)
    s.add_argument("--period", type=float, default=30.0)
    s.set_defaults(func=cmd_ionpump)

    s = sub.add_parser("run", help="execute a CSV protocol file")
    s.add_argument("protocol")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("serve", help="serve the UDP control API")
    s.add_argument("--host", default="0.0.0.0")
    s.add_argument("--port", type=int, default=9750)
    s.add_argument("--http-port", type=int, default=None, help="also serve the HTTP/JSON API")
    s.add_argument("--accel", type=float, default=None, help="simulated seconds per wall second")
    s.add_argument("--protocol-dir", default=None, help="directory searched by RUN <name>")
    s.add_argument("--log", default=None, help="write the sample log here")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("closedloop", help="PI tracking of the fluorescence proxy")
    s.add_argument("--target", default="0:0.5,20:0.65",
                   help="intensity, or piecewise-constant t:value list (default 0:0.5,20:0.65)")
    s.add_argument("--duration", type=float, default=400.0)
    s.add_argument("--period", type=float, default=2.0)
    s.add_argument("--channel", type=int, default=0)
    s.add_argument("--kp", type=float, default=None)
    s.add_argument("--ki", type=float, default=None)
    s.add_argument("--host", default="127.0.0.1", help="external server (with --port)")
    s.add_argument("--port", type=int, default=None, help="use an external server instead of a twin")
    s.add_argument("--sensor-file", default=None, help="intensity file for external runs")
    s.set_defaults(func=cmd_closedloop)

    s = sub.add_parser("send", help="send one wire command to a server and print the reply")
    s.add_argument("words", nargs="+", help="e.g. SET 3 1400")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=9750)
    s.add_argument("--timeout-ms", type=int, default=200)
    s.add_argument("--retries", type=int, default=3)
    s.set_defaults(func=cmd_send)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, ParseError, ValidationError, RangeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TwinError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
