"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 gateway error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import apps
from .config import APPLICATIONS, ConfigError, ScenarioConfig, load_config
from .gateway import GatewayUnavailable, PortBinding, Side
from .scenario import compare, comparison_csv, comparison_table, emit, run_scenario
from .traffic import synthetic_scans, synthetic_video, write_lidar_capture, write_video_chunks

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_GATEWAY = 3


def _densities(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(p) for p in text.replace(",", " ").split())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad density list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty density list")
    return values


def _endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}") from None


def _build_config(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    changes = {}
    if args.densities:
        changes["densities"] = args.densities
    if args.rl:
        changes["rl_enabled"] = args.rl == "on"
    if args.mode:
        changes["mode"] = args.mode
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.sim_time is not None:
        changes["sim_time"] = args.sim_time
    if args.episodes is not None:
        changes["episodes"] = args.episodes
    if args.application:
        changes["application"] = args.application
    if args.qtable_load:
        changes["qtable_load"] = args.qtable_load
    if args.qtable_save:
        changes["qtable_save"] = args.qtable_save
    if args.freeze:
        changes["freeze"] = True
    return cfg.replace(**changes) if changes else cfg


def _ports(cfg: ScenarioConfig) -> tuple[PortBinding, PortBinding]:
    g = cfg.gateway
    vehicle = PortBinding(Side.VEHICLE, (g.host, g.vehicle_port), (g.host, g.vehicle_peer_port), 0, "192.168.5.20")
    # the server node id is fixed per density by the network; run_episode rebinds it
    server = PortBinding(Side.SERVER, (g.host, g.server_port), (g.host, g.server_peer_port), -1, "192.168.3.20")
    return vehicle, server


def cmd_run(args) -> int:
    try:
        cfg = _build_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = run_scenario(cfg, _ports(cfg) if cfg.mode == "realtime" else None)
    except GatewayUnavailable as exc:
        print(f"gateway error: {exc}", file=sys.stderr)
        return EXIT_GATEWAY
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    written = emit(report, args.out_dir)
    print((Path(args.out_dir) / "kpi.txt").read_text(), end="")
    print(f"wrote {len(written)} files to {args.out_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    try:
        base_cfg = _build_config(args).replace(rl_enabled=False)
        rl_cfg = base_cfg.replace(rl_enabled=True)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out_dir)
    baseline = run_scenario(base_cfg)
    treatment = run_scenario(rl_cfg)
    emit(baseline, out / "baseline")
    emit(treatment, out / "rl")
    rows = compare(baseline, treatment)
    (out / "comparison.csv").write_text(comparison_csv(rows))
    table = comparison_table(rows)
    (out / "comparison.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_probe_client(args) -> int:
    n = apps.probe_client(args.target, args.bandwidth, args.size, args.time, args.stream)
    print(f"sent {n} datagrams")
    return EXIT_OK


def cmd_probe_server(args) -> int:
    try:
        server = apps.ProbeServer(args.bind)
    except OSError as exc:
        print(f"gateway error: {exc}", file=sys.stderr)
        return EXIT_GATEWAY
    try:
        server.serve(args.time, args.interval)
    finally:
        server.close()
    return EXIT_OK


def cmd_make_capture(args) -> int:
    if args.kind == "lidar":
        write_lidar_capture(synthetic_scans(args.count, seed=args.seed), args.path)
    else:
        write_video_chunks(synthetic_video(args.count, seed=args.seed), args.path)
    print(f"wrote {args.path}")
    return EXIT_OK


def _rate(text: str) -> float:
    suffix = {"k": 1e3, "K": 1e3, "m": 1e6, "M": 1e6, "g": 1e9, "G": 1e9}
    if text and text[-1] in suffix:
        return float(text[:-1]) * suffix[text[-1]]
    return float(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vanet-hil", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--densities", type=_densities)
        sp.add_argument("--mode", choices=("virtual", "realtime"))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--sim-time", type=float)
        sp.add_argument("--episodes", type=int)
        sp.add_argument("--application", choices=APPLICATIONS)
        sp.add_argument("--qtable-load", help="Q-table to start from; '{density}' is substituted")
        sp.add_argument("--qtable-save", help="where to write learned Q-tables; '{density}' is substituted")
        sp.add_argument("--freeze", action="store_true", help="evaluation only: no learning, greedy policy")
        sp.add_argument("--out-dir", default="results")

    run = sub.add_parser("run", help="run a scenario and write KPI reports")
    scenario_flags(run)
    run.add_argument("--rl", choices=("on", "off"))
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="run with RL off and on, then tabulate percent differences")
    scenario_flags(cmp_)
    cmp_.set_defaults(func=cmd_compare, rl=None)

    pc = sub.add_parser("probe-client", help="iperf-like UDP sender into the gateway vehicle port")
    pc.add_argument("--target", type=_endpoint, default=("127.0.0.1", 50_520))
    pc.add_argument("-b", "--bandwidth", type=_rate, default=22e6)
    pc.add_argument("-l", "--size", type=int, default=1250)
    pc.add_argument("-t", "--time", type=float, default=10.0)
    pc.add_argument("--stream", type=int, default=1)
    pc.set_defaults(func=cmd_probe_client)

    ps = sub.add_parser("probe-server", help="receive gateway egress and print per-interval KPIs")
    ps.add_argument("--bind", type=_endpoint, default=("127.0.0.1", 50_321))
    ps.add_argument("-t", "--time", type=float, default=10.0)
    ps.add_argument("-i", "--interval", type=float, default=1.0)
    ps.set_defaults(func=cmd_probe_server)

    mc = sub.add_parser("make-capture", help="write a synthetic LiDAR or video capture file")
    mc.add_argument("kind", choices=("lidar", "video"))
    mc.add_argument("path")
    mc.add_argument("--count", type=int, default=100)
    mc.add_argument("--seed", type=int, default=0)
    mc.set_defaults(func=cmd_make_capture)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
