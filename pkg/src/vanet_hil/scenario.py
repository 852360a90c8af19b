"""Experiment orchestration: density sweeps, RL on/off, KPI reports and comparisons."""

from __future__ import annotations

import csv
import gzip
import io
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .agent import ACTION_MULTIPLIERS, Observation, QAgent, RewardNorms, load_qtable, new_qtable, reward, save_qtable
from .config import ConfigError, ScenarioConfig
from .gateway import Gateway, PortBinding
from .kernel import US_PER_S, Kernel, KernelMode, RunStats, seconds
from .mobility import MobilityProcess, spawn_fleet
from .network import Fate, Network
from .radio import Frame, Kind
from .traffic import (
    LOG_COLUMNS,
    CbrSource,
    StreamConfig,
    StreamRecord,
    UnitSource,
    attach_accounting,
    background_traffic,
    cbr_schedule,
    lidar_replay,
    read_lidar_capture,
    read_video_chunks,
    synthetic_scans,
    synthetic_video,
    video_replay,
)

log = logging.getLogger(__name__)

METRICS = ("mean_delay_s", "throughput_bps", "delivered_streams", "bytes_received",
           "playable_duration_s", "units_received")
APP_STREAM = "app"


class MismatchedDensities(ValueError):
    pass


def episode_seed(seed: int, density: int, episode: int) -> int:
    return seed * 1_000_003 + density * 1_009 + episode


@dataclass
class EpisodeResult:
    density: int
    episode: int
    seed: int
    record: StreamRecord
    metrics: dict[str, float | int | None]
    rewards: list[float]
    actions: list[int]
    collisions: int
    transmissions: int
    gateway: dict[str, int] | None = None
    # realtime only; wall-clock data stays out of the emitted reports
    pacing: RunStats | None = None

    @property
    def mean_reward(self) -> float | None:
        return sum(self.rewards) / len(self.rewards) if self.rewards else None


def compute_metrics(log_rows: Sequence[Sequence], sim_time_us: int, unit_interval: float) -> dict:
    """KPIs for one episode from per-packet rows ``[seq, gen, arrival|None, bytes, outcome, unit, n_frags]``."""
    delays = 0
    n = 0
    frag_bytes = 0
    windows: set[int] = set()
    last_window = max(-(-sim_time_us // US_PER_S) - 1, 0)
    need: dict[int, int] = {}
    got: dict[int, int] = {}
    unit_bytes: dict[int, int] = {}
    order: list[int] = []
    for _, gen, arr, size, _, unit, nf in log_rows:
        if unit not in need:
            order.append(unit)
            need[unit] = nf
            unit_bytes[unit] = 0
        unit_bytes[unit] += size
        if arr is None:
            continue
        n += 1
        delays += arr - gen
        frag_bytes += size
        windows.add(min(arr // US_PER_S, last_window))
        got[unit] = got.get(unit, 0) + 1
    complete = {u for u in order if got.get(u, 0) == need[u]}
    prefix_end = 0.0
    for u in order:
        if u not in complete:
            break
        prefix_end = (u + 1) * unit_interval
    return {
        "mean_delay_s": delays / n / US_PER_S if n else None,
        "throughput_bps": 8 * frag_bytes * US_PER_S / sim_time_us,
        "delivered_streams": len(windows),
        "bytes_received": sum(unit_bytes[u] for u in complete),
        "playable_duration_s": prefix_end,
        "units_received": len(complete),
    }


class _EpochMeter:
    """Accumulates deliveries of the gateway vehicle's stream between decision epochs."""

    def __init__(self, stream_id: str):
        self.stream_id = stream_id
        self.reset()

    def reset(self) -> None:
        self.n = 0
        self.delay_us = 0
        self.bytes = 0

    def __call__(self, frame: Frame, fate: Fate, t: int) -> None:
        if fate is Fate.DELIVERED and frame.stream_id == self.stream_id:
            self.n += 1
            self.delay_us += t - frame.gen_time
            self.bytes += frame.payload_len

    def observe(self, epoch_s: float) -> Observation:
        delay = self.delay_us / self.n / US_PER_S if self.n else 0.0
        obs = Observation(delay, 8 * self.bytes / epoch_s, 1 if self.n else 0)
        self.reset()
        return obs


def app_rate(cfg: ScenarioConfig) -> tuple[float, float]:
    """(nominal bit rate, unit interval in seconds) of the gateway vehicle's application."""
    t = cfg.traffic
    if cfg.mode == "realtime" or cfg.application == "probe":
        return t.probe_rate, t.probe_packet_size * 8 / t.probe_rate
    if cfg.application == "lidar":
        return t.lidar_points * 8 * 8 * t.lidar_rate_hz, 1 / t.lidar_rate_hz
    return t.video_bitrate, t.video_chunk_interval


def _app_source(cfg: ScenarioConfig, kernel: Kernel, network: Network, record: StreamRecord):
    t = cfg.traffic
    dst = network.server_id
    if cfg.application == "probe":
        sched = cbr_schedule(StreamConfig(Kind.PROBE, t.probe_rate, t.probe_packet_size, cfg.sim_time))
        return CbrSource(kernel, record, 0, dst, sched, Kind.PROBE, network.enqueue)
    if cfg.application == "lidar":
        base = read_lidar_capture(t.lidar_capture) if t.lidar_capture else synthetic_scans(20, t.lidar_points)
        n = int(cfg.sim_time * t.lidar_rate_hz)
        emissions = lidar_replay([base[k % len(base)] for k in range(n)], t.lidar_rate_hz, t.lidar_fragment)
        return UnitSource(kernel, record, 0, dst, Kind.LIDAR, emissions, network.enqueue)
    clip = read_video_chunks(t.video_file) if t.video_file else synthetic_video(
        250, t.video_bitrate, t.video_chunk_interval)
    n = int(round(cfg.sim_time / t.video_chunk_interval))
    emissions = video_replay([clip[k % len(clip)] for k in range(n)], t.video_chunk_interval, t.lidar_fragment)
    return UnitSource(kernel, record, 0, dst, Kind.VIDEO, emissions, network.enqueue)


def run_episode(cfg: ScenarioConfig, density: int, episode: int, agent: QAgent | None = None,
                fixed_action: int | None = None, seed: int | None = None,
                gateway_ports: tuple[PortBinding, PortBinding] | None = None) -> EpisodeResult:
    """One simulated run at one density.

    With ``agent`` the gateway vehicle's rate multiplier follows the agent;
    with ``fixed_action`` it is pinned; otherwise it stays at full rate. The
    reward is logged every decision epoch in all three cases.
    """
    ep_seed = episode_seed(cfg.seed, density, episode) if seed is None else seed
    realtime = cfg.mode == "realtime"
    kernel = Kernel(KernelMode.real_time(cfg.drift_budget_us) if realtime else KernelMode.virtual())
    fleet = spawn_fleet(density, cfg.kinematics, seed=ep_seed)
    network = Network(kernel, fleet, cfg.radio, cfg.mac, seed=ep_seed,
                      ideal_delay_us=0 if cfg.ideal_channel else None)
    mobility = MobilityProcess(kernel, fleet, cfg.kinematics, random.Random(f"{ep_seed}-mobility"),
                               network.update_positions)
    mobility.start()

    t = cfg.traffic
    records: dict[str, StreamRecord] = {}
    bg_cfg = StreamConfig(Kind.BACKGROUND, t.background_size * 8 / t.background_interval,
                          t.background_size, cfg.sim_time)
    for plan in background_traffic(density, bg_cfg, seed=ep_seed):
        rec = StreamRecord(f"bg{plan.node_id}")
        src = CbrSource(kernel, rec, plan.node_id, network.server_id, cbr_schedule(plan.config),
                        Kind.BACKGROUND, network.enqueue, offset_us=plan.jitter_us)
        src.start()

    gateway = None
    stats = None
    if realtime:
        if gateway_ports is None:
            raise ConfigError("realtime mode needs gateway ports")
        vehicle, server = gateway_ports
        server = PortBinding(server.side, server.local, server.peer, network.server_id, server.label)
        gateway = Gateway(kernel, network, vehicle, server)
        record = gateway.record
        shaper = gateway
        stream_id = record.stream_id
    else:
        record = StreamRecord(APP_STREAM)
        shaper = _app_source(cfg, kernel, network, record)
        shaper.start()
        stream_id = APP_STREAM
    records[stream_id] = record

    meter = _EpochMeter(stream_id)
    listeners = [meter] + ([gateway.handle_fate] if gateway else [])
    attach_accounting(network, records, listeners)

    rate, unit_interval = app_rate(cfg)
    acfg = agent.config if agent else cfg.agent
    norms = agent.norms if agent else RewardNorms(throughput_ref=rate)
    epoch_us = seconds(acfg.decision_epoch)
    rewards: list[float] = []
    actions: list[int] = []

    if agent is not None:
        agent.reset_episode(ep_seed)
        a = agent.step(Observation())
    else:
        a = 3 if fixed_action is None else fixed_action
    actions.append(a)
    shaper.multiplier = ACTION_MULTIPLIERS[a]

    def epoch(_payload=None) -> None:
        obs = meter.observe(acfg.decision_epoch)
        if agent is not None:
            nxt = agent.step(obs)
            rewards.append(agent.rewards[-1])
        else:
            rewards.append(reward(obs, norms, acfg.reward_throughput_weight, acfg.reward_delay_weight))
            nxt = actions[-1]
        actions.append(nxt)
        shaper.multiplier = ACTION_MULTIPLIERS[nxt]
        if kernel.now + epoch_us <= sim_us:
            kernel.schedule_in(epoch_us, epoch, "agent")

    sim_us = seconds(cfg.sim_time)
    kernel.schedule(epoch_us, epoch, "agent")

    if realtime:
        try:
            gateway.open()
            stats = kernel.run_realtime(sim_us, cfg.drift_budget_us)
        finally:
            gateway.close()
        log.info("realtime run: max drift %d us, %d overloads", stats.max_drift_us, stats.overloads)
    else:
        kernel.run_until(sim_us)

    return EpisodeResult(
        density, episode, ep_seed, record,
        compute_metrics(record.log, sim_us, unit_interval if not realtime else 0.0),
        rewards, actions[:len(rewards)], network.collisions, network.transmissions,
        vars(gateway.counters) | {"pending": gateway.counters.pending()} if gateway else None,
        stats,
    )


@dataclass
class KpiReport:
    application: str
    rl_enabled: bool
    densities: tuple[int, ...]
    episodes: int
    sim_time_us: int
    unit_interval: float
    results: dict[tuple[int, int], EpisodeResult] = field(default_factory=dict)

    def value(self, density: int, metric: str, episode: int | None = None):
        ep = self.episodes if episode is None else episode
        return self.results[(density, ep)].metrics[metric]

    def rows(self) -> list[tuple[int, int, str, float | int | None]]:
        out = []
        for d in self.densities:
            for e in range(1, self.episodes + 1):
                m = self.results[(d, e)].metrics
                out.extend((d, e, name, m[name]) for name in METRICS)
        return out


def _qtable_path(template: str, density: int) -> str:
    return template.format(density=density) if "{density}" in template else template


def run_scenario(cfg: ScenarioConfig, gateway_ports: tuple[PortBinding, PortBinding] | None = None) -> KpiReport:
    """Run ``episodes`` x ``densities``. The Q-table persists across episodes of one density.

    With RL on, episodes before the last train with the configured epsilon;
    the last is evaluated greedily with learning frozen.
    """
    rate, unit_interval = app_rate(cfg)
    report = KpiReport(cfg.application, cfg.rl_enabled, tuple(cfg.densities), cfg.episodes,
                       seconds(cfg.sim_time), unit_interval)
    for density in cfg.densities:
        agent = None
        if cfg.rl_enabled:
            q = load_qtable(_qtable_path(cfg.qtable_load, density)) if cfg.qtable_load else new_qtable()
            agent = QAgent(cfg.agent, RewardNorms(throughput_ref=rate), q, seed=cfg.seed)
        for episode in range(1, cfg.episodes + 1):
            if agent is not None:
                training = episode < cfg.episodes and not cfg.freeze
                agent.learning = training
                agent.epsilon = None if training else 0.0
            res = run_episode(cfg, density, episode, agent, gateway_ports=gateway_ports)
            report.results[(density, episode)] = res
            log.info("density %d episode %d: %s", density, episode, res.metrics)
        if agent is not None and cfg.qtable_save:
            save_qtable(agent.q, _qtable_path(cfg.qtable_save, density))
    return report


def static_action_sweep(cfg: ScenarioConfig, density: int, episode: int) -> dict[int, float]:
    """Mean epoch reward of each fixed action under one episode's seed."""
    out = {}
    for a in range(len(ACTION_MULTIPLIERS)):
        res = run_episode(cfg, density, episode, fixed_action=a)
        out[a] = res.mean_reward
    return out


# -- comparison -----------------------------------------------------------

@dataclass(frozen=True)
class ComparisonRow:
    metric: str
    density: int
    baseline: float | int | None
    treatment: float | int | None
    pct: float | None  # None means undefined


def percent_difference(baseline, treatment) -> float | None:
    if baseline is None or treatment is None or baseline == 0:
        return None
    return 100.0 * (treatment - baseline) / baseline


def compare(baseline: KpiReport, treatment: KpiReport, episode: int | None = None) -> list[ComparisonRow]:
    """Per metric and density: 100*(treatment - baseline)/baseline.

    A delay decrease therefore shows as a negative number. Defaults to each
    report's last episode (the evaluation episode when RL is on).
    """
    if tuple(baseline.densities) != tuple(treatment.densities):
        raise MismatchedDensities(f"{baseline.densities} vs {treatment.densities}")
    rows = []
    for metric in METRICS:
        for d in sorted(baseline.densities):
            b = baseline.value(d, metric, episode)
            t = treatment.value(d, metric, episode)
            rows.append(ComparisonRow(metric, d, b, t, percent_difference(b, t)))
    return rows


# -- output ---------------------------------------------------------------

def fmt_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def parse_value(s: str):
    if s == "":
        return None
    try:
        return int(s)
    except ValueError:
        return float(s)


def kpi_csv(report: KpiReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("density", "episode", "metric", "value"))
    for d, e, metric, v in report.rows():
        w.writerow((d, e, metric, fmt_value(v)))
    return buf.getvalue()


def kpi_table(report: KpiReport) -> str:
    header = ["density", "episode"] + list(METRICS)
    lines = [header]
    for d in report.densities:
        for e in range(1, report.episodes + 1):
            m = report.results[(d, e)].metrics
            lines.append([str(d), str(e)] + [fmt_value(m[k]) or "-" for k in METRICS])
    widths = [max(len(r[i]) for r in lines) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in lines) + "\n"


def parse_kpi_table(text: str) -> list[tuple[int, int, str, float | int | None]]:
    lines = [ln.split() for ln in text.strip().splitlines()]
    header = lines[0]
    out = []
    for parts in lines[1:]:
        d, e = int(parts[0]), int(parts[1])
        for name, raw in zip(header[2:], parts[2:]):
            out.append((d, e, name, None if raw == "-" else parse_value(raw)))
    return out


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("metric", "density", "baseline", "treatment", "pct_diff"))
    for r in rows:
        w.writerow((r.metric, r.density, fmt_value(r.baseline), fmt_value(r.treatment),
                    "undefined" if r.pct is None else repr(r.pct)))
    return buf.getvalue()


def comparison_table(rows: Sequence[ComparisonRow]) -> str:
    lines = [["metric", "density", "baseline", "treatment", "pct_diff"]]
    for r in rows:
        lines.append([r.metric, str(r.density), fmt_value(r.baseline) or "-", fmt_value(r.treatment) or "-",
                      "undefined" if r.pct is None else f"{r.pct:+.2f}%"])
    widths = [max(len(r[i]) for r in lines) for i in range(5)]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in lines) + "\n"


def log_name(density: int, episode: int) -> str:
    return f"d{density}_e{episode}.csv.gz"


def write_log(record: StreamRecord, path: Path) -> None:
    # mtime pinned so identical runs give identical bytes
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as gz:
        text = io.TextIOWrapper(gz, encoding="utf-8", newline="")
        csv.writer(text, lineterminator="\n").writerow(LOG_COLUMNS)
        record.write_csv(text)
        text.flush()
        text.detach()


def read_log(path: Path) -> list[list]:
    """Per-packet rows back in the in-memory layout used by :func:`compute_metrics`."""
    rows = []
    with gzip.open(path, "rt", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for _, seq, gen, arr, size, outcome, unit, nf in reader:
            rows.append([int(seq), int(gen), int(arr) if arr else None, int(size), outcome, int(unit), int(nf)])
    return rows


def emit(report: KpiReport, out_dir: str | Path, formats: Sequence[str] = ("csv", "table")) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        p = out / "kpi.csv"
        p.write_text(kpi_csv(report))
        written.append(p)
    if "table" in formats:
        p = out / "kpi.txt"
        p.write_text(kpi_table(report))
        written.append(p)
    logs = out / "logs"
    logs.mkdir(exist_ok=True)
    meta = {
        "application": report.application,
        "rl_enabled": report.rl_enabled,
        "densities": list(report.densities),
        "episodes": report.episodes,
        "sim_time_us": report.sim_time_us,
        "unit_interval": report.unit_interval,
        "episodes_detail": [],
    }
    for (d, e), res in sorted(report.results.items()):
        p = logs / log_name(d, e)
        write_log(res.record, p)
        written.append(p)
        meta["episodes_detail"].append({
            "density": d, "episode": e, "seed": res.seed, "log": f"logs/{log_name(d, e)}",
            "mean_reward": res.mean_reward, "collisions": res.collisions,
            "transmissions": res.transmissions, "gateway": res.gateway,
        })
    p = out / "report.json"
    p.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(p)
    return written
