"""End-to-end scenario execution.

One run wires the stages together on a single event loop: the power plane
decides which tiles are energized, producers feed the message fabric and
their traffic loads the very links the sync exchanges cross, and the sync
residuals in turn feed the array-gain evaluation.  The mobile platform runs
its own time-stepped mission after the fabric phase.  Every artifact lands
in a directory keyed by the hash of the resolved configuration.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

from .coherent import CoherentError, GainResult, evaluate_beamforming
from .core import PS_PER_MS, EventLoop, RngRegistry, from_seconds
from .dataplane import Broker, ConsumerGroup, LinkLoadTracker
from .fabric import ConfigurationError, Fabric, build_default_fabric
from .powerplane import PdDevice, PsePlane
from .rover import (Battery, MissionConfig, MissionRunner, default_beacons,
                    plan_sampling)
from .scenario import (ScenarioConfig, resolved_json, scenario_hash,
                       validate_scenario)
from .timesync import SyncDomain, SyncReport


@dataclass
class RunResult:
    out_dir: Path
    report: dict
    fabric: Fabric
    sync_report: SyncReport | None = None
    domain: SyncDomain | None = None
    power: PsePlane | None = None
    broker: Broker | None = None
    groups: list[ConsumerGroup] | None = None
    gain: GainResult | None = None
    mission: MissionRunner | None = None


class _Producers:
    """Periodic publishers living on the shared loop.  A producer that has
    been powered down emits nothing; its uplink and trunk loads vanish with
    it, which is exactly what the sync jitter coupling should see."""

    MODULE = "dataplane"

    def __init__(self, loop, fabric, cfg, broker, tracker, online, until_ps):
        self.loop = loop
        self.fabric = fabric
        self.cfg = cfg
        self.broker = broker
        self.tracker = tracker
        self.online = online
        self.until = until_ps
        self.counts: dict[str, int] = {}
        self.bytes: dict[str, int] = {}
        candidates = sorted(t.id for t in fabric.tiles.values()
                            if "producer" in t.roles)
        self.tiles = candidates[:cfg.producer_tiles]
        period = from_seconds(cfg.produce_interval_ms / 1e3)
        spacing = period // max(1, len(self.tiles))
        for i, tile in enumerate(self.tiles):
            self.counts[tile] = 0
            self.bytes[tile] = 0
            loop.schedule(i * spacing, self.MODULE, tile, "produce",
                          self._produce, (tile, period))

    def _produce(self, arg) -> None:
        tile, period = arg
        now = self.loop.now
        nxt = now + period
        if nxt <= self.until:
            self.loop.schedule(nxt, self.MODULE, tile, "produce",
                               self._produce, arg)
        if not self.online(tile):
            return
        seq = self.counts[tile]
        self.counts[tile] = seq + 1
        nbytes = self.cfg.record_bytes
        self.bytes[tile] += nbytes
        self.broker.append(self.cfg.topic, f"{tile}:{seq}", nbytes, now, tile)
        self.tracker.record(self.fabric.tile_link(tile).id, now, nbytes)
        sw = self.fabric.switch_for_tile(tile)
        self.tracker.record(self.fabric.trunk_link(sw).id, now, nbytes)

    def write_traffic_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["producer", "records", "bytes"])
            for tile in self.tiles:
                w.writerow([tile, self.counts[tile], self.bytes[tile]])


class _Consumers:
    """Consumer groups polling on the shared loop and committing their
    delivery frontier after every poll."""

    MODULE = "dataplane"

    def __init__(self, loop, cfg, broker, until_ps):
        self.loop = loop
        self.cfg = cfg
        self.until = until_ps
        self.groups: list[ConsumerGroup] = []
        self.delivered: dict[str, int] = {}
        period = from_seconds(cfg.poll_interval_ms / 1e3)
        members_total = max(1, cfg.consumer_groups * cfg.consumers_per_group)
        spacing = period // members_total
        k = 0
        for g in range(cfg.consumer_groups):
            group = ConsumerGroup(f"g{g}", broker)
            group.subscribe(cfg.topic)
            for c in range(cfg.consumers_per_group):
                group.join(f"g{g}-c{c}")
            self.groups.append(group)
            self.delivered[group.group_id] = 0
            for c in range(cfg.consumers_per_group):
                loop.schedule(period + k * spacing, self.MODULE,
                              f"g{g}-c{c}", "poll", self._poll,
                              (group, f"g{g}-c{c}", period))
                k += 1

    def _poll(self, arg) -> None:
        group, member, period = arg
        now = self.loop.now
        nxt = now + period
        if nxt <= self.until:
            self.loop.schedule(nxt, self.MODULE, member, "poll", self._poll, arg)
        res = group.poll(member, self.cfg.max_poll_records)
        self.delivered[group.group_id] += len(res.records)
        for p in group.partitions_of(member, self.cfg.topic):
            last = group.last_delivered.get((self.cfg.topic, p))
            if last is not None:
                group.commit(self.cfg.topic, p, last + 1)


def _setup_power(cfg: ScenarioConfig, fabric: Fabric, loop: EventLoop) -> PsePlane:
    p = cfg.power
    plane = PsePlane(
        midspan_count=p.midspan_count,
        global_budget_mw=int(round(p.global_budget_w * 1000)),
        midspan_budget_mw=None if p.midspan_budget_w is None
        else int(round(p.midspan_budget_w * 1000)),
        detection_window_ps=p.detection_window_ms * PS_PER_MS)
    for tile in fabric.tiles.values():
        if "pd" not in tile.roles:
            continue
        dev = PdDevice(tile.id, requested_class=p.requested_class,
                       base_mw=p.base_mw)
        dev.processing.set_from(0, p.processing_mw)
        dev.peripheral.set_from(0, p.peripheral_mw)
        plane.register(dev)
    if p.overdraw_tile is not None:
        if p.overdraw_tile not in plane.devices:
            raise ConfigurationError(
                f"power.overdraw_tile {p.overdraw_tile!r} is not a powered tile")
        dev = plane.devices[p.overdraw_tile]
        dev.processing.set_from(from_seconds(p.overdraw_at_s),
                                int(round(p.overdraw_w * 1000)))
    for tile_id in sorted(plane.devices):
        plane.allocate(tile_id, at=0)
    for ev in plane.pending_disconnects():
        loop.schedule(ev.at_ps, "power", ev.tile_id, "pd_disconnect",
                      lambda _arg: plane.monitor(loop.now))
    return plane


def run_scenario(cfg: ScenarioConfig, out_root) -> RunResult:
    problems = validate_scenario(cfg)
    if problems:
        raise ConfigurationError("; ".join(problems))
    full_hash = scenario_hash(cfg)
    out_dir = Path(out_root) / full_hash[:12]
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = RngRegistry(cfg.seed)
    fabric = build_default_fabric(cfg.fabric, rng.stream("fabric/cabling"))
    fabric_problems = fabric.validate()
    if fabric_problems:
        raise ConfigurationError("; ".join(fabric_problems))

    trace = open(out_dir / "events.ndjson", "w") if cfg.trace_events else None
    try:
        loop = EventLoop(trace)
        until = from_seconds(cfg.duration_s)

        plane = _setup_power(cfg, fabric, loop) if cfg.power.enabled else None
        online = plane.is_online if plane is not None else (lambda tile_id: True)

        broker = producers = consumers = tracker = None
        load_lookup = None
        if cfg.dataplane.enabled:
            broker = Broker()
            broker.create_topic(cfg.dataplane.topic, cfg.dataplane.partitions,
                                cfg.dataplane.retention_records)
            tracker = LinkLoadTracker(
                from_seconds(cfg.dataplane.load_window_ms / 1e3))
            producers = _Producers(loop, fabric, cfg.dataplane, broker,
                                   tracker, online, until)
            consumers = _Consumers(loop, cfg.dataplane, broker, until)

            def load_lookup(link_id, t):
                bw = fabric.links[link_id].bandwidth_bps
                return tracker.utilization(link_id, t, bw)

        domain = None
        if cfg.timesync.enabled:
            domain = SyncDomain(loop, fabric, cfg.timesync, rng,
                                load_lookup, online)
            domain.start(until)

        loop.run_until(until)
    finally:
        if trace is not None:
            trace.close()

    report: dict = {
        "name": cfg.name,
        "seed": cfg.seed,
        "duration_s": cfg.duration_s,
        "config_hash": full_hash,
        "fabric": {"tiles": len(fabric.tiles), "switches": len(fabric.switches),
                   "links": len(fabric.links)},
    }

    sync_report = None
    if domain is not None:
        domain.report.finalize()
        sync_report = domain.report
        sync_report.to_csv(out_dir / "sync_report.csv")
        report["timesync"] = dict(sync_report.summary(),
                                  exchanges=len(domain.exchanges))

    if plane is not None:
        plane.monitor(until)
        plane.write_ledger_csv(out_dir / "power_ledger.csv")
        report["power"] = plane.summary()

    if broker is not None:
        producers.write_traffic_csv(out_dir / "traffic.csv")
        with open(out_dir / "topics.ndjson", "w") as f:
            f.write(broker.dump_topic(cfg.dataplane.topic))
        report["dataplane"] = {
            "topic": cfg.dataplane.topic,
            "partitions": cfg.dataplane.partitions,
            "published": broker.published,
            "delivered": dict(sorted(consumers.delivered.items())),
            "rebalances": {g.group_id: len(g.rebalances)
                           for g in consumers.groups},
        }

    gain = None
    if cfg.coherent.enabled and sync_report is not None:
        c = cfg.coherent
        sdr = sorted(t.id for t in fabric.tiles.values()
                     if "sdr" in t.roles and online(t.id))
        if c.tile_count is not None:
            sdr = sdr[:c.tile_count]
        try:
            gain = evaluate_beamforming(
                fabric, sync_report, c.carrier_hz, tuple(c.target), c.trials,
                rng.stream(c.stream_label), tiles=sdr,
                phase_noise_sigma_rad=c.phase_noise_sigma_rad,
                tx_power_dbm=c.tx_power_dbm)
            gain.write_csv(out_dir / "gains.csv")
            report["coherent"] = gain.summary()
        except CoherentError as e:
            report["coherent"] = {"error": str(e)}

    mission = None
    if cfg.rover.enabled:
        r = cfg.rover
        plan = plan_sampling(fabric.room, r.resolution_m, r.obstacles,
                             r.z_resolution_m, area=r.area)
        beacons = default_beacons(fabric.room, range_sigma_m=r.beacon_sigma_m,
                                  rate_hz=r.beacon_rate_hz,
                                  outlier_prob=r.outlier_prob)
        battery = Battery(r.battery_capacity_wh, r.battery_peak_w)
        mc = MissionConfig(speed_mps=r.speed_mps, tick_s=r.tick_s)
        mission = MissionRunner(fabric.room, plan, beacons, battery, mc,
                                rng.stream(r.stream_label),
                                obstacles=r.obstacles)
        report["rover"] = mission.run(r.max_duration_s)
        mission.write_log_csv(out_dir / "mission_log.csv")

    with open(out_dir / "resolved.json", "w") as f:
        f.write(resolved_json(cfg) + "\n")
    fabric.export_json(out_dir / "fabric.json")
    with open(out_dir / "report.json", "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")

    return RunResult(out_dir, report, fabric, sync_report, domain, plane,
                     broker, consumers.groups if consumers else None,
                     gain, mission)
