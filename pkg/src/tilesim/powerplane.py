"""Power-over-Ethernet budgeting for the tile fleet.

All power figures are integer milliwatts so budget arithmetic is exact.
Each tile is a powered device with a piecewise-constant draw profile split
into a fixed controller floor, a processing component gated by switch S1 and
a peripheral component gated by S2.  Source-side allocations are charged
against per-midspan budgets and a global budget; sustained draw above the
granted class power disconnects the device after a detection window, and a
disconnected tile stops producing anything until it is re-admitted.
"""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass, field
from typing import Callable

from .core import PS_PER_MS, PS_PER_S, SimTime
from .fabric import ConfigurationError

MW_PER_W = 1000


@dataclass(frozen=True)
class PowerClass:
    class_id: int
    pd_mw: int    # power the device may draw
    pse_mw: int   # source-side allocation charged to budgets


POWER_CLASSES: dict[int, PowerClass] = {
    0: PowerClass(0, 13_000, 15_400),
    1: PowerClass(1, 3_840, 4_000),
    2: PowerClass(2, 6_490, 7_000),
    3: PowerClass(3, 13_000, 15_400),
    4: PowerClass(4, 25_500, 30_000),
    5: PowerClass(5, 40_000, 45_000),
    6: PowerClass(6, 51_000, 60_000),
    7: PowerClass(7, 62_000, 75_000),
    8: PowerClass(8, 71_300, 90_000),
}

# negotiated classes in ascending device-power order; the legacy class 0 is
# only ever assigned explicitly, never by measurement
_AUTOCLASS_ORDER = sorted((c for c in POWER_CLASSES.values() if c.class_id != 0),
                          key=lambda c: (c.pd_mw, c.class_id))

DEFAULT_GLOBAL_BUDGET_MW = 9_000_000
DEFAULT_DETECTION_WINDOW_PS = 75 * PS_PER_MS
IDLE_FLOOR_MW = 500


class StepSeries:
    """Right-continuous step function of sim time with integer values."""

    def __init__(self, initial: int = 0):
        self._times: list[SimTime] = [0]
        self._values: list[int] = [initial]

    def set_from(self, t: SimTime, value: int) -> None:
        if t < self._times[-1]:
            raise ConfigurationError("profile steps must be time-ordered")
        if t == self._times[-1]:
            self._values[-1] = value
        else:
            self._times.append(t)
            self._values.append(value)

    def value_at(self, t: SimTime) -> int:
        return self._values[bisect.bisect_right(self._times, t) - 1]

    @property
    def breakpoints(self) -> list[SimTime]:
        return list(self._times)


@dataclass
class PdDevice:
    tile_id: str
    requested_class: int | None = 3      # None selects classification by measurement
    base_mw: int = IDLE_FLOOR_MW
    processing: StepSeries = field(default_factory=StepSeries)
    peripheral: StepSeries = field(default_factory=StepSeries)
    s1: StepSeries = field(default_factory=lambda: StepSeries(1))
    s2: StepSeries = field(default_factory=lambda: StepSeries(1))
    granted: PowerClass | None = None
    granted_at: SimTime = 0
    online: bool = False
    disconnected_at: SimTime | None = None

    def consumption_mw(self, t: SimTime) -> int:
        if not self.online:
            return 0
        draw = self.base_mw
        if self.s1.value_at(t):
            draw += self.processing.value_at(t)
        if self.s2.value_at(t):
            draw += self.peripheral.value_at(t)
        return draw

    def _draw_if_powered(self, t: SimTime) -> int:
        draw = self.base_mw
        if self.s1.value_at(t):
            draw += self.processing.value_at(t)
        if self.s2.value_at(t):
            draw += self.peripheral.value_at(t)
        return draw

    def breakpoints(self) -> list[SimTime]:
        pts = set(self.processing.breakpoints) | set(self.peripheral.breakpoints) \
            | set(self.s1.breakpoints) | set(self.s2.breakpoints)
        return sorted(pts)


def classify(pd: PdDevice, at: SimTime = 0,
             startup_window_ps: SimTime = PS_PER_S) -> PowerClass:
    """Pick the device's power class before it is energized.

    A fixed request maps straight through the table; measurement-based
    classification takes the peak draw over the startup window and picks the
    smallest negotiated class that covers it.
    """
    if pd.online:
        raise ConfigurationError(f"{pd.tile_id}: classify while powered")
    if pd.requested_class is not None:
        try:
            return POWER_CLASSES[pd.requested_class]
        except KeyError:
            raise ConfigurationError(
                f"{pd.tile_id}: no power class {pd.requested_class}") from None
    end = at + startup_window_ps
    probe = [at, end] + [t for t in pd.breakpoints() if at < t <= end]
    peak = max(pd._draw_if_powered(t) for t in probe)
    for cls in _AUTOCLASS_ORDER:
        if cls.pd_mw >= peak:
            return cls
    raise ConfigurationError(
        f"{pd.tile_id}: startup draw {peak} mW exceeds every class")


@dataclass(frozen=True)
class Grant:
    tile_id: str
    power_class: PowerClass
    midspan_id: str


@dataclass(frozen=True)
class Denial:
    tile_id: str
    power_class: PowerClass
    midspan_id: str
    remaining_midspan_mw: int
    remaining_global_mw: int


@dataclass(frozen=True)
class DisconnectEvent:
    tile_id: str
    at_ps: SimTime
    over_mw: int
    limit_mw: int


@dataclass
class Midspan:
    id: str
    budget_mw: int
    used_mw: int = 0


class PsePlane:
    """Sourcing side: midspans, budgets, the allocation ledger and the
    consumption monitor."""

    def __init__(self, midspan_count: int = 4,
                 global_budget_mw: int = DEFAULT_GLOBAL_BUDGET_MW,
                 midspan_budget_mw: int | None = None,
                 detection_window_ps: SimTime = DEFAULT_DETECTION_WINDOW_PS):
        if midspan_count < 1:
            raise ConfigurationError("at least one midspan is required")
        per = midspan_budget_mw if midspan_budget_mw is not None \
            else global_budget_mw // midspan_count
        self.midspans = [Midspan(f"ms{i}", per) for i in range(midspan_count)]
        self.global_budget_mw = global_budget_mw
        self.detection_window_ps = detection_window_ps
        self.devices: dict[str, PdDevice] = {}
        self._midspan_of: dict[str, Midspan] = {}
        self.ledger: list[tuple] = []   # (t, tile, class_id, consumption_mw, event)
        self.on_disconnect: list[Callable[[str, SimTime], None]] = []
        self._applied_disconnects: set[str] = set()

    # -- registration / allocation --

    def register(self, pd: PdDevice) -> None:
        if pd.tile_id in self.devices:
            raise ConfigurationError(f"{pd.tile_id}: registered twice")
        self.devices[pd.tile_id] = pd
        self._midspan_of[pd.tile_id] = \
            self.midspans[(len(self.devices) - 1) % len(self.midspans)]

    def global_used_mw(self) -> int:
        return sum(ms.used_mw for ms in self.midspans)

    def allocate(self, tile_id: str, at: SimTime = 0) -> Grant | Denial:
        pd = self.devices[tile_id]
        if pd.granted is not None:
            raise ConfigurationError(f"{tile_id}: already granted")
        cls = classify(pd, at)
        ms = self._midspan_of[tile_id]
        rem_ms = ms.budget_mw - ms.used_mw
        rem_gl = self.global_budget_mw - self.global_used_mw()
        if cls.pse_mw > rem_ms or cls.pse_mw > rem_gl:
            self.ledger.append((at, tile_id, cls.class_id, 0, "deny"))
            return Denial(tile_id, cls, ms.id, rem_ms, rem_gl)
        ms.used_mw += cls.pse_mw
        pd.granted = cls
        pd.granted_at = at
        pd.online = True
        pd.disconnected_at = None
        self._applied_disconnects.discard(tile_id)
        self.ledger.append((at, tile_id, cls.class_id, pd.consumption_mw(at), "grant"))
        return Grant(tile_id, cls, ms.id)

    def disconnect(self, tile_id: str, at: SimTime, reason: str = "overdraw") -> None:
        pd = self.devices[tile_id]
        if not pd.online:
            return
        ms = self._midspan_of[tile_id]
        ms.used_mw -= pd.granted.pse_mw
        self.ledger.append((at, tile_id, pd.granted.class_id,
                            pd.consumption_mw(at), f"disconnect:{reason}"))
        pd.granted = None
        pd.online = False
        pd.disconnected_at = at
        for cb in self.on_disconnect:
            cb(tile_id, at)

    def is_online(self, tile_id: str) -> bool:
        pd = self.devices.get(tile_id)
        return True if pd is None else pd.online

    # -- monitoring --

    def find_disconnect_time(self, pd: PdDevice) -> DisconnectEvent | None:
        """Earliest instant the device has been over its grant for a full
        detection window, computed exactly from the profile breakpoints."""
        if pd.granted is None:
            return None
        limit = pd.granted.pd_mw
        # draw before the grant instant cannot count against this grant
        pts = [pd.granted_at] + [t for t in pd.breakpoints() if t > pd.granted_at]
        run_start = None
        for i, t in enumerate(pts):
            draw = pd._draw_if_powered(t)
            if draw > limit:
                if run_start is None:
                    run_start = t
                nxt = pts[i + 1] if i + 1 < len(pts) else None
                if nxt is None or nxt - run_start >= self.detection_window_ps:
                    at = run_start + self.detection_window_ps
                    return DisconnectEvent(pd.tile_id, at,
                                           pd._draw_if_powered(run_start), limit)
            else:
                run_start = None
        return None

    def monitor(self, true_time: SimTime) -> list[DisconnectEvent]:
        """Apply every disconnect that has come due by true_time."""
        fired = []
        for tile_id in sorted(self.devices):
            pd = self.devices[tile_id]
            if tile_id in self._applied_disconnects or not pd.online:
                continue
            ev = self.find_disconnect_time(pd)
            if ev is not None and ev.at_ps <= true_time:
                self._applied_disconnects.add(tile_id)
                self.disconnect(tile_id, ev.at_ps)
                fired.append(ev)
        return fired

    def pending_disconnects(self) -> list[DisconnectEvent]:
        """Disconnects implied by the profiles as currently known."""
        out = []
        for tile_id in sorted(self.devices):
            pd = self.devices[tile_id]
            if pd.online and tile_id not in self._applied_disconnects:
                ev = self.find_disconnect_time(pd)
                if ev is not None:
                    out.append(ev)
        return out

    # -- device controls --

    def toggle_switch(self, tile_id: str, which: str, state: bool,
                      at: SimTime = 0) -> None:
        pd = self.devices[tile_id]
        if which not in ("s1", "s2"):
            raise ConfigurationError(f"unknown switch {which!r}")
        series = pd.s1 if which == "s1" else pd.s2
        series.set_from(at, 1 if state else 0)
        self.ledger.append((at, tile_id,
                            pd.granted.class_id if pd.granted else -1,
                            pd.consumption_mw(at), f"toggle:{which}={int(state)}"))

    def write_ledger_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["time_ps", "tile", "class", "consumption_w", "event"])
            for t, tile, cls, mw, event in self.ledger:
                w.writerow([t, tile, cls, "%.3f" % (mw / MW_PER_W), event])

    def summary(self) -> dict:
        grants = sum(1 for r in self.ledger if r[4] == "grant")
        denials = sum(1 for r in self.ledger if r[4] == "deny")
        disconnects = sum(1 for r in self.ledger if r[4].startswith("disconnect"))
        return {
            "total_granted_w": self.global_used_mw() / MW_PER_W,
            "global_budget_w": self.global_budget_mw / MW_PER_W,
            "midspans": [{"id": m.id, "budget_w": m.budget_mw / MW_PER_W,
                          "used_w": m.used_mw / MW_PER_W} for m in self.midspans],
            "grants": grants,
            "denials": denials,
            "disconnects": disconnects,
        }


def allocate(pse: PsePlane, tile_id: str, at: SimTime = 0) -> Grant | Denial:
    return pse.allocate(tile_id, at)


def monitor(pse: PsePlane, true_time: SimTime) -> list[DisconnectEvent]:
    return pse.monitor(true_time)


def toggle_switch(pse: PsePlane, tile_id: str, which: str, state: bool,
                  at: SimTime = 0) -> None:
    pse.toggle_switch(tile_id, which, state, at)
