"""Deterministic discrete-event engine.

Simulated time is an integer count of picoseconds since the run epoch, kept
in plain Python ints but bounded to the unsigned 64-bit range at the API
boundary so arithmetic is exact and portable.  Events fire in (time,
insertion order), which makes every run replayable bit-for-bit.  Randomness
comes from named streams backed by a counter-based bit generator, so the
value at a given draw index depends only on (seed, stream name, draw kind,
index) and never on what other streams did.
"""

from __future__ import annotations

import hashlib
import heapq
from dataclasses import dataclass, field
from typing import Any, Callable, IO

import numpy as np
from numpy.random import Generator, Philox

SimTime = int  # picoseconds

PS_PER_NS = 1_000
PS_PER_US = 1_000_000
PS_PER_MS = 1_000_000_000
PS_PER_S = 1_000_000_000_000

MAX_SIM_TIME = 2**64 - 1


def from_seconds(t_s: float) -> SimTime:
    """Seconds to integer picoseconds, rounded to nearest."""
    return int(round(t_s * PS_PER_S))


def to_seconds(t_ps: SimTime) -> float:
    return t_ps / PS_PER_S


class SimulationError(RuntimeError):
    """Engine misuse (scheduling into the past, time overflow, ...)."""


@dataclass(slots=True)
class Event:
    fire_at: SimTime
    seq: int            # insertion order, breaks ties FIFO
    module: str
    target: str
    action: str
    fn: Callable[[Any], None]
    arg: Any = None


@dataclass
class RunStats:
    processed: int = 0
    by_module: dict[str, int] = field(default_factory=dict)
    last_fire_at: SimTime = 0


class EventLoop:
    """Single-threaded event queue ordered by (fire_at, insertion seq).

    Handlers may schedule further events at or after the current time.
    When a trace sink is given, one JSON line per processed event is
    written; identical runs produce identical trace bytes.
    """

    def __init__(self, trace: IO[str] | None = None):
        self._heap: list[tuple[SimTime, int, Event]] = []
        self._seq = 0
        self._now: SimTime = 0
        self._trace = trace

    @property
    def now(self) -> SimTime:
        return self._now

    def schedule(self, fire_at: SimTime, module: str, target: str, action: str,
                 fn: Callable[[Any], None], arg: Any = None) -> Event:
        if not (0 <= fire_at <= MAX_SIM_TIME):
            raise SimulationError(f"fire_at {fire_at} outside the 64-bit time range")
        if fire_at < self._now:
            raise SimulationError(
                f"event {action!r} scheduled at {fire_at} ps, before now={self._now} ps")
        ev = Event(fire_at, self._seq, module, target, action, fn, arg)
        self._seq += 1
        heapq.heappush(self._heap, (fire_at, ev.seq, ev))
        return ev

    def run_until(self, t_end: SimTime) -> RunStats:
        """Process every event with fire_at <= t_end, then advance now to t_end."""
        if t_end < self._now:
            raise SimulationError(
                f"run_until({t_end}) would move time backwards from {self._now}")
        stats = RunStats()
        heap = self._heap
        trace = self._trace
        while heap and heap[0][0] <= t_end:
            fire_at, _, ev = heapq.heappop(heap)
            self._now = fire_at
            if trace is not None:
                trace.write('{"t":%d,"module":"%s","target":"%s","action":"%s"}\n'
                            % (fire_at, ev.module, ev.target, ev.action))
            ev.fn(ev.arg)
            stats.processed += 1
            stats.by_module[ev.module] = stats.by_module.get(ev.module, 0) + 1
            stats.last_fire_at = fire_at
        if t_end > self._now:
            self._now = t_end
        return stats

    def pending(self) -> int:
        return len(self._heap)


def _philox_key(seed: int, name: str) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x1f{name}".encode()).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


class RngStream:
    """Named deterministic random stream.

    algorithm: counter-based Philox 4x64 keyed by SHA-256(seed, name).
    Each draw kind (normal / uniform / integers) runs on its own derived
    key, so the i-th normal drawn from a stream is the same value no matter
    how many uniforms were drawn in between.  Scalar gaussian and uniform
    draws are served from refillable blocks purely as a speed measure; the
    served sequence is identical to drawing one at a time.
    """

    _BLOCK = 2048

    def __init__(self, seed: int, name: str):
        self.seed = seed
        self.name = name
        self.algorithm = "philox4x64"
        self._gens: dict[str, Generator] = {}
        self._zbuf: np.ndarray | None = None
        self._zi = 0
        self._ubuf: np.ndarray | None = None
        self._ui = 0

    def _gen(self, kind: str) -> Generator:
        g = self._gens.get(kind)
        if g is None:
            g = Generator(Philox(key=_philox_key(self.seed, f"{self.name}\x1f{kind}")))
            self._gens[kind] = g
        return g

    def normal(self, scale: float = 1.0, loc: float = 0.0) -> float:
        if self._zbuf is None or self._zi >= len(self._zbuf):
            self._zbuf = self._gen("normal").standard_normal(self._BLOCK)
            self._zi = 0
        z = self._zbuf[self._zi]
        self._zi += 1
        return loc + scale * float(z)

    def normal_array(self, size: int, scale: float = 1.0) -> np.ndarray:
        # bypasses the scalar block cache on purpose: array users own the stream
        return self._gen("normal_array").standard_normal(size) * scale

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        if self._ubuf is None or self._ui >= len(self._ubuf):
            self._ubuf = self._gen("uniform").random(self._BLOCK)
            self._ui = 0
        u = self._ubuf[self._ui]
        self._ui += 1
        return low + (high - low) * float(u)

    def integers(self, low: int, high: int) -> int:
        """One integer in [low, high)."""
        return int(self._gen("integers").integers(low, high))

    def integer_array(self, low: int, high: int, size: int) -> np.ndarray:
        return self._gen("integer_array").integers(low, high, size=size)

    def substream(self, label: object) -> "RngStream":
        return RngStream(self.seed, f"{self.name}/{label}")


class RngRegistry:
    """Hands out named streams for one master seed, caching by name."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, RngStream] = {}

    def stream(self, name: str) -> RngStream:
        s = self._streams.get(name)
        if s is None:
            s = RngStream(self.seed, name)
            self._streams[name] = s
        return s
