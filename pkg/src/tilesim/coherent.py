"""Coherent multi-tile transmission scored in the phase domain.

Each transmitting tile contributes a unit phasor whose phase is the carrier
geometry term plus the phase its residual timing error produces; conjugate
weighting is applied as a phase subtraction of the same stored geometry
values, so with perfect timing the cancellation is exact and the array gain
is exactly N squared.  Timing errors are drawn per trial from the empirical
post-convergence residual pool of each tile's disciplined clock.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .core import RngStream
from .fabric import ConfigurationError, Fabric

SPEED_OF_LIGHT_M_S = 299_792_458.0
CARRIER_MIN_HZ = 70e6
CARRIER_MAX_HZ = 6e9
MAX_TX_POWER_DBM = 20.0


class CoherentError(RuntimeError):
    """Evaluation cannot proceed (missing sync data, empty array, ...)."""


@dataclass(frozen=True)
class SdrNode:
    tile_id: str
    carrier_hz: float
    tx_power_dbm: float = 10.0

    def __post_init__(self):
        if not CARRIER_MIN_HZ <= self.carrier_hz <= CARRIER_MAX_HZ:
            raise ConfigurationError(
                f"carrier {self.carrier_hz:g} Hz outside the radio's "
                f"{CARRIER_MIN_HZ:g}-{CARRIER_MAX_HZ:g} Hz range")
        if self.tx_power_dbm > MAX_TX_POWER_DBM:
            raise ConfigurationError(
                f"tx power {self.tx_power_dbm} dBm above the {MAX_TX_POWER_DBM} dBm cap")


def wrap_phase(phi):
    """Wrap to (-pi, pi]; works on scalars and arrays."""
    return np.pi - np.mod(np.pi - np.asarray(phi), 2 * np.pi)


def phase_from_timing(delta_t_s, carrier_hz: float, noise_sigma_rad: float = 0.0,
                      rng: RngStream | None = None):
    """Phase a timing error produces at the carrier, plus optional phase noise."""
    if not CARRIER_MIN_HZ <= carrier_hz <= CARRIER_MAX_HZ:
        raise ConfigurationError(
            f"carrier {carrier_hz:g} Hz outside the radio's "
            f"{CARRIER_MIN_HZ:g}-{CARRIER_MAX_HZ:g} Hz range")
    phi = 2 * np.pi * carrier_hz * np.asarray(delta_t_s, dtype=float)
    if noise_sigma_rad:
        if rng is None:
            raise ConfigurationError("phase noise requested without a random stream")
        if phi.ndim:
            phi = phi + rng.normal_array(phi.size, noise_sigma_rad).reshape(phi.shape)
        else:
            phi = phi + rng.normal(noise_sigma_rad)
    wrapped = wrap_phase(phi)
    return float(wrapped) if np.ndim(wrapped) == 0 else wrapped


def steering_phase(tile_center, target, carrier_hz: float) -> float:
    """Carrier phase accumulated over the straight path tile -> target."""
    d = math.dist(tile_center, target)
    return float(wrap_phase(2 * np.pi * d * carrier_hz / SPEED_OF_LIGHT_M_S))


def coherent_gain(phases) -> float:
    """|sum of unit phasors|^2 for one realization."""
    phases = np.asarray(phases, dtype=float)
    if phases.size == 0:
        raise CoherentError("no transmitters")
    s = np.exp(1j * phases).sum()
    return float(s.real * s.real + s.imag * s.imag)


def coherent_gain_batch(phases: np.ndarray) -> np.ndarray:
    """Row-wise gain for a (trials, n) phase matrix."""
    s = np.exp(1j * phases).sum(axis=1)
    return (s.real * s.real + s.imag * s.imag)


def expected_gain(n: int, sigma_rad: float) -> float:
    """Mean gain for independent zero-mean gaussian phase errors."""
    return n + n * (n - 1) * math.exp(-sigma_rad * sigma_rad)


@dataclass
class GainResult:
    n_transmitters: int
    carrier_hz: float
    trials: int
    mean_gain: float
    var_gain: float
    efficiency: float        # mean over the perfect-sync gain n^2
    gains: np.ndarray

    def summary(self) -> dict:
        return {"n_transmitters": self.n_transmitters,
                "carrier_hz": self.carrier_hz,
                "trials": self.trials,
                "mean_gain": self.mean_gain,
                "var_gain": self.var_gain,
                "efficiency": self.efficiency}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["trial", "gain"])
            for i, g in enumerate(self.gains):
                w.writerow([i, repr(float(g))])


def evaluate_beamforming(fabric: Fabric, sync_report, carrier_hz: float,
                         target, trials: int, rng: RngStream,
                         tiles: list[str] | None = None,
                         phase_noise_sigma_rad: float = 0.0,
                         tx_power_dbm: float = 10.0) -> GainResult:
    """Monte Carlo gain of the tile array toward a target point.

    Geometry enters through the steering phase of each tile and is removed
    by its own conjugate weight, so only timing and phase noise remain.  A
    per-trial substream keyed by trial index drives the draws, making every
    trial reproducible in isolation.
    """
    room = fabric.room
    x, y, z = target
    if not (0 <= x <= room.length_m and 0 <= y <= room.width_m and 0 <= z <= room.height_m):
        raise ConfigurationError(f"target {target} is outside the room")
    if trials < 1:
        raise ConfigurationError("at least one trial required")
    if tiles is None:
        tiles = [t.id for t in fabric.tiles.values() if "sdr" in t.roles]
    if not tiles:
        raise CoherentError("no transmitting tiles")
    nodes = [SdrNode(t, carrier_hz, tx_power_dbm) for t in tiles]

    pools = []
    missing = []
    for t in tiles:
        samples = sync_report.post_convergence(t)
        if len(samples) == 0:
            missing.append(t)
        else:
            pools.append(np.asarray(samples) * 1e-12)   # ps -> s
    if missing:
        raise CoherentError(f"no converged sync data for: {missing}")
    n = len(tiles)
    geo = np.array([steering_phase(fabric.tiles[t].center, target, carrier_hz)
                    for t in tiles])
    weights = geo   # conjugate weighting: identical stored values cancel exactly

    min_pool = min(len(p) for p in pools)
    pool_mat = np.stack([p[:min_pool] for p in pools])

    gains = np.empty(trials)
    for i in range(trials):
        sub = rng.substream(i)
        idx = sub.integer_array(0, min_pool, n)
        dt = pool_mat[np.arange(n), idx]
        phi = geo - weights + wrap_phase(2 * np.pi * carrier_hz * dt)
        if phase_noise_sigma_rad:
            phi = phi + sub.normal_array(n, phase_noise_sigma_rad)
        gains[i] = coherent_gain(phi)

    mean = float(gains.mean())
    return GainResult(n, carrier_hz, trials, mean, float(gains.var()),
                      mean / (n * n), gains)
