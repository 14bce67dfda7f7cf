"""Mobile sampling platform: acoustic ranging against fixed beacons,
Gauss-Newton position solves, a gated constant-velocity Kalman tracker,
serpentine coverage planning, obstacle ranging, lift metrology and a
battery-aware mission loop.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .core import PS_PER_S, RngStream, SimTime, from_seconds
from .fabric import ConfigurationError, Room

LIFT_MIN_M = 0.55
LIFT_MAX_M = 1.85
LIFT_NOISE_M = 0.02           # uniform +- band of the height sensor
OBSTACLE_QUANTUM_M = 0.003    # ranging resolution, round half to even
OBSTACLE_MIN_M = 0.02
OBSTACLE_MAX_M = 4.0


class RoverError(RuntimeError):
    pass


class TrilaterationError(RoverError):
    def __init__(self, msg: str, last_iterate=None):
        super().__init__(msg)
        self.last_iterate = last_iterate


# --- beacons and ranging ----------------------------------------------------

@dataclass(frozen=True)
class BeaconSet:
    anchors: tuple                      # ((x, y, z), ...) at least four
    range_sigma_m: float = 0.01
    rate_hz: float = 10.0
    outlier_prob: float = 0.0

    def __post_init__(self):
        if len(self.anchors) < 4:
            raise ConfigurationError("at least four beacons are required")
        xy = np.array([a[:2] for a in self.anchors])
        centered = xy - xy.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-9) < 2:
            raise ConfigurationError("beacon ground positions are collinear")


def default_beacons(room: Room, **kw) -> BeaconSet:
    """Four beacons in the upper corners of the room."""
    L, W, H = room.length_m, room.width_m, room.height_m
    return BeaconSet(((0.0, 0.0, H), (L, 0.0, H), (L, W, H), (0.0, W, H)), **kw)


def measure_ranges(pose_xyz, beacons: BeaconSet, rng: RngStream) -> np.ndarray:
    """One round of beacon distances with gaussian noise and, if configured,
    occasional positive outliers of up to a metre (multipath-like)."""
    p = np.asarray(pose_xyz, dtype=float)
    out = np.empty(len(beacons.anchors))
    for i, a in enumerate(beacons.anchors):
        d = float(np.linalg.norm(p - np.asarray(a)))
        d += rng.normal(beacons.range_sigma_m)
        if beacons.outlier_prob > 0 and rng.uniform() < beacons.outlier_prob:
            d += rng.uniform(0.0, 1.0)
        out[i] = d
    return out


@dataclass(frozen=True)
class TrilaterationResult:
    position: tuple[float, float]
    rms_residual_m: float
    iterations: int


def trilaterate(ranges, beacons: BeaconSet, mobile_z: float,
                initial=None, max_iterations: int = 50,
                tolerance_m: float = 1e-6) -> TrilaterationResult:
    """Gauss-Newton least-squares for the (x, y) of a transponder at known
    height.  Converges when the step shrinks below the tolerance; raises
    with the last iterate attached when the iteration budget runs out."""
    anchors = np.asarray(beacons.anchors, dtype=float)
    d = np.asarray(ranges, dtype=float)
    if len(d) != len(anchors):
        raise ConfigurationError("one range per beacon required")
    if len(d) < 3:
        raise ConfigurationError("at least three usable ranges required")
    p = np.array(initial if initial is not None
                 else anchors[:, :2].mean(axis=0), dtype=float)
    for it in range(1, max_iterations + 1):
        pos3 = np.array([p[0], p[1], mobile_z])
        diff = pos3 - anchors
        dist = np.maximum(np.linalg.norm(diff, axis=1), 1e-12)
        r = dist - d
        J = diff[:, :2] / dist[:, None]
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        p = p + step
        if float(np.linalg.norm(step)) < tolerance_m:
            pos3 = np.array([p[0], p[1], mobile_z])
            res = np.linalg.norm(pos3 - anchors, axis=1) - d
            return TrilaterationResult((float(p[0]), float(p[1])),
                                       float(np.sqrt(np.mean(res ** 2))), it)
    raise TrilaterationError(
        f"no convergence in {max_iterations} iterations",
        last_iterate=(float(p[0]), float(p[1])))


# --- tracking ---------------------------------------------------------------

@dataclass
class KalmanState:
    """Constant-velocity planar track: state [x, y, vx, vy]."""
    x: np.ndarray
    P: np.ndarray

    @classmethod
    def at(cls, x: float, y: float, pos_var: float = 1.0,
           vel_var: float = 1.0) -> "KalmanState":
        return cls(np.array([x, y, 0.0, 0.0]),
                   np.diag([pos_var, pos_var, vel_var, vel_var]).astype(float))


_H = np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]])


def kalman_step(state: KalmanState, dt_s: float, measurement=None,
                accel_sigma: float = 0.1, meas_var: float = 1e-4,
                gate: float = 3.0) -> tuple[KalmanState, bool]:
    """Predict one interval and, when a position fix is supplied, gate it by
    Mahalanobis distance and fold it in with the Joseph-form update.

    Returns the new state and whether the measurement was accepted.  The
    incoming covariance must be symmetric positive semidefinite.
    """
    P = state.P
    if np.min(np.linalg.eigvalsh((P + P.T) / 2)) < -1e-12:
        raise RoverError("covariance lost positive semidefiniteness")
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt_s
    q2 = accel_sigma * accel_sigma
    a, b, c = dt_s ** 4 / 4, dt_s ** 3 / 2, dt_s ** 2
    Q = q2 * np.array([[a, 0, b, 0],
                       [0, a, 0, b],
                       [b, 0, c, 0],
                       [0, b, 0, c]])
    x = F @ state.x
    P = F @ P @ F.T + Q
    P = (P + P.T) / 2
    if measurement is None:
        return KalmanState(x, P), False
    z = np.asarray(measurement, dtype=float)
    R = np.eye(2) * meas_var
    y = z - _H @ x
    S = _H @ P @ _H.T + R
    d2 = float(y @ np.linalg.solve(S, y))
    if math.sqrt(max(d2, 0.0)) > gate:
        return KalmanState(x, P), False
    K = P @ _H.T @ np.linalg.inv(S)
    x = x + K @ y
    IKH = np.eye(4) - K @ _H
    P = IKH @ P @ IKH.T + K @ R @ K.T
    return KalmanState(x, (P + P.T) / 2), True


# --- coverage planning ------------------------------------------------------

@dataclass(frozen=True)
class SamplePlan:
    waypoints: tuple            # ((x, y, z), ...) lift stops grouped per cell
    resolution_m: float
    z_stops: tuple
    orientation: str            # row_major | column_major

    def to_json_dict(self) -> dict:
        return {"waypoints": [list(w) for w in self.waypoints],
                "resolution_m": self.resolution_m,
                "z_stops": list(self.z_stops),
                "orientation": self.orientation}

    @classmethod
    def from_json_dict(cls, d: dict) -> "SamplePlan":
        return cls(tuple(tuple(w) for w in d["waypoints"]), d["resolution_m"],
                   tuple(d["z_stops"]), d["orientation"])


def _xy_path_length(cells: list[tuple[float, float]]) -> float:
    return sum(math.dist(cells[i], cells[i + 1]) for i in range(len(cells) - 1))


def _serpentine(cells_xy: list[tuple[float, float]], key_major, key_minor):
    """Order cells by boustrophedon over (major, minor) axes."""
    rows: dict[float, list] = {}
    for c in cells_xy:
        rows.setdefault(key_major(c), []).append(c)
    ordered = []
    for i, major in enumerate(sorted(rows)):
        row = sorted(rows[major], key=key_minor, reverse=(i % 2 == 1))
        ordered.extend(row)
    return ordered


def plan_sampling(room: Room, resolution_m: float, obstacles=(),
                  z_resolution_m: float | None = None,
                  inflation_m: float = 0.25,
                  lift_range=(LIFT_MIN_M, LIFT_MAX_M),
                  area=None) -> SamplePlan:
    """Serpentine coverage of the reachable floor cells, ascending lift
    stops at every cell.  Both row- and column-major sweeps are costed and
    the shorter one wins (row-major on a tie).

    `area` restricts the sweep to an (x0, y0, x1, y1) patch of the floor;
    the default is the whole room.  Obstacles are axis-aligned rectangles
    of the same form, inflated by the platform's half-width; a cell whose
    centre falls inside any inflated rectangle is unreachable.
    """
    if resolution_m <= 0:
        raise ConfigurationError("resolution must be positive")
    zres = z_resolution_m if z_resolution_m is not None else resolution_m
    if zres <= 0:
        raise ConfigurationError("z resolution must be positive")
    ax0, ay0, ax1, ay1 = area if area is not None \
        else (0.0, 0.0, room.length_m, room.width_m)
    if not (0 <= ax0 < ax1 <= room.length_m and 0 <= ay0 < ay1 <= room.width_m):
        raise ConfigurationError("sampling area must lie inside the room")
    lo, hi = lift_range
    z_stops = []
    z = lo
    while z <= hi + 1e-9:
        z_stops.append(round(z, 9))
        z += zres
    cols = int((ax1 - ax0) / resolution_m + 1e-9)
    rows = int((ay1 - ay0) / resolution_m + 1e-9)
    cells = []
    for i in range(cols):
        for j in range(rows):
            cx = ax0 + (i + 0.5) * resolution_m
            cy = ay0 + (j + 0.5) * resolution_m
            blocked = any(x0 - inflation_m <= cx <= x1 + inflation_m
                          and y0 - inflation_m <= cy <= y1 + inflation_m
                          for x0, y0, x1, y1 in obstacles)
            if not blocked:
                cells.append((round(cx, 9), round(cy, 9)))
    if not cells:
        raise ConfigurationError("no reachable cells in the sampling area")
    by_row = _serpentine(cells, key_major=lambda c: c[1], key_minor=lambda c: c[0])
    by_col = _serpentine(cells, key_major=lambda c: c[0], key_minor=lambda c: c[1])
    if _xy_path_length(by_col) < _xy_path_length(by_row):
        ordered, orientation = by_col, "column_major"
    else:
        ordered, orientation = by_row, "row_major"
    waypoints = tuple((x, y, z) for x, y in ordered for z in z_stops)
    return SamplePlan(waypoints, resolution_m, tuple(z_stops), orientation)


# --- sensing ----------------------------------------------------------------

@dataclass(frozen=True)
class ObstacleReading:
    distance_m: float
    flag: str                  # ok | min_range | max_range


def _quantize_range(d: float) -> float:
    return round(d / OBSTACLE_QUANTUM_M) * OBSTACLE_QUANTUM_M


def _ray_to_walls(px, py, dx, dy, room: Room) -> float:
    best = math.inf
    if dx > 0:
        best = min(best, (room.length_m - px) / dx)
    elif dx < 0:
        best = min(best, -px / dx)
    if dy > 0:
        best = min(best, (room.width_m - py) / dy)
    elif dy < 0:
        best = min(best, -py / dy)
    return best


def _ray_to_rect(px, py, dx, dy, rect) -> float:
    """Slab test: distance along (dx, dy) to an axis-aligned rectangle."""
    x0, y0, x1, y1 = rect
    tmin, tmax = -math.inf, math.inf
    for p, d, lo, hi in ((px, dx, x0, x1), (py, dy, y0, y1)):
        if d == 0:
            if not lo <= p <= hi:
                return math.inf
        else:
            t1, t2 = (lo - p) / d, (hi - p) / d
            if t1 > t2:
                t1, t2 = t2, t1
            tmin, tmax = max(tmin, t1), min(tmax, t2)
    if tmax < max(tmin, 0.0):
        return math.inf
    return max(tmin, 0.0)


def sense_obstacles(pose_xy, heading_rad: float, obstacles, room: Room) -> dict:
    """Quantized ranges in the four body directions (front, left, back,
    right), clamped to the sensor's working span with honesty flags."""
    px, py = pose_xy
    out = {}
    for name, ang in (("front", 0.0), ("left", math.pi / 2),
                      ("back", math.pi), ("right", -math.pi / 2)):
        a = heading_rad + ang
        dx, dy = math.cos(a), math.sin(a)
        d = _ray_to_walls(px, py, dx, dy, room)
        for rect in obstacles:
            d = min(d, _ray_to_rect(px, py, dx, dy, rect))
        q = _quantize_range(d) if math.isfinite(d) else math.inf
        if q < OBSTACLE_MIN_M:
            out[name] = ObstacleReading(OBSTACLE_MIN_M, "min_range")
        elif q > OBSTACLE_MAX_M:
            out[name] = ObstacleReading(OBSTACLE_MAX_M, "max_range")
        else:
            out[name] = ObstacleReading(q, "ok")
    return out


@dataclass(frozen=True)
class LiftReading:
    height_m: float
    in_range: bool


def lift_height_measure(true_height_m: float, rng: RngStream) -> LiftReading:
    reading = true_height_m + rng.uniform(-LIFT_NOISE_M, LIFT_NOISE_M)
    return LiftReading(reading, LIFT_MIN_M <= reading <= LIFT_MAX_M)


# --- battery ----------------------------------------------------------------

class PowerDrawError(RoverError):
    pass


class Battery:
    """State-of-charge bookkeeping with a hard draw ceiling and a linear
    terminal-voltage map over the charge span."""

    V_EMPTY = 10.0
    V_FULL = 16.2

    def __init__(self, capacity_wh: float = 170.0, peak_w: float = 480.0,
                 soc: float = 1.0):
        self.capacity_wh = capacity_wh
        self.peak_w = peak_w
        self.soc = soc
        self.drawn_wh = 0.0

    def voltage(self) -> float:
        return self.V_EMPTY + (self.V_FULL - self.V_EMPTY) * self.soc

    def remaining_wh(self) -> float:
        return self.soc * self.capacity_wh

    def time_to_empty_s(self, draw_w: float) -> float:
        self._check(draw_w)
        return self.remaining_wh() * 3600.0 / draw_w

    def _check(self, draw_w: float) -> None:
        if draw_w <= 0:
            raise PowerDrawError("draw must be positive")
        if draw_w > self.peak_w:
            raise PowerDrawError(
                f"{draw_w} W exceeds the {self.peak_w} W peak rating")

    def discharge(self, draw_w: float, dt_s: float) -> None:
        self._check(draw_w)
        wh = draw_w * dt_s / 3600.0
        self.drawn_wh += wh
        self.soc = max(0.0, self.soc - wh / self.capacity_wh)

    def charge(self, supply_w: float, dt_s: float) -> None:
        self.soc = min(1.0, self.soc + supply_w * dt_s / 3600.0 / self.capacity_wh)


# --- mission ----------------------------------------------------------------

@dataclass
class RoverState:
    x: float = 0.5
    y: float = 0.5
    heading_rad: float = 0.0
    lift_m: float = LIFT_MIN_M
    activity: str = "idle"      # idle | moving | sampling | returning | charging


@dataclass
class MissionConfig:
    speed_mps: float = 0.3
    lift_speed_mps: float = 0.1
    dwell_s: float = 1.0
    move_draw_w: float = 80.0
    dwell_draw_w: float = 30.0
    idle_draw_w: float = 15.0
    charger_xy: tuple = (0.5, 0.5)
    recharge_w: float = 60.0
    reserve_safety: float = 2.0
    tick_s: float = 0.1
    resume_soc: float = 0.95


def reserve_wh(pose_xy, cfg: MissionConfig) -> float:
    """Energy floor below which the platform must head home: the cost of
    driving to the charger at nominal draw, times the safety factor."""
    d = math.dist(pose_xy, cfg.charger_xy)
    travel_s = d / cfg.speed_mps
    return travel_s * cfg.move_draw_w / 3600.0 * cfg.reserve_safety


def mission_step(state: RoverState, battery: Battery, cfg: MissionConfig,
                 waypoints_left: int) -> str:
    """Decide the next action: continue the plan, head for the charger,
    keep charging, or finish.

    A platform that has started for the charger stays committed; the
    reserve floor shrinks faster than the charge drains on the way home,
    so re-evaluating it every tick would dither at the threshold.
    """
    if state.activity == "charging":
        return "charge" if battery.soc < cfg.resume_soc else "resume"
    if state.activity == "returning":
        one_way = reserve_wh((state.x, state.y), cfg) / cfg.reserve_safety
        if battery.remaining_wh() < one_way:
            raise RoverError("charger unreachable with remaining charge")
        return "return_to_charge"
    if waypoints_left == 0:
        return "done"
    floor = reserve_wh((state.x, state.y), cfg)
    if battery.remaining_wh() <= floor:
        if battery.remaining_wh() < floor / cfg.reserve_safety:
            raise RoverError("charger unreachable with remaining charge")
        return "return_to_charge"
    return "continue"


@dataclass
class MissionLogRow:
    t_ps: SimTime
    x: float
    y: float
    lift: float
    soc: float
    est_x: float
    est_y: float
    event: str


class MissionRunner:
    """Time-stepped mission execution.

    Advances in fixed ticks; each tick burns energy for the current
    activity, moves the platform, and at the beacon rate folds a ranging
    solve into the tracker.  The decision rule runs between waypoints.
    """

    def __init__(self, room: Room, plan: SamplePlan, beacons: BeaconSet,
                 battery: Battery, cfg: MissionConfig, rng: RngStream,
                 mobile_z: float = 0.2, obstacles=()):
        self.room = room
        self.plan = plan
        self.beacons = beacons
        self.battery = battery
        self.cfg = cfg
        self.rng = rng
        self.mobile_z = mobile_z
        self.obstacles = obstacles
        self.state = RoverState(x=cfg.charger_xy[0], y=cfg.charger_xy[1])
        self.track = KalmanState.at(self.state.x, self.state.y,
                                    pos_var=0.01, vel_var=0.01)
        self.raw_fixes: list[tuple[float, float]] = []
        self.log: list[MissionLogRow] = []
        self.visited = 0
        self.charge_events = 0
        self.min_soc = battery.soc
        self._next_wp = 0
        self._dwell_left = 0.0
        self._t: SimTime = 0
        self._meas_accum = 0.0

    def _log(self, event: str) -> None:
        s = self.state
        self.log.append(MissionLogRow(self._t, s.x, s.y, s.lift_m,
                                      self.battery.soc,
                                      float(self.track.x[0]),
                                      float(self.track.x[1]), event))

    def _track_tick(self, dt_s: float) -> None:
        """Advance the tracker one tick: always predict, fold in a ranging
        fix when one is due (at most one per tick).  The solver is seeded
        from the current estimate, never from the true pose."""
        fix = None
        if self.beacons.rate_hz > 0:
            self._meas_accum += dt_s
            period = 1.0 / self.beacons.rate_hz
            if self._meas_accum >= period - 1e-12:
                self._meas_accum -= period
                pose = (self.state.x, self.state.y, self.mobile_z)
                ranges = measure_ranges(pose, self.beacons, self.rng)
                try:
                    sol = trilaterate(ranges, self.beacons, self.mobile_z,
                                      initial=(float(self.track.x[0]),
                                               float(self.track.x[1])))
                    fix = sol.position
                    self.raw_fixes.append(fix)
                except TrilaterationError:
                    fix = None
        # process noise sized for waypoint turns: the platform reverses
        # 2x speed within a tick, so accel bursts reach a few m/s^2
        self.track, _ = kalman_step(
            self.track, dt_s, fix, accel_sigma=2.0,
            meas_var=(self.beacons.range_sigma_m * 1.5) ** 2)

    def _burn(self, draw_w: float, dt_s: float) -> None:
        self.battery.discharge(draw_w, dt_s)
        self.min_soc = min(self.min_soc, self.battery.soc)

    def _advance_toward(self, tx, ty, dt_s) -> bool:
        s = self.state
        d = math.dist((s.x, s.y), (tx, ty))
        step = self.cfg.speed_mps * dt_s
        if d <= step:
            s.x, s.y = tx, ty
            return True
        s.heading_rad = math.atan2(ty - s.y, tx - s.x)
        s.x += step * math.cos(s.heading_rad)
        s.y += step * math.sin(s.heading_rad)
        return False

    def run(self, max_duration_s: float = 7200.0) -> dict:
        cfg = self.cfg
        dt = cfg.tick_s
        tick_ps = from_seconds(dt)
        deadline_ps = from_seconds(max_duration_s)
        self._log("start")
        while True:
            if self._t >= deadline_ps:
                self._log("timeout")
                break
            left = len(self.plan.waypoints) - self._next_wp
            action = mission_step(self.state, self.battery, cfg, left)
            if action == "done":
                self._log("done")
                break
            self._t += tick_ps
            self._track_tick(dt)
            if action == "charge":
                self.battery.charge(cfg.recharge_w, dt)
                continue
            if action == "resume":
                self.state.activity = "moving"
                self._log("resume")
                continue
            if action == "return_to_charge":
                if self.state.activity != "returning":
                    self.state.activity = "returning"
                    self.charge_events += 1
                    self._log("return_to_charge")
                self._burn(cfg.move_draw_w, dt)
                if self._advance_toward(*cfg.charger_xy, dt):
                    self.state.activity = "charging"
                    self._log("charging")
                continue
            # continue the plan
            wx, wy, wz = self.plan.waypoints[self._next_wp]
            s = self.state
            if (s.x, s.y) != (wx, wy):
                s.activity = "moving"
                self._burn(cfg.move_draw_w, dt)
                self._advance_toward(wx, wy, dt)
                continue
            if abs(s.lift_m - wz) > 1e-9:
                s.activity = "sampling"
                self._burn(cfg.dwell_draw_w, dt)
                step = cfg.lift_speed_mps * dt
                s.lift_m = wz if abs(wz - s.lift_m) <= step else \
                    s.lift_m + math.copysign(step, wz - s.lift_m)
                continue
            if self._dwell_left <= 0:
                self._dwell_left = cfg.dwell_s
            self._burn(cfg.dwell_draw_w, dt)
            self._dwell_left -= dt
            if self._dwell_left <= 1e-9:
                self._dwell_left = 0.0
                self.visited += 1
                self._log("sampled")
                self._next_wp += 1
        return self.summary()

    def summary(self) -> dict:
        return {
            "waypoints": len(self.plan.waypoints),
            "visited": self.visited,
            "charge_events": self.charge_events,
            "min_soc": self.min_soc,
            "final_soc": self.battery.soc,
            "drawn_wh": self.battery.drawn_wh,
            "duration_s": self._t / PS_PER_S,
            "raw_fixes": len(self.raw_fixes),
        }

    def write_log_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["time_ps", "x", "y", "lift", "soc", "est_x", "est_y", "event"])
            for r in self.log:
                w.writerow([r.t_ps, "%.6f" % r.x, "%.6f" % r.y, "%.6f" % r.lift,
                            "%.9f" % r.soc, "%.6f" % r.est_x, "%.6f" % r.est_y,
                            r.event])
