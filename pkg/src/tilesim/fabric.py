"""Room and network fabric: tile placement on mounting surfaces, switch and
cabling topology, and backbone capture/playback channel accounting.

Geometry convention: the room interior is the axis-aligned box
[0, length] x [0, width] x [0, height] in metres.  Panels mount on the
structure's faces, which overhang the interior opening slightly; each face
carries its own (u, v) coordinate frame and the default face sizes are whole
multiples of the panel cell so the stock panel counts fit exactly.  Tile
rectangles are tracked in integer millimetres so overlap checks are exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

from .core import RngStream

SURFACE_NAMES = ("wall_a", "wall_b", "floor", "ceiling")

TILE_LONG_MM = 1200
TILE_SHORT_MM = 600

FABRIC_SCHEMA_VERSION = 1

DEFAULT_ROLES = frozenset({"clock", "pd", "sdr", "producer"})


class ConfigurationError(ValueError):
    """A requested fabric cannot be built as specified."""


@dataclass(frozen=True)
class Room:
    length_m: float = 8.0
    width_m: float = 4.0
    height_m: float = 2.4

    def __post_init__(self):
        if min(self.length_m, self.width_m, self.height_m) <= 0:
            raise ConfigurationError("room dimensions must be positive")

    @property
    def center(self) -> tuple[float, float, float]:
        return (self.length_m / 2, self.width_m / 2, self.height_m / 2)


@dataclass(frozen=True)
class TileNode:
    id: str
    surface: str
    center: tuple[float, float, float]   # metres, room frame
    normal: tuple[float, float, float]   # unit, points into the room
    rect_mm: tuple[int, int, int, int]   # (u0, v0, u1, v1) on the owning face
    roles: frozenset[str] = DEFAULT_ROLES


@dataclass
class SwitchNode:
    id: str
    port_count: int = 48
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    transparent_clock: bool = True
    attached: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class Link:
    """Point-to-point cable.  Delay is symmetric unless an extra one-way
    term is set explicitly (extra_ab applies in the a -> b direction)."""
    id: str
    a: str
    b: str
    length_m: float
    base_delay_ps: int
    extra_ab_ps: int = 0
    extra_ba_ps: int = 0
    jitter_sigma_ns: float = 0.0
    jitter_shape: float = 0.5
    bandwidth_bps: int = 10_000_000_000

    def delay_ps(self, from_a: bool) -> int:
        return self.base_delay_ps + (self.extra_ab_ps if from_a else self.extra_ba_ps)


@dataclass(frozen=True)
class DaqAssignment:
    grant_id: str
    kind: str
    count: int
    first_channel: int


@dataclass(frozen=True)
class DaqRejection:
    kind: str
    requested: int
    remaining: int


class DaqLedger:
    """Capture/playback channel bookkeeping for the central backbone."""

    ADC_RATE_SPS = 1_250_000
    SAMPLE_BITS = 16

    def __init__(self, adc_channels: int = 192, dac_channels: int = 48):
        self.capacity = {"adc": adc_channels, "dac": dac_channels}
        self.used = {"adc": 0, "dac": 0}
        self._grants: dict[str, tuple[str, int]] = {}
        self._next = 0

    def assign(self, kind: str, count: int) -> DaqAssignment | DaqRejection:
        if kind not in self.capacity:
            raise ConfigurationError(f"unknown channel kind {kind!r}")
        if count < 1:
            raise ConfigurationError("channel request must be at least 1")
        remaining = self.capacity[kind] - self.used[kind]
        if count > remaining:
            return DaqRejection(kind, count, remaining)
        grant = DaqAssignment(f"g{self._next}", kind, count, self.used[kind])
        self._next += 1
        self.used[kind] += count
        self._grants[grant.grant_id] = (kind, count)
        return grant

    def release(self, grant_id: str) -> None:
        kind, count = self._grants.pop(grant_id)
        self.used[kind] -= count


def daq_assign(fabric: "Fabric", kind: str, count: int) -> DaqAssignment | DaqRejection:
    return fabric.daq.assign(kind, count)


# --- surface packing -------------------------------------------------------

def _grid_cells(ul: int, vl: int, cw: int, ch: int, v0: int = 0) -> list[tuple[int, int, int, int]]:
    cols = ul // cw
    rows = (vl - v0) // ch
    cells = []
    for r in range(rows):
        for c in range(cols):
            u0, vv0 = c * cw, v0 + r * ch
            cells.append((u0, vv0, u0 + cw, vv0 + ch))
    return cells


def pack_surface(u_len_m: float, v_len_m: float, count: int) -> list[tuple[int, int, int, int]]:
    """Non-overlapping panel rectangles on one face, row-major from the origin.

    Tries an upright grid first (short edge along u), then the rotated grid,
    then grids with the leftover strip filled by rotated rows.  Raises when
    no arrangement holds the requested count.
    """
    ul = round(u_len_m * 1000)
    vl = round(v_len_m * 1000)
    if count == 0:
        return []
    arrangements = [
        _grid_cells(ul, vl, TILE_SHORT_MM, TILE_LONG_MM),
        _grid_cells(ul, vl, TILE_LONG_MM, TILE_SHORT_MM),
    ]
    # mixed: full upright rows, then rotated rows in the leftover strip (and vice versa)
    strip = (vl // TILE_LONG_MM) * TILE_LONG_MM
    arrangements.append(arrangements[0] + _grid_cells(ul, vl, TILE_LONG_MM, TILE_SHORT_MM, v0=strip))
    strip = (vl // TILE_SHORT_MM) * TILE_SHORT_MM
    arrangements.append(arrangements[1] + _grid_cells(ul, vl, TILE_SHORT_MM, TILE_LONG_MM, v0=strip))
    for cells in arrangements:
        if len(cells) >= count:
            return cells[:count]
    best = max(len(c) for c in arrangements)
    raise ConfigurationError(
        f"cannot place {count} panels on a {u_len_m} x {v_len_m} m face without "
        f"overlap (capacity {best})")


@dataclass(frozen=True)
class _Face:
    name: str
    origin: tuple[float, float, float]
    u_axis: tuple[float, float, float]
    v_axis: tuple[float, float, float]
    normal: tuple[float, float, float]
    u_len_m: float
    v_len_m: float


# Default mounting-face sizes.  The faces belong to the support structure and
# overhang the interior opening; they are whole multiples of the panel cell:
# walls 14x2 upright cells (28 each), floor 13x4 (52), ceiling 14x3 (42-cell
# capacity, of which the stock populates 32 to land the 140-panel total).
DEFAULT_FACE_DIMS = {
    "wall_a": (8.4, 2.4),
    "wall_b": (8.4, 2.4),
    "floor": (7.8, 4.8),
    "ceiling": (8.4, 3.6),
}


def _faces(room: Room, dims: dict[str, tuple[float, float]]) -> dict[str, _Face]:
    L, W, H = room.length_m, room.width_m, room.height_m
    f = {}
    ua, va = dims["wall_a"]
    f["wall_a"] = _Face("wall_a", ((L - ua) / 2, 0.0, (H - va) / 2),
                        (1, 0, 0), (0, 0, 1), (0, 1, 0), ua, va)
    ub, vb = dims["wall_b"]
    f["wall_b"] = _Face("wall_b", ((L - ub) / 2, W, (H - vb) / 2),
                        (1, 0, 0), (0, 0, 1), (0, -1, 0), ub, vb)
    uf, vf = dims["floor"]
    f["floor"] = _Face("floor", ((L - uf) / 2, (W - vf) / 2, 0.0),
                       (1, 0, 0), (0, 1, 0), (0, 0, 1), uf, vf)
    uc, vc = dims["ceiling"]
    f["ceiling"] = _Face("ceiling", ((L - uc) / 2, (W - vc) / 2, H),
                         (1, 0, 0), (0, 1, 0), (0, 0, -1), uc, vc)
    return f


# --- fabric ----------------------------------------------------------------

@dataclass
class FabricConfig:
    room: Room = field(default_factory=Room)
    counts: dict = field(default_factory=lambda: {
        "wall_a": 28, "wall_b": 28, "floor": 52, "ceiling": 32})
    face_dims: dict = field(default_factory=dict)   # overrides of DEFAULT_FACE_DIMS
    switch_count: int = 4
    switch_ports: int = 48
    max_tile_connections: int = 192
    prop_ns_per_m: float = 5.0
    slack_m: float = 2.0
    cable_model: str = "manhattan"      # manhattan | uniform | fixed
    cable_min_m: float = 1.0
    cable_max_m: float = 40.0
    cable_fixed_m: float = 10.0
    tile_jitter_sigma_ns: float = 100.0
    trunk_jitter_sigma_ns: float = 20.0
    jitter_shape: float = 0.5
    bandwidth_bps: int = 10_000_000_000
    adc_channels: int = 192
    dac_channels: int = 48


class Fabric:
    def __init__(self, config: FabricConfig, tiles: dict[str, TileNode],
                 switches: dict[str, SwitchNode], links: dict[str, Link],
                 central_id: str = "central"):
        self.config = config
        self.room = config.room
        self.tiles = tiles
        self.switches = switches
        self.links = links
        self.central_id = central_id
        self.daq = DaqLedger(config.adc_channels, config.dac_channels)
        self._tile_switch = {t: sw.id for sw in switches.values() for t in sw.attached}
        self._tile_link = {lk.b: lk.id for lk in links.values() if lk.b in tiles}
        self._trunk = {lk.b: lk.id for lk in links.values() if lk.b in switches}

    def tile_position(self, tile_id: str) -> tuple[tuple[float, float, float],
                                                   tuple[float, float, float]]:
        try:
            t = self.tiles[tile_id]
        except KeyError:
            raise LookupError(f"unknown tile id {tile_id!r}") from None
        return t.center, t.normal

    def switch_for_tile(self, tile_id: str) -> str:
        return self._tile_switch[tile_id]

    def tile_link(self, tile_id: str) -> Link:
        return self.links[self._tile_link[tile_id]]

    def trunk_link(self, switch_id: str) -> Link:
        return self.links[self._trunk[switch_id]]

    def with_link_overrides(self, overrides: dict[str, dict]) -> "Fabric":
        """New fabric with per-link field replacements (asymmetry injection etc.)."""
        links = dict(self.links)
        for link_id, fields in overrides.items():
            if link_id not in links:
                raise ConfigurationError(f"unknown link {link_id!r}")
            links[link_id] = replace(links[link_id], **fields)
        return Fabric(self.config, self.tiles, self.switches, links, self.central_id)

    # -- validation --

    def validate(self) -> list[str]:
        """All constraint violations, empty when the fabric is well formed."""
        problems: list[str] = []
        by_surface: dict[str, list[TileNode]] = {}
        for t in self.tiles.values():
            by_surface.setdefault(t.surface, []).append(t)
        faces = _faces(self.room, {**DEFAULT_FACE_DIMS, **self.config.face_dims})
        for surface, tiles in sorted(by_surface.items()):
            face = faces[surface]
            ul, vl = round(face.u_len_m * 1000), round(face.v_len_m * 1000)
            for t in tiles:
                u0, v0, u1, v1 = t.rect_mm
                if u0 < 0 or v0 < 0 or u1 > ul or v1 > vl:
                    problems.append(f"{t.id}: footprint leaves the {surface} face")
                n = t.normal
                norm = math.sqrt(n[0]**2 + n[1]**2 + n[2]**2)
                if abs(norm - 1.0) > 1e-9:
                    problems.append(f"{t.id}: normal is not unit length")
                c = self.room.center
                inward = sum(n[i] * (c[i] - t.center[i]) for i in range(3))
                if inward <= 0:
                    problems.append(f"{t.id}: normal does not point into the room")
            tiles = sorted(tiles, key=lambda t: t.id)
            for i in range(len(tiles)):
                a = tiles[i].rect_mm
                for j in range(i + 1, len(tiles)):
                    b = tiles[j].rect_mm
                    if a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]:
                        problems.append(
                            f"overlap on {surface}: {tiles[i].id} and {tiles[j].id}")
        for sw in self.switches.values():
            used = len(sw.attached) + 1   # one uplink port to the central node
            if used > sw.port_count:
                problems.append(f"{sw.id}: {used} ports used, only {sw.port_count} fitted")
        n_conn = sum(len(sw.attached) for sw in self.switches.values())
        if n_conn > self.config.max_tile_connections:
            problems.append(
                f"{n_conn} tile connections exceed the fabric limit "
                f"{self.config.max_tile_connections}")
        return problems

    # -- serialization --

    def to_json_dict(self) -> dict:
        return {
            "schema_version": FABRIC_SCHEMA_VERSION,
            "room": {"length_m": self.room.length_m, "width_m": self.room.width_m,
                     "height_m": self.room.height_m},
            "central_id": self.central_id,
            "tiles": [{"id": t.id, "surface": t.surface, "center": list(t.center),
                       "normal": list(t.normal), "rect_mm": list(t.rect_mm),
                       "roles": sorted(t.roles)} for t in self.tiles.values()],
            "switches": [{"id": s.id, "port_count": s.port_count,
                          "position": list(s.position),
                          "transparent_clock": s.transparent_clock,
                          "attached": list(s.attached)} for s in self.switches.values()],
            "links": [{"id": l.id, "a": l.a, "b": l.b, "length_m": l.length_m,
                       "base_delay_ps": l.base_delay_ps,
                       "extra_ab_ps": l.extra_ab_ps, "extra_ba_ps": l.extra_ba_ps,
                       "jitter_sigma_ns": l.jitter_sigma_ns,
                       "jitter_shape": l.jitter_shape,
                       "bandwidth_bps": l.bandwidth_bps} for l in self.links.values()],
        }

    def export_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_json_dict(cls, doc: dict, config: FabricConfig | None = None) -> "Fabric":
        version = doc.get("schema_version")
        if version != FABRIC_SCHEMA_VERSION:
            raise ConfigurationError(
                f"unsupported fabric schema version {version!r}"
                f" (this build reads {FABRIC_SCHEMA_VERSION})")
        cfg = config or FabricConfig(room=Room(**doc["room"]))
        tiles = {d["id"]: TileNode(d["id"], d["surface"], tuple(d["center"]),
                                   tuple(d["normal"]), tuple(d["rect_mm"]),
                                   frozenset(d["roles"])) for d in doc["tiles"]}
        switches = {d["id"]: SwitchNode(d["id"], d["port_count"], tuple(d["position"]),
                                        d["transparent_clock"], list(d["attached"]))
                    for d in doc["switches"]}
        links = {d["id"]: Link(d["id"], d["a"], d["b"], d["length_m"],
                               d["base_delay_ps"], d["extra_ab_ps"], d["extra_ba_ps"],
                               d["jitter_sigma_ns"], d["jitter_shape"],
                               d["bandwidth_bps"]) for d in doc["links"]}
        return cls(cfg, tiles, switches, links, doc["central_id"])


def _cable_length_m(cfg: FabricConfig, tile: TileNode, sw: SwitchNode,
                    rng: RngStream | None) -> float:
    if cfg.cable_model == "manhattan":
        d = sum(abs(tile.center[i] - sw.position[i]) for i in range(3))
        return round(d + cfg.slack_m, 4)
    if cfg.cable_model == "uniform":
        if rng is None:
            raise ConfigurationError("uniform cable model needs a random stream")
        return round(rng.uniform(cfg.cable_min_m, cfg.cable_max_m), 4)
    if cfg.cable_model == "fixed":
        return cfg.cable_fixed_m
    raise ConfigurationError(f"unknown cable model {cfg.cable_model!r}")


def _delay_ps(length_m: float, prop_ns_per_m: float) -> int:
    return int(round(length_m * prop_ns_per_m * 1000))


def build_default_fabric(config: FabricConfig | None = None,
                         rng: RngStream | None = None) -> Fabric:
    """Construct tiles, switches and cabling from a config.

    Tiles are laid out surface by surface (wall_a, wall_b, floor, ceiling),
    ids assigned in placement order, and attached to switches round-robin by
    tile index.  Cable length defaults to the Manhattan run from tile centre
    to switch plus fixed slack; base delay is length times the propagation
    constant, kept in integer picoseconds.
    """
    cfg = config or FabricConfig()
    for k in cfg.counts:
        if k not in SURFACE_NAMES:
            raise ConfigurationError(f"unknown surface {k!r}")
    dims = {**DEFAULT_FACE_DIMS, **cfg.face_dims}
    faces = _faces(cfg.room, dims)

    tiles: dict[str, TileNode] = {}
    idx = 0
    for surface in SURFACE_NAMES:
        count = int(cfg.counts.get(surface, 0))
        face = faces[surface]
        try:
            rects = pack_surface(face.u_len_m, face.v_len_m, count)
        except ConfigurationError as e:
            raise ConfigurationError(f"{surface}: {e}") from None
        for rect in rects:
            cu = (rect[0] + rect[2]) / 2000.0
            cv = (rect[1] + rect[3]) / 2000.0
            o, ua, va = face.origin, face.u_axis, face.v_axis
            center = tuple(round(o[i] + ua[i] * cu + va[i] * cv, 6) for i in range(3))
            tiles[f"t{idx:03d}"] = TileNode(f"t{idx:03d}", surface, center,
                                            face.normal, rect)
            idx += 1

    if cfg.switch_count < 1:
        raise ConfigurationError("at least one switch is required")
    switches = {}
    for k in range(cfg.switch_count):
        switches[f"sw{k}"] = SwitchNode(
            f"sw{k}", cfg.switch_ports, position=(0.3, 0.2 + 0.2 * k, 1.0))

    links: dict[str, Link] = {}
    central_pos = (0.1, 0.1, 1.0)
    for k, sw in enumerate(switches.values()):
        d = sum(abs(central_pos[i] - sw.position[i]) for i in range(3))
        length = round(d + cfg.slack_m, 4)
        links[f"trunk_sw{k}"] = Link(
            f"trunk_sw{k}", "central", sw.id, length,
            _delay_ps(length, cfg.prop_ns_per_m),
            jitter_sigma_ns=cfg.trunk_jitter_sigma_ns,
            jitter_shape=cfg.jitter_shape, bandwidth_bps=cfg.bandwidth_bps)

    sw_ids = list(switches)
    for i, tile in enumerate(tiles.values()):
        sw = switches[sw_ids[i % len(sw_ids)]]
        if len(sw.attached) + 1 >= sw.port_count:
            raise ConfigurationError(f"{sw.id}: out of ports for {tile.id}")
        length = _cable_length_m(cfg, tile, sw, rng)
        links[f"link_{tile.id}"] = Link(
            f"link_{tile.id}", sw.id, tile.id, length,
            _delay_ps(length, cfg.prop_ns_per_m),
            jitter_sigma_ns=cfg.tile_jitter_sigma_ns,
            jitter_shape=cfg.jitter_shape, bandwidth_bps=cfg.bandwidth_bps)
        sw.attached.append(tile.id)

    n_conn = sum(len(sw.attached) for sw in switches.values())
    if n_conn > cfg.max_tile_connections:
        raise ConfigurationError(
            f"{n_conn} tile connections exceed the limit {cfg.max_tile_connections}")
    return Fabric(cfg, tiles, switches, links)


def tile_position(fabric: Fabric, tile_id: str):
    return fabric.tile_position(tile_id)
