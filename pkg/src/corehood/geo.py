"""Geographic data model: spatial units, corehoods, and crime assignment.

Crime counts are modelled at the level of a single spatial unit (the "core",
typically a census block group). Context around a core is captured by its
"corehood": every unit whose geometry lies within a fixed radius of the core.
All geometry is assumed to live in a projected, metric CRS; nothing here
reprojects.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Mapping, Sequence

import networkx as nx
from shapely.geometry import Point, Polygon
from shapely.geometry.base import BaseGeometry
from shapely.strtree import STRtree

HALF_MILE_M = 804.672
ONE_MILE_M = 1609.344

CRIME_CATEGORIES = ("violent", "property")
TRIP_KINDS = ("HBW", "HBO", "NHB")
LAND_USES = ("residential", "commercial_institutional", "park_recreational", "other")


class GeometryError(ValueError):
    """Invalid or unusable geometry, carries the offending record id."""


@dataclass
class SpatialUnit:
    """One modelling unit (core): polygon plus its census basics."""

    id: str
    geometry: Polygon
    centroid: Point | None = None
    blocks: list[str] = field(default_factory=list)
    residential_population: float = 0.0
    dwelling_units: float = 0.0

    def __post_init__(self):
        if self.centroid is None:
            self.centroid = self.geometry.centroid
        if self.residential_population < 0:
            raise ValueError(f"unit {self.id}: residential_population < 0")
        if self.dwelling_units < 0:
            raise ValueError(f"unit {self.id}: dwelling_units < 0")


@dataclass
class Block:
    """Street block inside a unit; buildings are construction years."""

    id: str
    geometry: Polygon
    unit_id: str
    area_m2: float | None = None
    buildings: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.area_m2 is None:
            self.area_m2 = self.geometry.area


@dataclass(frozen=True)
class Corehood:
    """A core unit together with every unit within ``radius_m`` of it."""

    core_id: str
    member_ids: frozenset[str]
    radius_m: float

    def __post_init__(self):
        if self.core_id not in self.member_ids:
            raise ValueError(f"corehood {self.core_id}: core not a member")
        if self.radius_m <= 0:
            raise ValueError(f"corehood {self.core_id}: radius_m must be > 0")


@dataclass
class CrimeEvent:
    id: str
    location: Point
    category: str
    timestamp: date

    def __post_init__(self):
        if self.category not in CRIME_CATEGORIES:
            raise ValueError(
                f"crime {self.id}: category {self.category!r} is not one of "
                f"{CRIME_CATEGORIES}"
            )


@dataclass
class Poi:
    id: str
    location: Point
    category: str


@dataclass
class Stay:
    """A stop by one person at a point, with duration; day indexes the
    simulated day the stop belongs to."""

    person_id: str
    location: Point
    duration_hours: float
    day: int = 0


@dataclass
class Trip:
    person_id: str
    origin: Point
    destination: Point
    kind: str

    def __post_init__(self):
        if self.kind not in TRIP_KINDS:
            raise ValueError(f"trip kind {self.kind!r} not in {TRIP_KINDS}")


@dataclass
class Parcel:
    geometry: Polygon
    land_use: str

    def __post_init__(self):
        if self.land_use not in LAND_USES:
            raise ValueError(f"land use {self.land_use!r} not in {LAND_USES}")


@dataclass
class CensusRecord:
    unit_id: str
    unemployment_rate: float
    poverty_rate: float
    residential_mobility_rate: float
    ethnic_shares: tuple[float, ...]

    def __post_init__(self):
        for name in ("unemployment_rate", "poverty_rate", "residential_mobility_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"census {self.unit_id}: {name}={v} outside [0,1]")
        if len(self.ethnic_shares) != 6:
            raise ValueError(f"census {self.unit_id}: expected 6 ethnic shares")
        if any(s < 0 for s in self.ethnic_shares):
            raise ValueError(f"census {self.unit_id}: negative ethnic share")


@dataclass
class CityDataset:
    """Everything known about one city, in a projected metric CRS."""

    units: list[SpatialUnit]
    blocks: list[Block] = field(default_factory=list)
    pois: list[Poi] = field(default_factory=list)
    street_graph: nx.Graph = field(default_factory=nx.Graph)
    crimes: list[CrimeEvent] = field(default_factory=list)
    stays: list[Stay] = field(default_factory=list)
    trips: list[Trip] = field(default_factory=list)
    parcels: list[Parcel] = field(default_factory=list)
    census: dict[str, CensusRecord] = field(default_factory=dict)
    crime_window: tuple[date, date] | None = None
    crs: str = ""

    def unit_ids(self) -> list[str]:
        return [u.id for u in self.units]

    def units_by_id(self) -> dict[str, SpatialUnit]:
        return {u.id: u for u in self.units}

    def blocks_by_unit(self) -> dict[str, list[Block]]:
        out: dict[str, list[Block]] = {u.id: [] for u in self.units}
        for b in self.blocks:
            if b.unit_id in out:
                out[b.unit_id].append(b)
        return out


def _check_unit_geometries(units: Sequence[SpatialUnit]) -> None:
    for u in units:
        if u.geometry is None or u.geometry.is_empty:
            raise GeometryError(f"unit {u.id}: empty geometry")
        if not u.geometry.is_valid:
            raise GeometryError(f"unit {u.id}: invalid (self-intersecting?) geometry")


def build_corehoods(
    units: Sequence[SpatialUnit],
    radius_m: float = HALF_MILE_M,
    boundary_warning_members: int = 3,
) -> dict[str, Corehood]:
    """Construct the corehood of every unit.

    A unit v is a member of u's corehood when v's geometry intersects u's
    geometry buffered by ``radius_m``. The core is always a member; cores near
    each other share members. Units are assumed pairwise interior-disjoint.

    Raises ``ValueError`` on an empty unit list and ``GeometryError`` naming
    the first unit with invalid geometry. Emits a single warning listing cores
    with fewer than ``boundary_warning_members`` members (likely city edge).
    """
    units = list(units)
    if not units:
        raise ValueError("no units")
    if radius_m <= 0:
        raise ValueError(f"radius_m must be > 0, got {radius_m}")
    _check_unit_geometries(units)

    geoms = [u.geometry for u in units]
    tree = STRtree(geoms)
    out: dict[str, Corehood] = {}
    thin: list[str] = []
    for u in units:
        # distance(core, v) <= radius  <=>  v intersects buffer(core, radius),
        # without the polygonal approximation a buffer() call would introduce.
        candidates = tree.query(u.geometry.buffer(radius_m, quad_segs=4))
        members = {
            units[j].id
            for j in candidates
            if geoms[j].distance(u.geometry) <= radius_m
        }
        members.add(u.id)
        if len(members) < boundary_warning_members:
            thin.append(u.id)
        out[u.id] = Corehood(core_id=u.id, member_ids=frozenset(members), radius_m=radius_m)
    if thin:
        warnings.warn(
            f"{len(thin)} corehood(s) with fewer than {boundary_warning_members} "
            f"members (possible boundary effect): {sorted(thin)[:10]}",
            stacklevel=2,
        )
    return out


@dataclass
class CrimeCounts:
    """Fractional per-unit crime counts by category plus the unassigned tally.

    Every in-window crime contributes total weight exactly 1, split evenly
    over the units whose geometry intersects the crime's buffer disk.
    """

    counts: dict[str, dict[str, float]]
    unassigned: dict[str, float]
    n_in_window: int
    buffer_m: float

    def total_for(self, unit_id: str) -> float:
        return sum(self.counts[unit_id].values())

    def totals(self) -> dict[str, float]:
        return {uid: sum(cats.values()) for uid, cats in self.counts.items()}

    def conservation_error(self) -> float:
        assigned = sum(sum(c.values()) for c in self.counts.values())
        return abs(assigned + sum(self.unassigned.values()) - self.n_in_window)


def assign_crimes(
    crimes: Iterable[CrimeEvent],
    units: Sequence[SpatialUnit],
    buffer_m: float = 30.0,
    window: tuple[date, date] | None = None,
) -> CrimeCounts:
    """Assign each crime to units, splitting weight 1/k over the k units whose
    geometry intersects the crime's ``buffer_m`` disk (GPS accuracy buffer).

    Crimes outside the half-open ``window`` are ignored entirely; in-window
    crimes intersecting no unit go to the ``unassigned`` tally.
    """
    if buffer_m < 0:
        raise ValueError(f"buffer_m must be >= 0, got {buffer_m}")
    _check_unit_geometries(units)
    geoms = [u.geometry for u in units]
    ids = [u.id for u in units]
    tree = STRtree(geoms)

    counts: dict[str, dict[str, float]] = {
        uid: {cat: 0.0 for cat in CRIME_CATEGORIES} for uid in ids
    }
    unassigned = {cat: 0.0 for cat in CRIME_CATEGORIES}
    n_in_window = 0
    for crime in crimes:
        if window is not None and not (window[0] <= crime.timestamp < window[1]):
            continue
        n_in_window += 1
        # A disk of radius r intersects a polygon iff the point-polygon
        # distance is <= r; exact, no discretized buffer involved.
        probe = crime.location if buffer_m == 0 else crime.location.buffer(buffer_m, quad_segs=4)
        hits = [
            j for j in tree.query(probe.envelope)
            if geoms[j].distance(crime.location) <= buffer_m
        ]
        if not hits:
            unassigned[crime.category] += 1.0
            continue
        w = 1.0 / len(hits)
        for j in hits:
            counts[ids[j]][crime.category] += w
    return CrimeCounts(counts=counts, unassigned=unassigned,
                       n_in_window=n_in_window, buffer_m=buffer_m)


def point_unit_index(units: Sequence[SpatialUnit]):
    """Return a callable mapping a point to the id of the unit covering it
    (boundary inclusive), or None. Ties broken by unit order."""
    geoms = [u.geometry for u in units]
    ids = [u.id for u in units]
    tree = STRtree(geoms)

    def locate(point: BaseGeometry) -> str | None:
        hits = sorted(int(j) for j in tree.query(point))
        for j in hits:
            if geoms[j].covers(point):
                return ids[j]
        return None

    return locate
