"""Covariate engineering: core counts, social disorganization composites,
built-environment metrics, mobility measures, and the standardized matrix.

Feature groups:

* Core: residential population, nightlife / shops / food POI counts, and
  ambient population, all measured on the core unit itself.
* SD (social disorganization): disadvantage and instability (principal
  components of unemployment, poverty, and residential-mobility rates) plus
  ethnic diversity, measured on the corehood.
* BE (built environment): land-use mix, average block area, building age
  diversity, dwelling-unit density, walkability, measured on the corehood.
* M (mobility): corehood attractiveness (terminating non-home-based trips).

Corehood aggregation: counts are summed over members, rates are
population-weighted means, diversity indices are computed on the pooled
composition, and block-level metrics are averaged over member blocks.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import networkx as nx
import numpy as np
from scipy.spatial import cKDTree
from shapely.geometry import Point
from shapely.strtree import STRtree

from .geo import Block, CityDataset, Corehood, Parcel, Poi, SpatialUnit, Stay, Trip

FEATURE_GROUPS = ("Core", "SD", "BE", "M")
LUM_USES = ("residential", "commercial_institutional", "park_recreational")

CORE_FEATURES = ("residential_population", "nightlife_pois", "shops_pois",
                 "food_pois", "ambient_population")
SD_FEATURES = ("disadvantage", "instability", "ethnic_diversity")
BE_FEATURES = ("land_use_mix", "avg_block_area", "building_age_diversity",
               "population_density", "walkability")
M_FEATURES = ("attractiveness",)

# Features whose direction is stable across cities; used by the "minimal"
# selection (core counters plus the consistently-signed corehood variables).
MINIMAL_EXTRA = ("disadvantage", "ethnic_diversity", "avg_block_area", "attractiveness")


# --------------------------------------------------------------------------
# walkability

@dataclass(frozen=True)
class DecayCurve:
    """Street-distance decay: flat at 1 out to ``d_full``, quadratic drop to
    ``knee_value`` at ``d_knee``, linear to zero at ``d_zero``."""

    d_full: float = 500.0
    d_knee: float = 1500.0
    d_zero: float = 2400.0
    knee_value: float = 0.1

    def __call__(self, d: float) -> float:
        if d <= self.d_full:
            return 1.0
        if d <= self.d_knee:
            t = (d - self.d_full) / (self.d_knee - self.d_full)
            return 1.0 - (1.0 - self.knee_value) * t * t
        if d <= self.d_zero:
            return self.knee_value * (self.d_zero - d) / (self.d_zero - self.d_knee)
        return 0.0


@dataclass(frozen=True)
class WalkabilityConfig:
    """Per-category POI counts and ordered weights, plus the decay curve."""

    categories: tuple[tuple[str, int, tuple[float, ...]], ...]
    decay: DecayCurve = DecayCurve()

    def __post_init__(self):
        for name, n_c, w in self.categories:
            if len(w) != n_c:
                raise ValueError(f"category {name}: {len(w)} weights for n_c={n_c}")
            if any(x < 0 for x in w):
                raise ValueError(f"category {name}: negative weight")

    def max_score(self) -> float:
        return sum(sum(w) for _, _, w in self.categories)


def default_walkability_config() -> WalkabilityConfig:
    return WalkabilityConfig(categories=(
        ("grocery", 1, (3.0,)),
        ("food", 10, (0.75, 0.45, 0.25, 0.25, 0.225, 0.225, 0.225, 0.225, 0.2, 0.2)),
        ("shops", 5, (0.5, 0.45, 0.4, 0.35, 0.3)),
        ("schools", 1, (1.0,)),
        ("entertainment", 1, (1.0,)),
        ("parks_outside", 1, (1.0,)),
        ("coffee", 2, (1.25, 0.75)),
        ("banks", 1, (1.0,)),
        ("books", 1, (1.0,)),
    ))


class StreetIndex:
    """Snapping and shortest-path queries over the street graph."""

    def __init__(self, graph: nx.Graph):
        self.graph = graph
        self._nodes = list(graph.nodes)
        if self._nodes:
            coords = np.array([[graph.nodes[n]["x"], graph.nodes[n]["y"]]
                               for n in self._nodes])
            self._tree = cKDTree(coords)
        else:
            self._tree = None
        self._dist_cache: dict[tuple[str, float], dict] = {}

    def nearest_node(self, point: Point) -> tuple[str | None, float]:
        if self._tree is None:
            return None, math.inf
        d, i = self._tree.query([point.x, point.y])
        return self._nodes[int(i)], float(d)

    def distances_from(self, node: str, cutoff: float) -> Mapping[str, float]:
        key = (node, cutoff)
        if key not in self._dist_cache:
            self._dist_cache[key] = nx.single_source_dijkstra_path_length(
                self.graph, node, cutoff=cutoff, weight="length")
        return self._dist_cache[key]


class PoiIndex:
    """POIs grouped by category and snapped to street nodes."""

    def __init__(self, pois: Sequence[Poi], street: StreetIndex):
        self.by_category: dict[str, list[tuple[str, str]]] = {}
        for poi in pois:
            node, _ = street.nearest_node(poi.location)
            if node is None:
                continue
            self.by_category.setdefault(poi.category, []).append((poi.id, node))


def walkability_block(block: Block, poi_index: PoiIndex, street: StreetIndex,
                      cfg: WalkabilityConfig,
                      snap_limit_m: float = 200.0) -> tuple[float, str | None]:
    """Walk score of one block: weighted decayed network distances to the
    nearest POIs of each category. Returns (score, flag); flag is
    'unreachable' when the block cannot be snapped to the street graph."""
    node, snap_d = street.nearest_node(block.geometry.centroid)
    if node is None or snap_d > snap_limit_m:
        return 0.0, "unreachable"
    dists = street.distances_from(node, cutoff=cfg.decay.d_zero)
    score = 0.0
    for name, n_c, weights in cfg.categories:
        candidates = poi_index.by_category.get(name, [])
        reached = sorted(
            (dists[pnode] for _, pnode in candidates if pnode in dists),
        )[:n_c]
        for w, d in zip(weights, reached):
            score += w * cfg.decay(d)
    return score, None


def corehood_walkability(corehood: Corehood,
                         block_scores: Mapping[str, float],
                         blocks_by_unit: Mapping[str, Sequence[Block]]
                         ) -> tuple[float, str | None]:
    """Mean block walk score over every block inside the corehood's members."""
    scores = [block_scores[b.id]
              for uid in corehood.member_ids
              for b in blocks_by_unit.get(uid, ())]
    if not scores:
        return 0.0, "no_blocks"
    return float(np.mean(scores)), None


# --------------------------------------------------------------------------
# built environment

def land_use_mix(parcels: Iterable[Parcel],
                 uses: Sequence[str] = LUM_USES) -> tuple[float, str | None]:
    """Normalized entropy of developed area over the given land uses, in
    [0, 1]. Zero developed area yields (0, 'no_landuse')."""
    areas = {u: 0.0 for u in uses}
    for p in parcels:
        if p.land_use in areas:
            areas[p.land_use] += p.geometry.area
    total = sum(areas.values())
    if total <= 0:
        return 0.0, "no_landuse"
    entropy = 0.0
    for a in areas.values():
        share = a / total
        if share > 0:
            entropy -= share * math.log(share)
    return entropy / math.log(len(uses)), None


def avg_block_area(blocks: Sequence[Block]) -> tuple[float, str | None]:
    if not blocks:
        return 0.0, "no_blocks"
    return float(np.mean([b.area_m2 for b in blocks])), None


def building_age_diversity(blocks: Sequence[Block]) -> tuple[float, str | None]:
    """Population standard deviation of construction years pooled over the
    corehood's buildings."""
    years = [y for b in blocks for y in b.buildings]
    if not years:
        return 0.0, "no_buildings"
    return float(np.std(years)), None


def population_density(units: Sequence[SpatialUnit]) -> tuple[float, str | None]:
    """Dwelling units per square kilometre over the member units."""
    area_km2 = sum(u.geometry.area for u in units) / 1e6
    if area_km2 <= 0:
        return 0.0, "no_area"
    return sum(u.dwelling_units for u in units) / area_km2, None


# --------------------------------------------------------------------------
# social disorganization

def hhi_diversity(shares: Sequence[float]) -> float:
    """Hirschman-Herfindahl diversity 1 - sum(s^2) over population groups;
    shares are renormalized when slightly off 1."""
    s = np.asarray(shares, dtype=float)
    if np.any(s < 0):
        raise ValueError("negative share")
    total = s.sum()
    if total <= 0:
        raise ValueError("no population")
    s = s / total
    return float(1.0 - np.sum(s * s))


@dataclass
class SdComposites:
    """Disadvantage and instability scores with their PCA structure."""

    disadvantage: np.ndarray
    instability: np.ndarray
    loadings: np.ndarray        # 3 x 2, columns (disadvantage, instability)
    eigenvalues: np.ndarray     # all 3, descending
    components: np.ndarray      # full 3 x 3 rotation


def sd_composites(unemployment: np.ndarray, poverty: np.ndarray,
                  residential_mobility: np.ndarray) -> SdComposites:
    """Two largest principal components of the three z-scored rates
    (correlation-matrix PCA). Component 1 is disadvantage, oriented to load
    positively on poverty; component 2 is instability, oriented positively
    on residential mobility."""
    cols = {"unemployment": np.asarray(unemployment, dtype=float),
            "poverty": np.asarray(poverty, dtype=float),
            "residential_mobility": np.asarray(residential_mobility, dtype=float)}
    n = len(cols["unemployment"])
    if n < 3:
        raise ValueError(f"need at least 3 observations, got {n}")
    z = np.empty((n, 3))
    for j, (name, v) in enumerate(cols.items()):
        sd = v.std()
        if sd == 0:
            raise ValueError(f"constant column: {name}")
        z[:, j] = (v - v.mean()) / sd
    corr = np.corrcoef(z, rowvar=False)
    vals, vecs = np.linalg.eigh(corr)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    # orientation: poverty is column 1, mobility column 2
    if vecs[1, 0] < 0:
        vecs[:, 0] = -vecs[:, 0]
    if vecs[2, 1] < 0:
        vecs[:, 1] = -vecs[:, 1]
    for j in range(3):  # deterministic sign for the remaining component
        if j > 1 and vecs[np.argmax(np.abs(vecs[:, j])), j] < 0:
            vecs[:, j] = -vecs[:, j]
    scores = z @ vecs
    return SdComposites(
        disadvantage=scores[:, 0], instability=scores[:, 1],
        loadings=vecs[:, :2].copy(), eigenvalues=vals, components=vecs,
    )


# --------------------------------------------------------------------------
# mobility

def ambient_population(stays: Sequence[Stay], units: Sequence[SpatialUnit],
                       min_duration_hours: float = 1.0) -> dict[str, float]:
    """Mean daily count of distinct persons stopping at least
    ``min_duration_hours`` in each unit. Days without a qualifying stop in a
    unit count as zero for that unit."""
    from .geo import point_unit_index

    out = {u.id: 0.0 for u in units}
    if not stays:
        warnings.warn("no stays in dataset; ambient population is zero everywhere",
                      stacklevel=2)
        return out
    locate = point_unit_index(units)
    days = sorted({s.day for s in stays})
    seen: dict[tuple[int, str], set[str]] = {}
    for s in stays:
        if s.duration_hours < min_duration_hours:
            continue
        uid = locate(s.location)
        if uid is None:
            continue
        seen.setdefault((s.day, uid), set()).add(s.person_id)
    n_days = max(len(days), 1)
    for (_, uid), persons in seen.items():
        out[uid] += len(persons)
    return {uid: v / n_days for uid, v in out.items()}


def attractiveness(trips: Sequence[Trip], corehoods: Mapping[str, Corehood],
                   units: Sequence[SpatialUnit]) -> dict[str, float]:
    """Count of non-home-based trips terminating inside each corehood. A
    destination in a unit shared by several corehoods counts once in each."""
    from .geo import point_unit_index

    locate = point_unit_index(units)
    # reverse index: unit -> corehoods it belongs to
    member_of: dict[str, list[str]] = {}
    for ch in corehoods.values():
        for uid in ch.member_ids:
            member_of.setdefault(uid, []).append(ch.core_id)
    out = {cid: 0.0 for cid in corehoods}
    for t in trips:
        if t.kind != "NHB":
            continue
        uid = locate(t.destination)
        if uid is None:
            continue
        for cid in member_of.get(uid, ()):
            out[cid] += 1.0
    return out


# --------------------------------------------------------------------------
# assembly

@dataclass(frozen=True)
class Selection:
    """Which corehood feature groups enter the matrix; core features are
    always included. ``minimal`` swaps in the reduced cross-city subset."""

    groups: frozenset[str] = frozenset()
    minimal: bool = False

    def label(self) -> str:
        if self.minimal:
            return "minimal"
        if not self.groups:
            return "core"
        return "+".join(g for g in ("SD", "BE", "M") if g in self.groups)


def parse_selection(spec) -> Selection:
    """Accepts 'core', 'full', 'minimal', 'SD+BE', ['SD','M'], or a Selection."""
    if isinstance(spec, Selection):
        return spec
    if isinstance(spec, (list, tuple, set, frozenset)):
        parts = [str(p) for p in spec]
    else:
        text = str(spec).strip().lower()
        if text in ("core", ""):
            return Selection()
        if text == "full":
            return Selection(groups=frozenset({"SD", "BE", "M"}))
        if text == "minimal":
            return Selection(minimal=True)
        parts = text.replace(",", "+").split("+")
    groups = set()
    for p in parts:
        p = p.strip().upper()
        if p in ("", "CORE"):
            continue
        if p not in ("SD", "BE", "M"):
            raise ValueError(f"unknown feature group {p!r} (expected SD, BE, M)")
        groups.add(p)
    return Selection(groups=frozenset(groups))


@dataclass
class Standardization:
    names: list[str]
    means: np.ndarray
    sds: np.ndarray

    def apply(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.means) / self.sds


@dataclass
class FeatureMatrix:
    """Z-scored design matrix with one row per core."""

    core_ids: list[str]
    X: np.ndarray
    names: list[str]
    groups: list[str]
    standardization: Standardization
    raw: np.ndarray
    flags: dict[tuple[str, str], str] = field(default_factory=dict)
    dropped: list[tuple[str, str]] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.names.index(name)]

    def select(self, names: Sequence[str]) -> np.ndarray:
        idx = [self.names.index(n) for n in names]
        return self.X[:, idx]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["core_id"] + self.names)
            for i, cid in enumerate(self.core_ids):
                w.writerow([cid] + [repr(v) for v in self.X[i]])


def _weighted_mean(values: np.ndarray, weights: np.ndarray) -> float:
    total = weights.sum()
    if total <= 0:
        return float(values.mean())
    return float(np.dot(values, weights) / total)


def compute_raw_features(dataset: CityDataset,
                         corehoods: Mapping[str, Corehood],
                         walk_cfg: WalkabilityConfig | None = None,
                         ) -> tuple[list[str], np.ndarray, list[str], list[str],
                                    dict[tuple[str, str], str]]:
    """Compute every feature column unstandardized.

    Returns (core_ids, raw matrix, names, groups, flags).
    """
    walk_cfg = walk_cfg or default_walkability_config()
    core_ids = sorted(corehoods.keys())
    units_by_id = dataset.units_by_id()
    blocks_by_unit = dataset.blocks_by_unit()
    flags: dict[tuple[str, str], str] = {}

    # per-unit POI counts (boundary-inclusive containment)
    poi_counts: dict[str, dict[str, int]] = {u.id: {} for u in dataset.units}
    if dataset.pois:
        geoms = [u.geometry for u in dataset.units]
        ids = [u.id for u in dataset.units]
        tree = STRtree(geoms)
        for poi in dataset.pois:
            for j in tree.query(poi.location):
                if geoms[j].covers(poi.location):
                    d = poi_counts[ids[j]]
                    d[poi.category] = d.get(poi.category, 0) + 1

    ambient = ambient_population(dataset.stays, dataset.units)
    attract = attractiveness(dataset.trips, corehoods, dataset.units)

    # parcel -> unit by representative point (cheap, deterministic)
    parcels_by_unit: dict[str, list[Parcel]] = {u.id: [] for u in dataset.units}
    if dataset.parcels:
        from .geo import point_unit_index

        locate = point_unit_index(dataset.units)
        for p in dataset.parcels:
            uid = locate(p.geometry.representative_point())
            if uid is not None:
                parcels_by_unit[uid].append(p)

    # block walk scores
    street = StreetIndex(dataset.street_graph)
    poi_idx = PoiIndex(dataset.pois, street)
    block_scores: dict[str, float] = {}
    for b in dataset.blocks:
        score, flag = walkability_block(b, poi_idx, street, walk_cfg)
        block_scores[b.id] = score
        if flag:
            flags[(b.id, "walkability_block")] = flag

    # corehood-aggregated census rates feed the PCA composites
    n = len(core_ids)
    rate_cols = {"unemployment_rate": np.zeros(n), "poverty_rate": np.zeros(n),
                 "residential_mobility_rate": np.zeros(n)}
    have_census = bool(dataset.census)
    pooled_hhi = np.zeros(n)
    for i, cid in enumerate(core_ids):
        members = sorted(corehoods[cid].member_ids)
        if not have_census:
            continue
        recs = [dataset.census[m] for m in members if m in dataset.census]
        if not recs:
            raise ValueError(f"corehood {cid}: no census records among members")
        pops = np.array([units_by_id[r.unit_id].residential_population for r in recs])
        for key in rate_cols:
            vals = np.array([getattr(r, key) for r in recs])
            rate_cols[key][i] = _weighted_mean(vals, pops)
        group_totals = np.zeros(6)
        for r, p in zip(recs, pops):
            group_totals += np.asarray(r.ethnic_shares) * p
        if group_totals.sum() <= 0:  # unpopulated corehood: fall back to plain mean
            group_totals = np.mean([r.ethnic_shares for r in recs], axis=0)
            flags[(cid, "ethnic_diversity")] = "no_population"
        pooled_hhi[i] = hhi_diversity(group_totals)

    if have_census:
        sd = sd_composites(rate_cols["unemployment_rate"], rate_cols["poverty_rate"],
                           rate_cols["residential_mobility_rate"])
        disadvantage, instability = sd.disadvantage, sd.instability
    else:
        disadvantage = np.zeros(n)
        instability = np.zeros(n)

    names: list[str] = []
    groups: list[str] = []
    columns: list[np.ndarray] = []

    def add(name: str, group: str, values: np.ndarray):
        names.append(name)
        groups.append(group)
        columns.append(np.asarray(values, dtype=float))

    add("residential_population", "Core",
        np.array([units_by_id[c].residential_population for c in core_ids]))
    for cat, col in (("nightlife", "nightlife_pois"), ("shops", "shops_pois"),
                     ("food", "food_pois")):
        add(col, "Core",
            np.array([poi_counts[c].get(cat, 0) for c in core_ids], dtype=float))
    add("ambient_population", "Core", np.array([ambient[c] for c in core_ids]))

    add("disadvantage", "SD", disadvantage)
    add("instability", "SD", instability)
    add("ethnic_diversity", "SD", pooled_hhi)

    lum = np.zeros(n)
    area = np.zeros(n)
    agediv = np.zeros(n)
    dens = np.zeros(n)
    walk = np.zeros(n)
    for i, cid in enumerate(core_ids):
        members = sorted(corehoods[cid].member_ids)
        member_units = [units_by_id[m] for m in members]
        member_blocks = [b for m in members for b in blocks_by_unit.get(m, ())]
        member_parcels = [p for m in members for p in parcels_by_unit.get(m, ())]
        for target, (value, flag) in (
            (lum, land_use_mix(member_parcels)),
            (area, avg_block_area(member_blocks)),
            (agediv, building_age_diversity(member_blocks)),
            (dens, population_density(member_units)),
            (walk, corehood_walkability(corehoods[cid], block_scores, blocks_by_unit)),
        ):
            target[i] = value
            if flag:
                flags[(cid, "be")] = flag
    add("land_use_mix", "BE", lum)
    add("avg_block_area", "BE", area)
    add("building_age_diversity", "BE", agediv)
    add("population_density", "BE", dens)
    add("walkability", "BE", walk)

    add("attractiveness", "M", np.array([attract[c] for c in core_ids]))

    raw = np.column_stack(columns)
    return core_ids, raw, names, groups, flags


def assemble_features(dataset: CityDataset,
                      corehoods: Mapping[str, Corehood],
                      selection="full",
                      walk_cfg: WalkabilityConfig | None = None) -> FeatureMatrix:
    """Compute, select, and z-score the feature matrix. Constant columns are
    dropped with a warning; the result carries the standardization used."""
    sel = parse_selection(selection)
    core_ids, raw_all, names_all, groups_all, flags = compute_raw_features(
        dataset, corehoods, walk_cfg)

    if sel.minimal:
        wanted = [n for n in names_all
                  if groups_all[names_all.index(n)] == "Core" or n in MINIMAL_EXTRA]
    else:
        keep_groups = {"Core", *sel.groups}
        wanted = [n for n, g in zip(names_all, groups_all) if g in keep_groups]

    idx = [names_all.index(n) for n in wanted]
    raw = raw_all[:, idx]
    names = [names_all[i] for i in idx]
    groups = [groups_all[i] for i in idx]

    keep, dropped = [], []
    for j, name in enumerate(names):
        if raw[:, j].std() == 0:
            dropped.append((name, "constant column"))
        else:
            keep.append(j)
    if dropped:
        warnings.warn("dropped constant feature column(s): "
                      + ", ".join(n for n, _ in dropped), stacklevel=2)
    raw = raw[:, keep]
    names = [names[j] for j in keep]
    groups = [groups[j] for j in keep]

    means = raw.mean(axis=0)
    sds = raw.std(axis=0)
    X = (raw - means) / sds
    if not np.all(np.isfinite(X)):
        bad = [names[j] for j in range(X.shape[1]) if not np.all(np.isfinite(X[:, j]))]
        raise ValueError(f"non-finite values in feature column(s): {bad}")
    return FeatureMatrix(
        core_ids=list(core_ids), X=X, names=names, groups=groups,
        standardization=Standardization(names=list(names), means=means, sds=sds),
        raw=raw, flags=flags, dropped=dropped,
    )
