"""City data ingestion: GeoJSON + CSV readers, validation, and writers.

File formats (all coordinates in the projected metric CRS named by the
config; dates ISO-8601):

* units GeoJSON: FeatureCollection of polygons; properties ``id``,
  ``residential_population``, ``dwelling_units``.
* blocks GeoJSON: polygons; properties ``id``, ``unit_id``,
  ``construction_years`` (list of ints).
* parcels GeoJSON: polygons; properties ``land_use``.
* census CSV: ``unit_id, unemployment_rate, poverty_rate,
  residential_mobility_rate, ethnic_share_1 .. ethnic_share_6``.
* crimes CSV: ``id, x, y, category, date``.
* pois CSV: ``id, x, y, category`` (optionally mapped through the POI
  category CSV ``raw_category, canonical_category``).
* street nodes CSV: ``node_id, x, y``; street edges CSV:
  ``node_id_a, node_id_b, length_m``.
* stays CSV: ``person_id, x, y, duration_hours, day``.
* trips CSV: ``person_id, origin_x, origin_y, dest_x, dest_y, kind``.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import networkx as nx
from shapely.geometry import Point, mapping, shape

from .geo import (
    Block,
    CensusRecord,
    CityDataset,
    CrimeEvent,
    Parcel,
    Poi,
    SpatialUnit,
    Stay,
    Trip,
)

GEOGRAPHIC_CRS_HINTS = ("4326", "4269", "wgs84", "wgs 84", "crs84", "longlat", "nad83(geo")

POI_CATEGORIES = (
    "grocery", "food", "shops", "schools", "entertainment",
    "parks_outside", "coffee", "banks", "books", "nightlife",
)


class SchemaError(ValueError):
    """A file violates its documented schema; names file, record, and field."""

    def __init__(self, file: str, record: str, field_name: str, detail: str):
        self.file, self.record, self.field_name = file, record, field_name
        super().__init__(f"{file}: record {record}: field {field_name}: {detail}")


class CrsError(ValueError):
    pass


@dataclass
class IngestConfig:
    """Paths and settings for loading one city. All paths resolved relative
    to the config file's directory."""

    crs: str
    units_path: str
    crime_window: tuple[date, date]
    blocks_path: str | None = None
    parcels_path: str | None = None
    census_path: str | None = None
    crimes_path: str | None = None
    pois_path: str | None = None
    poi_category_map_path: str | None = None
    street_nodes_path: str | None = None
    street_edges_path: str | None = None
    stays_path: str | None = None
    trips_path: str | None = None

    @classmethod
    def from_file(cls, path: str | Path) -> "IngestConfig":
        path = Path(path)
        raw = _load_structured(path)
        base = path.parent

        def resolve(key):
            v = raw.get(key)
            return str(base / v) if v else None

        window = raw.get("crime_window")
        if not window or "start" not in window or "end" not in window:
            raise SchemaError(str(path), "crime_window", "start/end",
                              "crime_window must give ISO dates 'start' and 'end'")
        crs = raw.get("crs")
        if not crs:
            raise SchemaError(str(path), "crs", "crs", "missing CRS declaration")
        return cls(
            crs=str(crs),
            units_path=resolve("units"),
            blocks_path=resolve("blocks"),
            parcels_path=resolve("parcels"),
            census_path=resolve("census"),
            crimes_path=resolve("crimes"),
            pois_path=resolve("pois"),
            poi_category_map_path=resolve("poi_categories"),
            street_nodes_path=resolve("street_nodes"),
            street_edges_path=resolve("street_edges"),
            stays_path=resolve("stays"),
            trips_path=resolve("trips"),
            crime_window=(date.fromisoformat(window["start"]),
                          date.fromisoformat(window["end"])),
        )


def _load_structured(path: Path) -> dict:
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        return yaml.safe_load(text)
    return json.loads(text)


@dataclass
class ValidationReport:
    """What ingestion dropped or repaired, record by record."""

    entries: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def drop(self, file: str, record: str, field_name: str, detail: str):
        self.entries.append({"action": "dropped", "file": file, "record": record,
                             "field": field_name, "detail": detail})

    def repair(self, file: str, record: str, field_name: str, detail: str):
        self.entries.append({"action": "repaired", "file": file, "record": record,
                             "field": field_name, "detail": detail})

    def warn(self, message: str):
        self.warnings.append(message)
        warnings.warn(message, stacklevel=3)

    def dropped(self) -> list[dict]:
        return [e for e in self.entries if e["action"] == "dropped"]

    def to_json(self) -> str:
        return json.dumps({"entries": self.entries, "warnings": self.warnings}, indent=2)

    def summary(self) -> str:
        n_drop = len(self.dropped())
        n_rep = len(self.entries) - n_drop
        return (f"ingest validation: {n_drop} record(s) dropped, "
                f"{n_rep} repaired, {len(self.warnings)} warning(s)")


def check_crs_is_projected(crs: str) -> None:
    low = crs.lower()
    if any(h in low for h in GEOGRAPHIC_CRS_HINTS):
        raise CrsError(
            f"CRS {crs!r} looks geographic (degrees). Reproject every input to a "
            "projected metric CRS (e.g. the local UTM zone) before ingestion; "
            "this tool never reprojects."
        )


def _read_features(path: str) -> list[dict]:
    with open(path) as f:
        data = json.load(f)
    if data.get("type") != "FeatureCollection" or "features" not in data:
        raise SchemaError(path, "<root>", "type", "expected a GeoJSON FeatureCollection")
    return data["features"]


def _feature_polygon(path: str, feat: dict, fid: str):
    geom = shape(feat.get("geometry") or {})
    if geom.geom_type not in ("Polygon", "MultiPolygon") or geom.is_empty:
        raise SchemaError(path, fid, "geometry", f"expected polygon, got {geom.geom_type}")
    if not geom.is_valid:
        raise SchemaError(path, fid, "geometry", "invalid polygon")
    return geom


def _csv_rows(path: str, required: tuple[str, ...]):
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        header = reader.fieldnames or []
        for col in required:
            if col not in header:
                raise SchemaError(path, "<header>", col, "missing required column")
        yield from ((i + 2, row) for i, row in enumerate(reader))


def load_units(path: str, report: ValidationReport) -> list[SpatialUnit]:
    units = []
    for i, feat in enumerate(_read_features(path)):
        props = feat.get("properties") or {}
        uid = str(props.get("id", f"<feature {i}>"))
        if "id" not in props:
            raise SchemaError(path, uid, "id", "missing unit id")
        geom = _feature_polygon(path, feat, uid)
        units.append(SpatialUnit(
            id=str(props["id"]),
            geometry=geom,
            residential_population=float(props.get("residential_population", 0)),
            dwelling_units=float(props.get("dwelling_units", 0)),
        ))
    if not units:
        raise SchemaError(path, "<root>", "features", "no units in file")
    return units


def load_blocks(path: str, unit_ids: set[str], report: ValidationReport) -> list[Block]:
    blocks = []
    for i, feat in enumerate(_read_features(path)):
        props = feat.get("properties") or {}
        bid = str(props.get("id", f"<feature {i}>"))
        unit_id = props.get("unit_id")
        if unit_id is None:
            raise SchemaError(path, bid, "unit_id", "missing block->unit reference")
        if unit_id not in unit_ids:
            report.drop(path, bid, "unit_id", f"references unknown unit {unit_id}")
            continue
        geom = _feature_polygon(path, feat, bid)
        years = []
        for y in props.get("construction_years", []) or []:
            y = int(y)
            if 1500 < y <= 2100:
                years.append(y)
            else:
                report.drop(path, bid, "construction_years", f"implausible year {y}")
        area = props.get("area_m2")
        if area is not None:
            area = float(area)
            true_area = geom.area
            if true_area > 0 and abs(area - true_area) > 1e-3 * true_area:
                report.repair(path, bid, "area_m2",
                              f"stated {area:.1f} != geometry {true_area:.1f}; using geometry")
                area = true_area
        blocks.append(Block(id=bid, geometry=geom, unit_id=str(unit_id),
                            area_m2=area, buildings=years))
    return blocks


def load_parcels(path: str, report: ValidationReport) -> list[Parcel]:
    parcels = []
    for i, feat in enumerate(_read_features(path)):
        props = feat.get("properties") or {}
        fid = f"<feature {i}>"
        use = props.get("land_use")
        if use is None:
            raise SchemaError(path, fid, "land_use", "missing land use")
        geom = _feature_polygon(path, feat, fid)
        try:
            parcels.append(Parcel(geometry=geom, land_use=str(use)))
        except ValueError as e:
            report.drop(path, fid, "land_use", str(e))
    return parcels


def load_census(path: str, unit_ids: set[str], report: ValidationReport) -> dict[str, CensusRecord]:
    share_cols = [f"ethnic_share_{k}" for k in range(1, 7)]
    required = ("unit_id", "unemployment_rate", "poverty_rate",
                "residential_mobility_rate", *share_cols)
    out: dict[str, CensusRecord] = {}
    for line, row in _csv_rows(path, required):
        uid = row["unit_id"]
        if uid not in unit_ids:
            report.drop(path, f"line {line}", "unit_id", f"unknown unit {uid}")
            continue
        try:
            rates = {k: float(row[k]) for k in
                     ("unemployment_rate", "poverty_rate", "residential_mobility_rate")}
            shares = [float(row[c]) for c in share_cols]
        except ValueError as e:
            raise SchemaError(path, f"line {line}", "rates", f"non-numeric value ({e})")
        total = sum(shares)
        if total <= 0:
            report.drop(path, f"line {line}", "ethnic_share",
                        "ethnic shares sum to zero")
            continue
        if abs(total - 1.0) > 1e-6:
            shares = [s / total for s in shares]
            report.repair(path, f"line {line}", "ethnic_share",
                          f"shares summed to {total:.4f}; renormalized")
            report.warn(f"census {uid}: ethnic shares renormalized from {total:.4f}")
        out[uid] = CensusRecord(unit_id=uid, ethnic_shares=tuple(shares), **rates)
    return out


def load_crimes(path: str, report: ValidationReport) -> list[CrimeEvent]:
    crimes = []
    for line, row in _csv_rows(path, ("id", "x", "y", "category", "date")):
        cid = row["id"] or f"line {line}"
        if row["x"] in ("", None) or row["y"] in ("", None):
            report.drop(path, cid, "x/y", "missing coordinates")
            continue
        try:
            loc = Point(float(row["x"]), float(row["y"]))
            ts = date.fromisoformat(row["date"])
        except ValueError as e:
            report.drop(path, cid, "x/y/date", f"unparseable value ({e})")
            continue
        cat = row["category"].strip().lower()
        try:
            crimes.append(CrimeEvent(id=cid, location=loc, category=cat, timestamp=ts))
        except ValueError:
            report.drop(path, cid, "category", f"not a Part-1 category: {cat!r}")
    return crimes


def load_poi_category_map(path: str) -> dict[str, str]:
    out = {}
    for line, row in _csv_rows(path, ("raw_category", "canonical_category")):
        canon = row["canonical_category"].strip().lower()
        if canon not in POI_CATEGORIES:
            raise SchemaError(path, f"line {line}", "canonical_category",
                              f"{canon!r} not in {POI_CATEGORIES}")
        out[row["raw_category"].strip().lower()] = canon
    return out


def load_pois(path: str, report: ValidationReport,
              category_map: dict[str, str] | None = None) -> list[Poi]:
    pois = []
    for line, row in _csv_rows(path, ("id", "x", "y", "category")):
        pid = row["id"] or f"line {line}"
        raw = row["category"].strip().lower()
        cat = category_map.get(raw, raw) if category_map else raw
        if cat not in POI_CATEGORIES:
            report.drop(path, pid, "category", f"unmapped category {raw!r}")
            continue
        try:
            pois.append(Poi(id=pid, location=Point(float(row["x"]), float(row["y"])),
                            category=cat))
        except ValueError as e:
            report.drop(path, pid, "x/y", f"unparseable coordinates ({e})")
    return pois


def load_street_graph(nodes_path: str, edges_path: str,
                      report: ValidationReport) -> nx.Graph:
    g = nx.Graph()
    for line, row in _csv_rows(nodes_path, ("node_id", "x", "y")):
        try:
            g.add_node(row["node_id"], x=float(row["x"]), y=float(row["y"]))
        except ValueError as e:
            raise SchemaError(nodes_path, f"line {line}", "x/y", f"non-numeric ({e})")
    for line, row in _csv_rows(edges_path, ("node_id_a", "node_id_b", "length_m")):
        a, b = row["node_id_a"], row["node_id_b"]
        if a not in g or b not in g:
            report.drop(edges_path, f"line {line}", "node_id",
                        f"edge references unknown node {a if a not in g else b}")
            continue
        try:
            length = float(row["length_m"])
        except ValueError as e:
            raise SchemaError(edges_path, f"line {line}", "length_m", f"non-numeric ({e})")
        if length < 0:
            report.drop(edges_path, f"line {line}", "length_m", "negative length")
            continue
        g.add_edge(a, b, length=length)
    if g.number_of_nodes():
        biggest = max(nx.connected_components(g), key=len)
        frac = len(biggest) / g.number_of_nodes()
        if frac < 0.95:
            raise SchemaError(edges_path, "<graph>", "connectivity",
                              f"largest component covers {frac:.1%} of nodes (< 95%)")
    return g


def load_stays(path: str, report: ValidationReport) -> list[Stay]:
    stays = []
    for line, row in _csv_rows(path, ("person_id", "x", "y", "duration_hours")):
        try:
            stays.append(Stay(
                person_id=row["person_id"],
                location=Point(float(row["x"]), float(row["y"])),
                duration_hours=float(row["duration_hours"]),
                day=int(row.get("day") or 0),
            ))
        except ValueError as e:
            report.drop(path, f"line {line}", "x/y/duration", f"unparseable ({e})")
    return stays


def load_trips(path: str, report: ValidationReport) -> list[Trip]:
    trips = []
    cols = ("person_id", "origin_x", "origin_y", "dest_x", "dest_y", "kind")
    for line, row in _csv_rows(path, cols):
        kind = row["kind"].strip().upper()
        try:
            trips.append(Trip(
                person_id=row["person_id"],
                origin=Point(float(row["origin_x"]), float(row["origin_y"])),
                destination=Point(float(row["dest_x"]), float(row["dest_y"])),
                kind=kind,
            ))
        except ValueError as e:
            report.drop(path, f"line {line}", "kind/coords", str(e))
    return trips


def ingest_city(config: IngestConfig) -> tuple[CityDataset, ValidationReport]:
    """Load and validate a full city; returns the dataset plus the report of
    every dropped or repaired record."""
    check_crs_is_projected(config.crs)
    report = ValidationReport()
    units = load_units(config.units_path, report)
    unit_ids = {u.id for u in units}

    blocks = load_blocks(config.blocks_path, unit_ids, report) if config.blocks_path else []
    by_unit: dict[str, list[str]] = {uid: [] for uid in unit_ids}
    for b in blocks:
        by_unit[b.unit_id].append(b.id)
    for u in units:
        u.blocks = by_unit[u.id]

    parcels = load_parcels(config.parcels_path, report) if config.parcels_path else []
    census = load_census(config.census_path, unit_ids, report) if config.census_path else {}
    crimes = load_crimes(config.crimes_path, report) if config.crimes_path else []
    cat_map = (load_poi_category_map(config.poi_category_map_path)
               if config.poi_category_map_path else None)
    pois = load_pois(config.pois_path, report, cat_map) if config.pois_path else []
    graph = (load_street_graph(config.street_nodes_path, config.street_edges_path, report)
             if config.street_nodes_path and config.street_edges_path else nx.Graph())
    stays = load_stays(config.stays_path, report) if config.stays_path else []
    trips = load_trips(config.trips_path, report) if config.trips_path else []

    in_window = [c for c in crimes
                 if config.crime_window[0] <= c.timestamp < config.crime_window[1]]
    n_out = len(crimes) - len(in_window)
    if n_out:
        report.warn(f"{n_out} crime(s) outside the configured window were ignored")

    dataset = CityDataset(
        units=units, blocks=blocks, pois=pois, street_graph=graph,
        crimes=in_window, stays=stays, trips=trips, parcels=parcels,
        census=census, crime_window=config.crime_window, crs=config.crs,
    )
    return dataset, report


# --- writers (the synthetic generator emits exactly these formats) ---------

def _geojson_feature(geom, props: dict) -> dict:
    return {"type": "Feature", "geometry": mapping(geom), "properties": props}


def write_city(dataset: CityDataset, out_dir: str | Path) -> IngestConfig:
    """Write a dataset to ``out_dir`` in the documented ingest formats and
    return an IngestConfig (also saved as ``ingest.yaml``) that reads it back."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    feats = [_geojson_feature(u.geometry, {
        "id": u.id,
        "residential_population": u.residential_population,
        "dwelling_units": u.dwelling_units,
    }) for u in dataset.units]
    (out / "units.geojson").write_text(json.dumps(
        {"type": "FeatureCollection", "features": feats}))

    feats = [_geojson_feature(b.geometry, {
        "id": b.id, "unit_id": b.unit_id, "area_m2": b.area_m2,
        "construction_years": list(b.buildings),
    }) for b in dataset.blocks]
    (out / "blocks.geojson").write_text(json.dumps(
        {"type": "FeatureCollection", "features": feats}))

    feats = [_geojson_feature(p.geometry, {"land_use": p.land_use})
             for p in dataset.parcels]
    (out / "parcels.geojson").write_text(json.dumps(
        {"type": "FeatureCollection", "features": feats}))

    with open(out / "census.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["unit_id", "unemployment_rate", "poverty_rate",
                    "residential_mobility_rate"] + [f"ethnic_share_{k}" for k in range(1, 7)])
        for rec in dataset.census.values():
            w.writerow([rec.unit_id, repr(rec.unemployment_rate), repr(rec.poverty_rate),
                        repr(rec.residential_mobility_rate)]
                       + [repr(s) for s in rec.ethnic_shares])

    with open(out / "crimes.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "x", "y", "category", "date"])
        for c in dataset.crimes:
            w.writerow([c.id, repr(c.location.x), repr(c.location.y),
                        c.category, c.timestamp.isoformat()])

    with open(out / "pois.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "x", "y", "category"])
        for p in dataset.pois:
            w.writerow([p.id, repr(p.location.x), repr(p.location.y), p.category])

    with open(out / "street_nodes.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["node_id", "x", "y"])
        for n, data in dataset.street_graph.nodes(data=True):
            w.writerow([n, repr(data["x"]), repr(data["y"])])
    with open(out / "street_edges.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["node_id_a", "node_id_b", "length_m"])
        for a, b, data in dataset.street_graph.edges(data=True):
            w.writerow([a, b, repr(data["length"])])

    with open(out / "stays.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["person_id", "x", "y", "duration_hours", "day"])
        for s in dataset.stays:
            w.writerow([s.person_id, repr(s.location.x), repr(s.location.y),
                        repr(s.duration_hours), s.day])

    with open(out / "trips.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["person_id", "origin_x", "origin_y", "dest_x", "dest_y", "kind"])
        for t in dataset.trips:
            w.writerow([t.person_id, repr(t.origin.x), repr(t.origin.y),
                        repr(t.destination.x), repr(t.destination.y), t.kind])

    window = dataset.crime_window or (date(2000, 1, 1), date(2001, 1, 1))
    config = {
        "crs": dataset.crs or "EPSG:32633",
        "crime_window": {"start": window[0].isoformat(), "end": window[1].isoformat()},
        "units": "units.geojson", "blocks": "blocks.geojson",
        "parcels": "parcels.geojson", "census": "census.csv",
        "crimes": "crimes.csv", "pois": "pois.csv",
        "street_nodes": "street_nodes.csv", "street_edges": "street_edges.csv",
        "stays": "stays.csv", "trips": "trips.csv",
    }
    import yaml

    (out / "ingest.yaml").write_text(yaml.safe_dump(config, sort_keys=True))
    return IngestConfig.from_file(out / "ingest.yaml")
