"""Great-circle geometry, country tables and the GeoJSON attack-flow map."""

from __future__ import annotations

import csv
import io
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Mapping, Sequence

from .affinity import AttackGraph
from .enrichment import EnrichmentStore, GeoRecord
from .ipspace import int_to_ip

EARTH_RADIUS_KM = 6371.0088
UNKNOWN_COUNTRY = "??"


class DegenerateCentroidError(ValueError):
    """Weighted unit vectors cancel out, so no mean direction exists."""


@dataclass(frozen=True)
class GeoPoint:
    latitude: float
    longitude: float

    def __post_init__(self) -> None:
        if not (abs(self.latitude) <= 90 and abs(self.longitude) <= 180):
            raise ValueError(f"invalid coordinates ({self.latitude}, {self.longitude})")

    def to_vector(self) -> tuple[float, float, float]:
        lat, lon = math.radians(self.latitude), math.radians(self.longitude)
        return (math.cos(lat) * math.cos(lon), math.cos(lat) * math.sin(lon), math.sin(lat))

    @classmethod
    def from_vector(cls, x: float, y: float, z: float) -> "GeoPoint":
        lat = math.degrees(math.atan2(z, math.hypot(x, y)))
        lon = math.degrees(math.atan2(y, x))
        return cls(lat, lon)


def haversine_km(a: GeoPoint, b: GeoPoint, radius: float = EARTH_RADIUS_KM) -> float:
    lat1, lon1, lat2, lon2 = map(math.radians, (a.latitude, a.longitude, b.latitude, b.longitude))
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * radius * math.asin(math.sqrt(min(1.0, h)))


def spherical_centroid(points: Sequence[GeoPoint], weights: Sequence[float] | None = None) -> GeoPoint:
    """Weighted mean direction of ``points`` on the sphere."""
    if not points:
        raise ValueError("centroid of no points")
    if weights is None:
        weights = [1.0] * len(points)
    if len(weights) != len(points) or any(w <= 0 for w in weights):
        raise ValueError("weights must be positive, one per point")
    vecs = [p.to_vector() for p in points]
    # fsum keeps the result independent of point order
    x, y, z = (math.fsum(w * v[i] for w, v in zip(weights, vecs)) for i in range(3))
    norm = math.sqrt(x * x + y * y + z * z)
    if norm < 1e-12 * math.fsum(weights):
        raise DegenerateCentroidError("points balance out; no mean direction")
    return GeoPoint.from_vector(x / norm, y / norm, z / norm)


def great_circle_path(a: GeoPoint, b: GeoPoint, segments: int = 32) -> list[GeoPoint]:
    """Points along the shorter great-circle arc from ``a`` to ``b``, endpoints included."""
    va, vb = a.to_vector(), b.to_vector()
    dot = max(-1.0, min(1.0, sum(p * q for p, q in zip(va, vb))))
    omega = math.acos(dot)
    if omega < 1e-12 or math.pi - omega < 1e-9:
        return [a, b]
    s = math.sin(omega)
    out = []
    for k in range(segments + 1):
        t = k / segments
        fa, fb = math.sin((1 - t) * omega) / s, math.sin(t * omega) / s
        out.append(GeoPoint.from_vector(*(fa * p + fb * q for p, q in zip(va, vb))))
    out[0], out[-1] = a, b
    return out


# --- country tables ---------------------------------------------------------

def percent_half_up(count: int, total: int) -> float:
    if total == 0:
        return 0.0
    return float((Decimal(100 * count) / Decimal(total)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class CountryTable:
    role: str
    total: int
    rows: list[tuple[str, int, float]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["country", "count", "percent"])
        for country, count, pct in self.rows:
            w.writerow([country, count, f"{pct:.2f}"])
        return buf.getvalue()


def country_table(records: Iterable[tuple[str, str | None]], role: str, k: int | None = None) -> CountryTable:
    """Occurrence counts per country for one role, largest first.

    ``records`` are ``(role, country)`` pairs, one per occurrence. Missing
    countries count under ``"??"``. Percentages are of the role's full total
    even when only the top ``k`` rows are kept.
    """
    counts: Counter[str] = Counter()
    for rec_role, country in records:
        if rec_role == role:
            counts[country or UNKNOWN_COUNTRY] += 1
    total = sum(counts.values())
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if k is not None:
        ordered = ordered[:k]
    return CountryTable(role, total, [(c, n, percent_half_up(n, total)) for c, n in ordered])


# --- flow map ---------------------------------------------------------------

def _point(rec: GeoRecord | GeoPoint) -> GeoPoint:
    return rec if isinstance(rec, GeoPoint) else GeoPoint(rec.latitude, rec.longitude)


def _coords(p: GeoPoint) -> list[float]:
    return [round(p.longitude, 6), round(p.latitude, 6)]


@dataclass
class ClusterPolicy:
    min_degree: int = 500
    key: str = "country"  # or "grid"
    grid_degrees: float = 5.0
    radius_scale: float = 1.0
    line_segments: int = 32

    def group(self, rec: GeoRecord) -> str:
        if self.key == "country":
            return rec.country
        if self.key == "grid":
            row = math.floor(rec.latitude / self.grid_degrees)
            col = math.floor(rec.longitude / self.grid_degrees)
            return f"{row},{col}"
        raise ValueError(f"unknown cluster key {self.key!r}")


@dataclass
class FlowMapDocument:
    features: list[dict] = field(default_factory=list)
    diagnostics: dict[str, int] = field(default_factory=dict)

    def to_geojson(self) -> dict:
        return {"type": "FeatureCollection", "features": self.features, "diagnostics": self.diagnostics}

    def by_kind(self, kind: str) -> list[dict]:
        return [f for f in self.features if f["properties"]["kind"] == kind]


def flow_map(graph: AttackGraph, geo: EnrichmentStore | Mapping[int, GeoRecord],
             policy: ClusterPolicy | None = None) -> FlowMapDocument:
    """Dropzones with at least ``policy.min_degree`` targets, their target
    clusters placed at spherical centroids, and a geodesic line to each."""
    policy = policy or ClusterPolicy()
    lookup = geo.geo if isinstance(geo, EnrichmentStore) else geo.get
    doc = FlowMapDocument()
    diag = Counter(qualifying_dropzones=0, dropzones_without_geo=0, targets_without_geo=0,
                   degenerate_centroids=0, below_min_degree=0)
    for dz, targets in graph.targets_of.items():
        if len(targets) < policy.min_degree:
            diag["below_min_degree"] += 1
            continue
        diag["qualifying_dropzones"] += 1
        dz_rec = lookup(dz)
        if dz_rec is None:
            diag["dropzones_without_geo"] += 1
            continue
        groups: dict[str, list[GeoRecord]] = defaultdict(list)
        for t in sorted(targets):
            rec = lookup(t)
            if rec is None:
                diag["targets_without_geo"] += 1
                continue
            groups[policy.group(rec)].append(rec)
        if not groups:
            continue
        dz_id = f"dropzone:{int_to_ip(dz)}"
        dz_point = _point(dz_rec)
        doc.features.append({
            "type": "Feature",
            "id": dz_id,
            "geometry": {"type": "Point", "coordinates": _coords(dz_point)},
            "properties": {"kind": "dropzone", "address": int_to_ip(dz), "country": dz_rec.country,
                           "degree": len(targets), "geolocated_targets": sum(map(len, groups.values()))},
        })
        for key in sorted(groups):
            members = groups[key]
            try:
                center = spherical_centroid([_point(r) for r in members])
            except DegenerateCentroidError:
                diag["degenerate_centroids"] += 1
                center = _point(members[0])
            cl_id = f"cluster:{int_to_ip(dz)}:{key}"
            doc.features.append({
                "type": "Feature",
                "id": cl_id,
                "geometry": {"type": "Point", "coordinates": _coords(center)},
                "properties": {"kind": "target-cluster", "dropzone": dz_id, "key": key, "size": len(members),
                               "radius": len(members) * policy.radius_scale},
            })
            path = great_circle_path(dz_point, center, policy.line_segments)
            doc.features.append({
                "type": "Feature",
                "id": f"flow:{int_to_ip(dz)}:{key}",
                "geometry": {"type": "LineString", "coordinates": [_coords(p) for p in path]},
                "properties": {"kind": "flow", "from": dz_id, "to": cl_id, "size": len(members),
                               "distance_km": round(haversine_km(dz_point, center), 3)},
            })
    doc.diagnostics = dict(sorted(diag.items()))
    return doc


def distance_histogram(graph: AttackGraph, geo: EnrichmentStore | Mapping[int, GeoRecord],
                       bin_km: float = 1000.0) -> tuple[dict[int, int], int]:
    """Counts of distinct (dropzone, target) pairs per ``bin_km`` distance bin.

    Returns ``(histogram keyed by bin lower edge in km, pairs skipped for lack of geo)``.
    """
    lookup = geo.geo if isinstance(geo, EnrichmentStore) else geo.get
    hist: Counter[int] = Counter()
    skipped = 0
    for dz, targets in graph.targets_of.items():
        a = lookup(dz)
        for t in targets:
            b = lookup(t)
            if a is None or b is None:
                skipped += 1
                continue
            d = haversine_km(_point(a), _point(b))
            hist[int(d // bin_km * bin_km)] += 1
    return dict(sorted(hist.items())), skipped
