"""Endpoint extraction and infrastructure analytics for IoT malware corpora."""

from .affinity import AttackGraph, build_graph, dropzone_stats, pairwise_overlap, target_histogram
from .enrichment import EnrichmentStore, GeoRecord, ScanRecord, enrich_batch, lookup_geo, lookup_scan
from .extract import (
    EndpointHit,
    ExtractionPolicy,
    ExtractionReport,
    MalwareSample,
    Role,
    RoleManifest,
    classify_role,
    detect_masked,
    extract_corpus,
    scan_ascii_ipv4,
)
from .geo import GeoPoint, country_table, flow_map, haversine_km, spherical_centroid
from .ipspace import Prefix, PrefixSet, address_count, contains, normalize, parse_prefix

__version__ = "0.1.0"
