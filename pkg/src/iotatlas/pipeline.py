"""Stage runners. Each stage reads upstream artifacts from the output
directory and writes its own JSONL/CSV/JSON files under ``<out>/<stage>/``."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import shutil
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterator

from . import affinity, exposure, geo, netscope
from .config import ConfigError, PipelineConfig
from .enrichment import (
    GEO,
    SCAN,
    CsvGeoProvider,
    EnrichmentStore,
    FixtureScanProvider,
    HttpProvider,
    Provider,
    enrich_batch,
)
from .extract import ExtractionPolicy, ExtractionReport, Role, RoleManifest, extract_corpus, load_corpus
from .ipspace import int_to_ip

log = logging.getLogger(__name__)

STAGES = ("extract", "enrich", "affinity", "geo", "exposure", "netscope", "report")
DEPENDS = {
    "extract": (),
    "enrich": ("extract",),
    "affinity": ("extract",),
    "geo": ("extract", "enrich"),
    "exposure": ("extract", "enrich"),
    "netscope": ("extract", "enrich"),
    "report": ("extract",),
}
ROLE_NAMES = {Role.DROPZONE: "dropzone", Role.TARGET: "target"}


class StageError(Exception):
    exit_code = 1
    kind = "error"


class DependencyError(StageError):
    exit_code = 3
    kind = "dependency"


class ProviderConfigError(StageError):
    exit_code = 4
    kind = "provider"


class LockError(StageError):
    exit_code = 1
    kind = "lock"


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def stage_done(out: Path, stage: str) -> bool:
    return (out / stage / "summary.json").is_file()


def check_dependencies(out: Path, stage: str) -> None:
    missing = [d for d in DEPENDS[stage] if not stage_done(out, d)]
    if missing:
        raise DependencyError(f"stage {stage!r} needs {', '.join(missing)} to run first")


@contextmanager
def output_lock(out: Path) -> Iterator[None]:
    out.mkdir(parents=True, exist_ok=True)
    lock = out / ".atlas.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{lock} exists; another stage is running in this output directory") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _fresh_dir(out: Path, stage: str) -> Path:
    d = out / stage
    if d.exists():
        shutil.rmtree(d)
    d.mkdir(parents=True)
    return d


def _clock(cfg: PipelineConfig) -> Callable[[], float]:
    fixed = cfg.fixed_clock()
    return time.time if fixed is None else (lambda: fixed)


def _open_store(cfg: PipelineConfig, out: Path) -> EnrichmentStore:
    path = Path(cfg.cache_path) if cfg.cache_path else out / "enrich" / "store.jsonl"
    return EnrichmentStore.open(path, cfg.ttl_seconds, _clock(cfg))


def _providers(cfg: PipelineConfig) -> list[Provider]:
    providers: list[Provider] = []
    if cfg.geo_fixture:
        providers.append(CsvGeoProvider.from_path(cfg.geo_fixture))
    if cfg.scan_fixture:
        providers.append(FixtureScanProvider.from_path(cfg.scan_fixture))
    if not cfg.offline:
        for kind in (GEO, SCAN):
            live = HttpProvider.from_env(kind)
            if live is not None:
                providers.append(live)
    if not providers:
        raise ProviderConfigError(
            "no enrichment provider: set geo_fixture/scan_fixture or GEO_PROVIDER_URL/SCAN_PROVIDER_URL"
        )
    return providers


# --- stages -----------------------------------------------------------------

def run_extract(cfg: PipelineConfig, out: Path) -> dict:
    if not cfg.samples_dir:
        raise ConfigError("samples_dir is required for extract")
    if not Path(cfg.samples_dir).is_dir():
        raise ConfigError(f"samples_dir {cfg.samples_dir} is not a directory")
    policy = ExtractionPolicy(bogons=tuple(cfg.bogons), raw32=cfg.raw32)
    manifest = RoleManifest.load(cfg.manifest) if cfg.manifest else None
    samples, errors = load_corpus(cfg.samples_dir)
    report = extract_corpus(samples, policy, manifest, cfg.workers, errors)
    d = _fresh_dir(out, "extract")
    report.write(d)
    return report.summary()


def _report(out: Path) -> ExtractionReport:
    return ExtractionReport.read(out / "extract")


def run_enrich(cfg: PipelineConfig, out: Path) -> dict:
    report = _report(out)
    providers = _providers(cfg)
    # keep the cache across the directory reset
    store = _open_store(cfg, out)
    d = _fresh_dir(out, "enrich")
    if not cfg.cache_path:
        store.path = d / "store.jsonl"
    rates = {p.provider_id: cfg.rate_limit for p in providers}

    endpoints = sorted(report.unique_dropzones | report.unique_targets)
    store = enrich_batch(endpoints, providers, store, rate_limits=rates, in_flight=cfg.in_flight)

    masked = report.masked_endpoints
    scope_addresses = []
    for p in providers:
        if p.kind == SCAN and hasattr(p, "addresses"):
            scope_addresses.extend(a for a in p.addresses() if masked.contains(a))
    scan_providers = [p for p in providers if p.kind == SCAN]
    if scope_addresses and scan_providers:
        store = enrich_batch(scope_addresses, scan_providers, store, rate_limits=rates, in_flight=cfg.in_flight)
    store.compact()
    if cfg.cache_path:
        shutil.copyfile(store.path, d / "store.jsonl")

    return {
        "endpoints": len(endpoints),
        "scope_addresses": len(set(scope_addresses)),
        "store_entries": len(store),
        "providers": sorted(p.provider_id for p in providers),
        "status": store.status_counts(),
    }


def _load_store(cfg: PipelineConfig, out: Path) -> EnrichmentStore:
    return EnrichmentStore.open(out / "enrich" / "store.jsonl", cfg.ttl_seconds, _clock(cfg))


def run_affinity(cfg: PipelineConfig, out: Path) -> dict:
    report = _report(out)
    graph = affinity.build_graph(report)
    hist = affinity.target_histogram(graph, cfg.multiplicity_threshold)
    stats = affinity.dropzone_stats(graph)
    overlap = affinity.pairwise_overlap(graph, cfg.overlap_metric, keep_pairs=cfg.keep_pair_table)

    d = _fresh_dir(out, "affinity")
    with open(d / "edges.jsonl", "w") as fh:
        for dz, tg, sid in graph.edges:
            fh.write(json.dumps({"dropzone": int_to_ip(dz), "target": int_to_ip(tg), "sample_id": sid},
                                sort_keys=True) + "\n")
    _write_csv(d / "target_histogram.csv", ["multiplicity", "targets"], hist.histogram.items())
    _write_csv(d / "dropzone_degrees.csv", ["dropzone", "unique_targets", "occurrences"],
               [(int_to_ip(dz), n, graph.occurrences_of[dz]) for dz, n in stats.degrees.items()])
    _write_csv(d / "overlap_summary.csv", ["label", "count", "fraction"],
               [(lbl, c, f"{f:.6f}") for lbl, c, f in overlap.bins])
    if overlap.pairs is not None:
        _write_csv(d / "overlap_pairs.csv", ["dropzone_a", "dropzone_b", "metric"],
                   [(int_to_ip(a), int_to_ip(b), f"{float(v):.6f}") for a, b, v in overlap.pairs])
    return {
        "edges": len(graph),
        "diagnostics": graph.diagnostics,
        "targets": {
            "count": hist.target_count,
            "empty": hist.empty,
            "below_threshold": hist.below_threshold,
            "threshold": hist.threshold,
            "fraction_below": hist.fraction_below,
            "max_multiplicity": hist.max_multiplicity,
            "max_targets": [int_to_ip(t) for t in hist.max_targets],
        },
        "dropzones": {
            "count": len(stats.degrees),
            "empty": stats.empty,
            "max_degree": stats.max_degree,
            "max_dropzones": [int_to_ip(x) for x in stats.max_dropzones],
            "mean": stats.mean,
            "mean_rounded": round(stats.mean),
            "mean_unique_degree": stats.mean_unique_degree,
        },
        "overlap": {
            "metric": overlap.metric,
            "total_cases": overlap.total_cases,
            "overlapping_bins": overlap.overlapping_bins,
            "bins": [{"label": lbl, "count": c, "fraction": f} for lbl, c, f in overlap.bins],
        },
    }


def run_geo(cfg: PipelineConfig, out: Path) -> dict:
    report = _report(out)
    store = _load_store(cfg, out)
    graph = affinity.build_graph(report)
    d = _fresh_dir(out, "geo")

    tables = {}
    records = []
    for hit in report.iter_hits():
        if hit.role in ROLE_NAMES and hit.address is not None:
            rec = store.geo(hit.address)
            records.append((ROLE_NAMES[hit.role], rec.country if rec else None))
    for role in ("dropzone", "target"):
        full = geo.country_table(records, role)
        (d / f"countries_{role}.csv").write_text(full.to_csv())
        top = geo.country_table(records, role, cfg.top_k)
        tables[role] = {"total": top.total, "top": [list(r) for r in top.rows]}

    policy = geo.ClusterPolicy(min_degree=cfg.min_degree, key=cfg.cluster_key, grid_degrees=cfg.grid_degrees)
    fmap = geo.flow_map(graph, store, policy)
    _dump_json(d / "flow_map.geojson", fmap.to_geojson())

    hist, skipped = geo.distance_histogram(graph, store, cfg.distance_bin_km)
    _write_csv(d / "distances.csv", ["bin_start_km", "pairs"], hist.items())
    return {
        "country_tables": tables,
        "flow_map": {
            "dropzones": len(fmap.by_kind("dropzone")),
            "clusters": len(fmap.by_kind("target-cluster")),
            "flows": len(fmap.by_kind("flow")),
            "diagnostics": fmap.diagnostics,
        },
        "distance_pairs_without_geo": skipped,
    }


def _ruleset(cfg: PipelineConfig):
    return exposure.load_ruleset(cfg.amplification_ruleset) if cfg.amplification_ruleset else exposure.DEFAULT_RULESET


def run_exposure(cfg: PipelineConfig, out: Path) -> dict:
    report = _report(out)
    store = _load_store(cfg, out)
    ruleset = _ruleset(cfg)
    d = _fresh_dir(out, "exposure")
    summary: dict = {}
    flag_rows = []
    for role, population in (("dropzone", report.unique_dropzones), ("target", report.unique_targets)):
        profile = exposure.port_profile(store, population, role)
        (d / f"ports_{role}.csv").write_text(profile.to_csv())
        flags = exposure.amplification_flags(profile, ruleset)
        flag_rows.extend((role, f.port, f.protocol, f.hosts, f.note) for f in flags)
        cves = exposure.cve_summary(store, population)
        (d / f"cves_{role}.csv").write_text(exposure.cve_csv(cves))
        summary[role] = {
            **profile.summary(),
            "amplification_flags": [{"port": f.port, "protocol": f.protocol, "hosts": f.hosts} for f in flags],
            "top_cves": [{"rank": c.rank, "cve_id": c.cve_id, "severity": c.severity, "hosts": c.hosts}
                         for c in cves[:10]],
        }
    _write_csv(d / "amplification_flags.csv", ["role", "port", "protocol", "hosts", "note"], flag_rows)
    return summary


def run_netscope(cfg: PipelineConfig, out: Path) -> dict:
    report = _report(out)
    store = _load_store(cfg, out)
    scope = netscope.build_scope(report.masked_prefixes, store)
    result = netscope.scope_exposure(scope, cfg.threshold, cfg.min_support, _ruleset(cfg))
    d = _fresh_dir(out, "netscope")
    _dump_json(d / "scope.json", scope.summary())
    (d / "clusters.csv").write_text(exposure.cluster_csv(scope.clusters))
    (d / "recommendations.csv").write_text(result.plan.to_csv())
    _write_csv(d / "flags.csv", ["device_type", "port", "protocol", "hosts", "note"],
               [("*", f.port, f.protocol, f.hosts, f.note) for f in result.flags]
               + [(t, f.port, f.protocol, f.hosts, f.note) for t, fs in result.cluster_flags.items() for f in fs])
    return {
        "scope": scope.summary(),
        "threshold": cfg.threshold,
        "min_support": cfg.min_support,
        "close_recommendations": len(result.plan.closes()),
        "recommendations": len(result.plan.recommendations),
        "insufficient_support": [list(x) for x in result.plan.insufficient_support],
        "diagnostics": result.diagnostics,
    }


# report sections: (bundle path, source path relative to out, owning stage)
REPORT_SECTIONS = (
    ("extraction/summary.json", "extract/summary.json", "extract"),
    ("tables/countries_dropzone.csv", "geo/countries_dropzone.csv", "geo"),
    ("tables/countries_target.csv", "geo/countries_target.csv", "geo"),
    ("tables/distances.csv", "geo/distances.csv", "geo"),
    ("maps/flow_map.geojson", "geo/flow_map.geojson", "geo"),
    ("affinity/overlap_summary.csv", "affinity/overlap_summary.csv", "affinity"),
    ("affinity/target_histogram.csv", "affinity/target_histogram.csv", "affinity"),
    ("affinity/dropzone_degrees.csv", "affinity/dropzone_degrees.csv", "affinity"),
    ("exposure/ports_dropzone.csv", "exposure/ports_dropzone.csv", "exposure"),
    ("exposure/ports_target.csv", "exposure/ports_target.csv", "exposure"),
    ("exposure/amplification_flags.csv", "exposure/amplification_flags.csv", "exposure"),
    ("exposure/cves_dropzone.csv", "exposure/cves_dropzone.csv", "exposure"),
    ("exposure/cves_target.csv", "exposure/cves_target.csv", "exposure"),
    ("netscope/scope.json", "netscope/scope.json", "netscope"),
    ("netscope/recommendations.csv", "netscope/recommendations.csv", "netscope"),
    ("netscope/flags.csv", "netscope/flags.csv", "netscope"),
)


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def render_report(out: Path) -> dict:
    """Copy available stage outputs into ``<out>/report`` with a digest manifest."""
    d = _fresh_dir(out, "report")
    files, omissions = [], []
    for dest, src, stage in REPORT_SECTIONS:
        source = out / src
        if not stage_done(out, stage) or not source.is_file():
            omissions.append({"file": dest, "stage": stage, "reason": f"stage {stage} has not run"})
            continue
        target = d / dest
        target.parent.mkdir(parents=True, exist_ok=True)
        shutil.copyfile(source, target)
        files.append({"path": dest, "sha256": sha256_file(target), "bytes": target.stat().st_size})
    manifest = {"files": files, "omissions": omissions}
    _dump_json(d / "manifest.json", manifest)
    return {"files": len(files), "omitted": len(omissions),
            "omitted_stages": sorted({o["stage"] for o in omissions})}


def run_report(cfg: PipelineConfig, out: Path) -> dict:
    return render_report(out)


RUNNERS = {
    "extract": run_extract,
    "enrich": run_enrich,
    "affinity": run_affinity,
    "geo": run_geo,
    "exposure": run_exposure,
    "netscope": run_netscope,
    "report": run_report,
}


def run_stage(stage: str, cfg: PipelineConfig, out: str | os.PathLike) -> dict:
    """Run one stage under the output-directory lock; write its summary.json."""
    if stage not in RUNNERS:
        raise ValueError(f"unknown stage {stage!r}")
    out = Path(out)
    with output_lock(out):
        check_dependencies(out, stage)
        log.info("running stage %s", stage)
        summary = RUNNERS[stage](cfg, out)
        doc = {"stage": stage, **summary}
        _dump_json(out / stage / "summary.json", doc)
    return doc


def artifact_digests(out: str | os.PathLike) -> dict[str, str]:
    """sha256 of every file under ``out`` (lock file excluded), keyed by relative path."""
    root = Path(out)
    return {str(p.relative_to(root)): sha256_file(p)
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != ".atlas.lock"}
