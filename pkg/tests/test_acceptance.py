"""Acceptance criteria 1-10, each timed against its runtime budget.

Run ``pytest tests/test_acceptance.py -v``; a PASS/FAIL line per criterion is
printed in the terminal summary.
"""

import random
from fractions import Fraction

import pytest

from iotatlas.affinity import AttackGraph, build_graph, dropzone_stats, pairwise_overlap, target_histogram
from iotatlas.cli import main
from iotatlas.enrichment import EnrichmentStore, ScanRecord, StoreEntry
from iotatlas.exposure import closure_recommendations, device_clusters
from iotatlas.extract import ExtractionPolicy, Role, extract_corpus, scan_ascii_ipv4
from iotatlas.geo import GeoPoint, country_table, haversine_km
from iotatlas.ipspace import Prefix, address_count, ip_to_int, normalize
from iotatlas.pipeline import artifact_digests
from iotatlas.synth import affinity_corpus, coverage_corpus, demo_project

from oracles import enumerate_quads, pairwise_table

pytestmark = pytest.mark.acceptance


def _occurrences(role, top, total, filler_prefix):
    records = [(role, c) for c, n in top for _ in range(n)]
    rest = total - len(records)
    smallest = min(n for _, n in top)
    buckets = rest // (smallest - 1) + 1  # every filler country stays below the top five
    records += [(role, f"{filler_prefix}{i % buckets}") for i in range(rest)]
    return records


def test_c1_country_table_arithmetic(criterion):
    with criterion(1, "top-5 country percentages", 1.0):
        dz = [("US", 1041), ("NL", 278), ("FR", 188), ("GB", 183), ("IT", 177)]
        tg = [("VN", 26290), ("BR", 20572), ("CN", 15799), ("IN", 5598), ("PK", 5076)]
        dz_table = country_table(_occurrences("dropzone", dz, 2407, "D"), "dropzone", k=5)
        tg_table = country_table(_occurrences("target", tg, 106428, "T"), "target", k=5)
        expected_dz = [43.25, 11.55, 7.81, 7.60, 7.35]
        expected_tg = [24.70, 19.33, 14.84, 5.26, 4.77]
        assert [(c, n) for c, n, _ in dz_table.rows] == dz
        assert [(c, n) for c, n, _ in tg_table.rows] == tg
        for (_, _, got), want in zip(dz_table.rows + tg_table.rows, expected_dz + expected_tg):
            assert abs(got - want) <= 0.01 + 1e-9


def test_c2_coverage_arithmetic(criterion):
    with criterion(2, "sample coverage 40.16% / 95.66%", 30.0):
        report = extract_corpus(coverage_corpus(2423, 973, 2318, seed=0))
        roles = report.summary()["roles"]
        assert report.samples_with(Role.TARGET) == 973
        assert report.samples_with(Role.DROPZONE) == 2318
        assert roles["target-candidate"]["coverage_percent"] == 40.16
        assert roles["dropzone-candidate"]["coverage_percent"] == 95.66


def test_c3_mean_degree(criterion):
    with criterion(3, "mean dropzone degree 121.35", 5.0):
        edges = []
        for d in range(877):
            degree = 122 if d < 311 else 121
            edges.extend((d, 10_000 + (d * 7 + k) % 3000, f"s{d}") for k in range(degree))
        stats = dropzone_stats(AttackGraph(edges))
        assert stats.total_occurrences == 106_428 and len(stats.degrees) == 877
        assert round(stats.mean, 2) == 121.35
        assert round(stats.mean) == 121


def test_c4_plant_and_recover(criterion):
    with criterion(4, "plant-and-recover affinity (77%, 72, 1265)", 60.0):
        plan = affinity_corpus(n_targets=2200, below_fraction=0.77, max_multiplicity=72, big_degree=1265, seed=1)
        report = extract_corpus(plan.samples, manifest=plan.manifest)
        graph = build_graph(report)
        hist = target_histogram(graph)
        stats = dropzone_stats(graph)
        assert dict(graph.multiplicity) == plan.multiplicity
        assert hist.below_threshold == round(2200 * 0.77) and hist.fraction_below == 0.77
        assert hist.max_multiplicity == 72 and len(hist.max_targets) == 1
        assert stats.max_degree == 1265 and stats.max_dropzones == [plan.big_dropzone]


def _strict_bins(value):
    return (value >= 1, value > Fraction(4, 5), value < Fraction(1, 10))


def test_c5_overlap_oracle(criterion):
    with criterion(5, "pairwise overlap equals double-loop oracle", 30.0):
        rng = random.Random(5)
        for _ in range(100):
            n_dz = rng.randint(0, 20)
            targets_of = {d: set(rng.sample(range(50), rng.randint(1, 12))) for d in range(n_dz)}
            if n_dz > 2 and rng.random() < 0.3:
                targets_of[1] = set(targets_of[0])  # force some identical sets
            graph = AttackGraph((d, t, f"s{d}") for d, ts in targets_of.items() for t in ts)
            for metric in ("jaccard", "containment"):
                summary = pairwise_overlap(graph, metric=metric, keep_pairs=True)
                expected = pairwise_table(targets_of, metric)
                assert {(a, b): v for a, b, v in summary.pairs} == expected
                assert summary.total_cases == len(expected)
                counts = [sum(_strict_bins(v)[k] for v in expected.values()) for k in range(3)]
                assert [c for _, c, _ in summary.bins] == counts

        # boundary values sit outside the strict bins
        a = set(range(5))
        for metric, sets in (("jaccard", {0: a, 1: a - {4}, 2: set(range(100, 110)), 3: {100}}),
                             ("containment", {0: a, 1: (a - {4}) | {9}, 2: set(range(100, 110)),
                                              3: {100, 200, 201, 202, 203, 204, 205, 206, 207, 208}})):
            graph = AttackGraph((d, t, f"s{d}") for d, ts in sets.items() for t in ts)
            summary = pairwise_overlap(graph, metric=metric, keep_pairs=True)
            table = {(x, y): v for x, y, v in summary.pairs}
            assert table[(0, 1)] == Fraction(4, 5) and table[(2, 3)] == Fraction(1, 10)
            assert summary.count(">80%") == 0
            zero_pairs = sum(1 for v in table.values() if v == 0)
            assert summary.count("<10%") == zero_pairs
        identical = AttackGraph([(0, 1, "a"), (1, 1, "b")])
        s = pairwise_overlap(identical)
        assert s.count("100%") == 1 and s.count(">80%") == 1 and s.overlapping_bins


def test_c6_cidr_accounting(criterion):
    with criterion(6, "CIDR address_count and contains vs enumeration", 60.0):
        fixture = [Prefix((202 << 24) | (i << 8), 24) for i in range(27)]
        fixture += [Prefix((200 << 24) | (i << 16), 16) for i in range(256)]
        fixture += [Prefix((201 << 24) | (i << 16), 16) for i in range(179)]
        fixture += [Prefix(o << 24, 8) for o in range(1, 126)]
        assert address_count(normalize(fixture, merge=False)) == 2_125_667_072
        assert address_count(normalize(fixture)) == 2_125_667_072

        rng = random.Random(6)
        base = ip_to_int("77.5.0.0")
        span = range(base, base + 65536)
        for _ in range(1000):
            raw = [Prefix.covering(base + rng.randrange(65536), rng.choice([16, 18, 20, 22, 24, 24, 26, 28, 30, 32]))
                   for _ in range(rng.randint(0, 12))]
            raw += rng.choices(raw, k=rng.randint(0, 3)) if raw else []  # multiset: repeats
            bitmap = bytearray(65536)
            for p in raw:
                lo = p.base - base
                bitmap[lo:lo + p.size] = b"\x01" * p.size
            s = normalize(raw)
            assert bytes(map(s.contains, span)) == bytes(bitmap)
            assert address_count(s) == sum(bitmap)


def test_c7_geodesics(criterion):
    with criterion(7, "haversine closed forms, symmetry, zero distance", 5.0):
        assert abs(haversine_km(GeoPoint(0, 0), GeoPoint(0, 90)) - 10007.54) <= 0.1
        assert abs(haversine_km(GeoPoint(0, 0), GeoPoint(0, 180)) - 20015.09) <= 0.1
        rng = random.Random(7)
        for _ in range(10_000):
            a = GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 180))
            b = GeoPoint(rng.uniform(-90, 90), rng.uniform(-180, 180))
            assert haversine_km(a, b) == haversine_km(b, a)
            assert haversine_km(a, a) == 0.0


def _hvac_store(n, usage):
    entries = []
    for i in range(n):
        ports = frozenset(p for p, k in usage.items() if i < k)
        entries.append(StoreEntry(i, scan=ScanRecord(i, ports, (), "hvac", "fixture", 0.0),
                                  status={"scan": "fresh"}, checked_at={"scan": 0.0}))
    store = EnrichmentStore()
    store.commit(entries)
    return store


def test_c8_exposure_rule(criterion):
    with criterion(8, "port-closure rule (5% close, 90% keep, 10% keep, min_support)", 1.0):
        clusters, _ = device_clusters(_hvac_store(100, {123: 5, 80: 90}))
        plan = closure_recommendations(clusters, threshold=0.10, min_support=20)
        assert {r.port: r.action for r in plan.recommendations} == {123: "close", 80: "keep"}

        clusters, _ = device_clusters(_hvac_store(100, {123: 10}))
        assert closure_recommendations(clusters).recommendations[0].action == "keep"

        clusters, _ = device_clusters(_hvac_store(10, {123: 0, 80: 1}))
        plan = closure_recommendations(clusters, min_support=20)
        assert plan.recommendations == [] and plan.insufficient_support == [("hvac", 10)]


_NEAR_MISSES = ["1.2.3.4.5", "999.1.2.3", "01.2.3.4", "1.2.3.256", "10.20.30", "1..2.3.4", "1.2.3.04",
                "255.255.255.2555", ".1.2.3.4", "300.300.300.300"]


def _blob(rng):
    parts = []
    planted = []
    for _ in range(rng.randint(0, 12)):
        kind = rng.random()
        if kind < 0.4:
            q = ".".join(str(rng.choice([rng.randrange(256), rng.randrange(10), 255, 0])) for _ in range(4))
            planted.append(q)
            parts.append(q.encode())
        elif kind < 0.7:
            parts.append(rng.choice(_NEAR_MISSES).encode())
        else:
            parts.append(bytes(rng.randrange(256) for _ in range(rng.randint(0, 40))))
        parts.append(rng.choice([b" ", b"\x00", b",", b"/", b":", b"a", b"\n", b""]))
    return b"".join(parts), planted


def test_c9_extraction_oracle(criterion):
    with criterion(9, "dotted-quad extraction vs exhaustive enumeration", 60.0):
        policy = ExtractionPolicy(bogons=())  # the oracle knows nothing of bogons
        rng = random.Random(9)
        tp = fp = fn = 0
        for _ in range(500):
            blob, _ = _blob(rng)
            got = {(h.byte_offset, h.literal) for h in scan_ascii_ipv4(blob, policy)}
            want = set(enumerate_quads(blob))
            tp += len(got & want)
            fp += len(got - want)
            fn += len(want - got)
        assert tp > 0
        assert fp == 0 and fn == 0, f"precision/recall misses: fp={fp} fn={fn}"

        # planted quads between clean separators are all recovered, in order
        for _ in range(500):
            quads = [".".join(str(rng.randrange(256)) for _ in range(4)) for _ in range(rng.randint(1, 8))]
            noise = [bytes(rng.choice(b"\x00\xffxyz ,:/") for _ in range(rng.randint(1, 5))) for _ in quads]
            blob = b"".join(q.encode() + n for q, n in zip(quads, noise))
            assert [h.literal for h in scan_ascii_ipv4(blob, policy)] == quads


def test_c10_pipeline_determinism(criterion, tmp_path):
    with criterion(10, "two full fixture runs give identical digests", 120.0):
        config = demo_project(tmp_path / "project")
        out_a, out_b = tmp_path / "run_a", tmp_path / "run_b"
        assert main(["all", "--config", str(config), "--out", str(out_a)]) == 0
        assert main(["all", "--config", str(config), "--out", str(out_b)]) == 0
        a, b = artifact_digests(out_a), artifact_digests(out_b)
        assert a and a == b
        assert "report/manifest.json" in a and "geo/flow_map.geojson" in a
