"""Port profiles, UDP amplification flags, CVE tables and port-closure advice."""

from __future__ import annotations

import csv
import io
import os
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .enrichment import EnrichmentStore, ScanRecord
from .ipspace import int_to_ip

_SEVERITY_RANK = {"critical": 4, "high": 3, "medium": 2, "low": 1, "unknown": 0}


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _scans(store: EnrichmentStore, population: Iterable[int]) -> list[ScanRecord]:
    return [r for r in (store.scan(a) for a in sorted(set(population))) if r is not None]


@dataclass
class PortProfile:
    role: str
    population: int
    covered: int
    total_open_ports: int
    per_port: list[tuple[int, int]]

    def hosts(self, port: int) -> int:
        return dict(self.per_port).get(port, 0)

    def to_csv(self) -> str:
        return _csv(["port", "hosts"], self.per_port)

    def summary(self) -> dict:
        return {"role": self.role, "population": self.population, "covered": self.covered,
                "total_open_ports": self.total_open_ports, "distinct_ports": len(self.per_port)}


def port_profile(store: EnrichmentStore, population: Iterable[int], role: str) -> PortProfile:
    population = set(population)
    scans = _scans(store, population)
    per_port = Counter(p for r in scans for p in r.open_ports)
    return PortProfile(
        role=role,
        population=len(population),
        covered=len(scans),
        total_open_ports=sum(len(r.open_ports) for r in scans),
        per_port=sorted(per_port.items(), key=lambda kv: (-kv[1], kv[0])),
    )


# --- amplification ---------------------------------------------------------

@dataclass(frozen=True)
class AmplificationRule:
    port: int
    protocol: str
    note: str


DEFAULT_RULESET = (
    AmplificationRule(53, "DNS", "open resolvers reflect large ANY/DNSSEC responses to spoofed sources"),
    AmplificationRule(123, "NTP", "UDP; monlist-style queries reflect responses far larger than the spoofed request"),
    AmplificationRule(161, "SNMP", "UDP; GetBulk responses amplify spoofed requests"),
    AmplificationRule(1900, "SSDP", "UDP; M-SEARCH discovery replies reflect to spoofed sources"),
    AmplificationRule(11211, "memcached", "UDP; cached values reflect at very high amplification ratios"),
)


def load_ruleset(path: str | os.PathLike) -> tuple[AmplificationRule, ...]:
    """Read ``port,protocol,note`` lines; blank lines and ``#`` comments are skipped."""
    rules = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = next(csv.reader([line]))
        if len(parts) < 2:
            raise ValueError(f"{path}:{lineno}: expected port,protocol[,note]")
        port = int(parts[0])
        if not 0 <= port <= 65535:
            raise ValueError(f"{path}:{lineno}: port {port} out of range")
        rules.append(AmplificationRule(port, parts[1].strip(), ",".join(parts[2:]).strip()))
    return tuple(rules)


@dataclass(frozen=True)
class AmplificationFlag:
    port: int
    protocol: str
    hosts: int
    note: str


def amplification_flags(profile: PortProfile,
                        ruleset: Sequence[AmplificationRule] = DEFAULT_RULESET) -> list[AmplificationFlag]:
    flags = [AmplificationFlag(r.port, r.protocol, profile.hosts(r.port), r.note)
             for r in ruleset if profile.hosts(r.port) > 0]
    return sorted(flags, key=lambda f: (-f.hosts, f.port))


def flags_csv(flags: Sequence[AmplificationFlag], role: str = "") -> str:
    return _csv(["role", "port", "protocol", "hosts", "note"],
                [(role, f.port, f.protocol, f.hosts, f.note) for f in flags])


# --- CVEs -------------------------------------------------------------------

@dataclass(frozen=True)
class CveRow:
    rank: int
    cve_id: str
    severity: str
    hosts: int


def cve_summary(store: EnrichmentStore, population: Iterable[int]) -> list[CveRow]:
    """CVEs ranked by affected-host count, ties broken by CVE id.

    When providers disagree on a CVE's severity the most severe label wins.
    """
    hosts: Counter[str] = Counter()
    severity: dict[str, str] = {}
    for rec in _scans(store, population):
        for cve_id, sev in dict(rec.cves).items():
            hosts[cve_id] += 1
            if _SEVERITY_RANK[sev] >= _SEVERITY_RANK.get(severity.get(cve_id, "unknown"), 0):
                severity[cve_id] = sev
    ordered = sorted(hosts.items(), key=lambda kv: (-kv[1], kv[0]))
    return [CveRow(i, cve_id, severity[cve_id], n) for i, (cve_id, n) in enumerate(ordered, 1)]


def cve_csv(rows: Sequence[CveRow]) -> str:
    return _csv(["rank", "cve_id", "severity", "hosts"], [(r.rank, r.cve_id, r.severity, r.hosts) for r in rows])


# --- device clusters and closure -------------------------------------------

@dataclass
class DeviceTypeCluster:
    device_type: str
    members: tuple[int, ...]
    port_counts: dict[int, int] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.members)

    def usage(self, port: int) -> Fraction:
        return Fraction(self.port_counts.get(port, 0), self.size) if self.size else Fraction(0)


def device_clusters(store: EnrichmentStore, population: Iterable[int] | None = None) -> tuple[list[DeviceTypeCluster], int]:
    """Group scanned hosts by device label.

    Returns ``(clusters sorted by label, count of scanned hosts without a label)``.
    """
    addresses = sorted(store.entries) if population is None else population
    members: dict[str, list[int]] = {}
    ports: dict[str, Counter[int]] = {}
    untyped = 0
    for rec in _scans(store, addresses):
        if rec.device_type is None:
            untyped += 1
            continue
        members.setdefault(rec.device_type, []).append(rec.address)
        ports.setdefault(rec.device_type, Counter()).update(rec.open_ports)
    clusters = [DeviceTypeCluster(t, tuple(members[t]), dict(sorted(ports[t].items()))) for t in sorted(members)]
    return clusters, untyped


@dataclass(frozen=True)
class Recommendation:
    device_type: str
    port: int
    usage_fraction: float
    action: str  # "close" or "keep"
    support: int


@dataclass
class ClosurePlan:
    recommendations: list[Recommendation]
    insufficient_support: list[tuple[str, int]]
    threshold: float
    min_support: int

    def closes(self) -> list[Recommendation]:
        return [r for r in self.recommendations if r.action == "close"]

    def to_csv(self) -> str:
        return _csv(["device_type", "port", "usage_fraction", "action", "support"],
                    [(r.device_type, r.port, f"{r.usage_fraction:.6f}", r.action, r.support)
                     for r in self.recommendations])


def _exact(value: float | str | Fraction) -> Fraction:
    # Fraction(0.1) would be the binary float just above one tenth
    return value if isinstance(value, Fraction) else Fraction(str(value))


def closure_recommendations(clusters: Sequence[DeviceTypeCluster], threshold: float = 0.10,
                            min_support: int = 20) -> ClosurePlan:
    """Close a port when fewer than ``threshold`` of a device type's hosts use it.

    Comparison is strict and exact, so a port open on exactly 10% of hosts is
    kept. Clusters smaller than ``min_support`` get no advice.
    """
    limit = _exact(threshold)
    recs, thin = [], []
    for c in sorted(clusters, key=lambda c: c.device_type):
        if c.size < min_support:
            thin.append((c.device_type, c.size))
            continue
        for port in sorted(c.port_counts):
            usage = c.usage(port)
            recs.append(Recommendation(c.device_type, port, float(usage),
                                       "close" if usage < limit else "keep", c.size))
    return ClosurePlan(recs, thin, float(limit), min_support)


def cluster_csv(clusters: Sequence[DeviceTypeCluster]) -> str:
    rows = []
    for c in clusters:
        for port, n in sorted(c.port_counts.items()):
            rows.append((c.device_type, c.size, port, n, f"{float(c.usage(port)):.6f}"))
    return _csv(["device_type", "members", "port", "hosts", "usage_fraction"], rows)


def members_csv(clusters: Sequence[DeviceTypeCluster]) -> str:
    return _csv(["device_type", "address"], [(c.device_type, int_to_ip(a)) for c in clusters for a in c.members])
