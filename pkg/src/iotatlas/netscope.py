"""Network-centric view of masked targets.

Masked endpoints stand for whole networks. A scope records how much address
space they cover, which scanned hosts fall inside, and how those hosts group
by device type. Coverage of large prefixes is whatever the store holds; the
scope never extrapolates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .enrichment import EnrichmentStore
from .exposure import (
    DEFAULT_RULESET,
    AmplificationFlag,
    AmplificationRule,
    ClosurePlan,
    DeviceTypeCluster,
    PortProfile,
    amplification_flags,
    closure_recommendations,
    device_clusters,
    port_profile,
)
from .ipspace import Prefix, PrefixSet, length_breakdown

SCOPE_LENGTHS = (8, 16, 24)


@dataclass
class NetworkScope:
    prefixes: PrefixSet
    breakdown: list[tuple[int, int, int]]
    breakdown_containment_free: list[tuple[int, int, int]]
    covered_addresses: int
    active_hosts: int
    untyped_hosts: int
    clusters: list[DeviceTypeCluster]
    profile: PortProfile

    def summary(self) -> dict:
        return {
            "unique_prefixes": len(self.prefixes),
            "breakdown": [{"length": n, "prefixes": c, "covered_addresses": a} for n, c, a in self.breakdown],
            "breakdown_containment_free": [
                {"length": n, "prefixes": c, "covered_addresses": a} for n, c, a in self.breakdown_containment_free
            ],
            "covered_addresses": self.covered_addresses,
            "active_hosts": self.active_hosts,
            "untyped_hosts": self.untyped_hosts,
            "clusters": [{"device_type": c.device_type, "members": c.size} for c in self.clusters],
        }


def build_scope(masked: Iterable[Prefix], store: EnrichmentStore) -> NetworkScope:
    raw = sorted(set(masked))
    prefixes = PrefixSet(raw, merge=False)
    active = [a for a in sorted(store.entries) if store.scan(a) is not None and prefixes.contains(a)]
    clusters, untyped = device_clusters(store, active)
    return NetworkScope(
        prefixes=prefixes,
        breakdown=length_breakdown(raw, SCOPE_LENGTHS),
        breakdown_containment_free=length_breakdown(prefixes, SCOPE_LENGTHS),
        covered_addresses=prefixes.address_count(),
        active_hosts=len(active),
        untyped_hosts=untyped,
        clusters=clusters,
        profile=port_profile(store, active, "masked-scope"),
    )


def cluster_profile(cluster: DeviceTypeCluster) -> PortProfile:
    per_port = sorted(cluster.port_counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return PortProfile(cluster.device_type, cluster.size, cluster.size, sum(cluster.port_counts.values()), per_port)


@dataclass
class ScopeExposure:
    plan: ClosurePlan
    flags: list[AmplificationFlag]
    cluster_flags: dict[str, list[AmplificationFlag]]
    diagnostics: list[str] = field(default_factory=list)


def scope_exposure(scope: NetworkScope, threshold: float = 0.10, min_support: int = 20,
                   ruleset: Sequence[AmplificationRule] = DEFAULT_RULESET) -> ScopeExposure:
    diagnostics = []
    if not scope.clusters:
        diagnostics.append("no device-typed hosts in scope")
    if scope.untyped_hosts:
        diagnostics.append(f"{scope.untyped_hosts} scanned hosts lack a device type")
    plan = closure_recommendations(scope.clusters, threshold, min_support)
    for device_type, size in plan.insufficient_support:
        diagnostics.append(f"insufficient support: {device_type} has {size} hosts (< {min_support})")
    cluster_flags = {c.device_type: amplification_flags(cluster_profile(c), ruleset) for c in scope.clusters}
    return ScopeExposure(plan, amplification_flags(scope.profile, ruleset),
                         {k: v for k, v in cluster_flags.items() if v}, diagnostics)
