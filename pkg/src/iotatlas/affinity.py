"""Dropzone -> target multigraph, affinity statistics and shared-target overlap."""

from __future__ import annotations

from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from typing import Callable, Iterable, Sequence

from .extract import ExtractionReport, Role


class AttackGraph:
    """Multiset of ``(dropzone, target, sample_id)`` edge occurrences.

    A target's multiplicity counts the distinct ``(dropzone, sample)`` pairs
    that list it.
    """

    def __init__(self, edges: Iterable[tuple[int, int, str]], diagnostics: dict | None = None):
        self.edges: tuple[tuple[int, int, str], ...] = tuple(sorted(edges, key=lambda e: (e[2], e[0], e[1])))
        self.diagnostics = dict(diagnostics or {})
        targets_of: dict[int, set[int]] = defaultdict(set)
        self.multiplicity: Counter[int] = Counter()
        self.occurrences_of: Counter[int] = Counter()
        for dz, tg, _sid in self.edges:
            targets_of[dz].add(tg)
            self.multiplicity[tg] += 1
            self.occurrences_of[dz] += 1
        self.targets_of: dict[int, frozenset[int]] = {d: frozenset(ts) for d, ts in sorted(targets_of.items())}

    def __len__(self) -> int:
        return len(self.edges)

    @property
    def dropzones(self) -> list[int]:
        return list(self.targets_of)

    @property
    def targets(self) -> list[int]:
        return sorted(self.multiplicity)


def build_graph(report: ExtractionReport) -> AttackGraph:
    """Pair every dropzone with every target inside each sample.

    Repeated mentions of one address within a sample collapse first, and
    masked networks are not graph nodes.
    """
    edges = []
    targets_only = 0
    for sid, hits in report.hits.items():
        dzs = sorted({h.address for h in hits if h.role is Role.DROPZONE and h.address is not None})
        tgs = sorted({h.address for h in hits if h.role is Role.TARGET and h.address is not None})
        if tgs and not dzs:
            targets_only += 1
        edges.extend((d, t, sid) for d in dzs for t in tgs)
    return AttackGraph(edges, {"samples_with_targets_but_no_dropzone": targets_only})


@dataclass
class TargetHistogram:
    histogram: dict[int, int]
    target_count: int
    threshold: int
    below_threshold: int
    max_multiplicity: int
    max_targets: list[int]

    @property
    def empty(self) -> bool:
        return self.target_count == 0

    @property
    def fraction_below(self) -> float:
        return self.below_threshold / self.target_count if self.target_count else 0.0


def target_histogram(graph: AttackGraph, threshold: int = 10) -> TargetHistogram:
    hist = Counter(graph.multiplicity.values())
    top = max(hist, default=0)
    return TargetHistogram(
        histogram=dict(sorted(hist.items())),
        target_count=len(graph.multiplicity),
        threshold=threshold,
        below_threshold=sum(c for m, c in hist.items() if m < threshold),
        max_multiplicity=top,
        max_targets=sorted(t for t, m in graph.multiplicity.items() if m == top) if top else [],
    )


@dataclass
class DropzoneStats:
    degrees: dict[int, int]
    total_occurrences: int
    max_degree: int
    max_dropzones: list[int]

    @property
    def empty(self) -> bool:
        return not self.degrees

    @property
    def mean(self) -> float:
        """Edge occurrences per dropzone."""
        return self.total_occurrences / len(self.degrees) if self.degrees else 0.0

    @property
    def mean_unique_degree(self) -> float:
        return sum(self.degrees.values()) / len(self.degrees) if self.degrees else 0.0


def dropzone_stats(graph: AttackGraph) -> DropzoneStats:
    degrees = {d: len(ts) for d, ts in graph.targets_of.items()}
    top = max(degrees.values(), default=0)
    return DropzoneStats(degrees, len(graph.edges), top, sorted(d for d, n in degrees.items() if n == top))


# --- overlap ---------------------------------------------------------------


def jaccard(inter: int, size_a: int, size_b: int) -> Fraction:
    union = size_a + size_b - inter
    return Fraction(inter, union) if union else Fraction(0)


def containment(inter: int, size_a: int, size_b: int) -> Fraction:
    smaller = min(size_a, size_b)
    return Fraction(inter, smaller) if smaller else Fraction(0)


METRICS: dict[str, Callable[[int, int, int], Fraction]] = {"jaccard": jaccard, "containment": containment}

_OPS = {
    ">=": lambda v, t: v >= t,
    ">": lambda v, t: v > t,
    "<": lambda v, t: v < t,
    "<=": lambda v, t: v <= t,
    "==": lambda v, t: v == t,
}


@dataclass(frozen=True)
class OverlapBin:
    label: str
    op: str
    threshold: Fraction

    def matches(self, value: Fraction) -> bool:
        return _OPS[self.op](value, self.threshold)

    def interval(self) -> tuple[Fraction, bool, Fraction, bool]:
        """``(lo, lo_closed, hi, hi_closed)`` of matching values inside [0, 1]."""
        t = self.threshold
        return {
            ">=": (t, True, Fraction(1), True),
            ">": (t, False, Fraction(1), True),
            "<": (Fraction(0), True, t, False),
            "<=": (Fraction(0), True, t, True),
            "==": (t, True, t, True),
        }[self.op]


DEFAULT_BINS = (
    OverlapBin("100%", ">=", Fraction(1)),
    OverlapBin(">80%", ">", Fraction(4, 5)),
    OverlapBin("<10%", "<", Fraction(1, 10)),
)


def bins_overlap(bins: Sequence[OverlapBin]) -> bool:
    """True if some metric value in [0, 1] falls into more than one bin."""
    for a, b in combinations(bins, 2):
        alo, alc, ahi, ahc = a.interval()
        blo, blc, bhi, bhc = b.interval()
        lo, lo_closed = max((alo, alc), (blo, blc), key=lambda x: (x[0], not x[1]))
        hi, hi_closed = min((ahi, ahc), (bhi, bhc), key=lambda x: (x[0], x[1]))
        if lo < hi or (lo == hi and lo_closed and hi_closed):
            return True
    return False


@dataclass
class OverlapSummary:
    metric: str
    total_cases: int
    bins: list[tuple[str, int, float]]
    overlapping_bins: bool
    pairs: list[tuple[int, int, Fraction]] | None = field(default=None, repr=False)

    def count(self, label: str) -> int:
        return next(c for lbl, c, _ in self.bins if lbl == label)


def pairwise_overlap(graph: AttackGraph, metric: str = "jaccard", bins: Sequence[OverlapBin] = DEFAULT_BINS,
                     keep_pairs: bool = False) -> OverlapSummary:
    """Bin the overlap of every unordered pair of target-bearing dropzones.

    Intersections come from an inverted target -> dropzones index, so pairs
    with nothing in common cost one lookup each.
    """
    if metric not in METRICS:
        raise ValueError(f"unknown overlap metric {metric!r}; choose from {sorted(METRICS)}")
    fn = METRICS[metric]
    eligible = [d for d, ts in graph.targets_of.items() if ts]
    index = {d: i for i, d in enumerate(eligible)}
    sizes = [len(graph.targets_of[d]) for d in eligible]

    holders: dict[int, list[int]] = defaultdict(list)
    for d in eligible:
        for t in graph.targets_of[d]:
            holders[t].append(index[d])
    inter: Counter[tuple[int, int]] = Counter()
    for ds in holders.values():
        ds.sort()
        for pair in combinations(ds, 2):
            inter[pair] += 1

    counts = [0] * len(bins)
    pairs = [] if keep_pairs else None
    total = 0
    for i, j in combinations(range(len(eligible)), 2):
        value = fn(inter.get((i, j), 0), sizes[i], sizes[j])
        total += 1
        for k, b in enumerate(bins):
            if b.matches(value):
                counts[k] += 1
        if pairs is not None:
            pairs.append((eligible[i], eligible[j], value))
    rows = [(b.label, c, c / total if total else 0.0) for b, c in zip(bins, counts)]
    return OverlapSummary(metric, total, rows, bins_overlap(bins), pairs)
