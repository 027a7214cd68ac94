"""Static IPv4 endpoint extraction from binary samples.

Scanning is byte-level and purely lexical: dotted quads in ASCII, masked
networks written with wildcard octets (``41.x.x.x``, ``189.34.5.%d``) or a
CIDR suffix, and optionally raw big-endian 32-bit words.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import logging
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

from .ipspace import Prefix, PrefixError, PrefixSet, int_to_ip, ip_to_int, length_breakdown, parse_prefix

log = logging.getLogger(__name__)


class Role(str, Enum):
    DROPZONE = "dropzone-candidate"
    TARGET = "target-candidate"
    UNKNOWN = "unknown"

    @classmethod
    def parse(cls, text: str) -> "Role":
        key = text.strip().lower()
        aliases = {"dropzone": cls.DROPZONE, "c2": cls.DROPZONE, "target": cls.TARGET}
        if key in aliases:
            return aliases[key]
        return cls(key)


DEFAULT_BOGONS = (
    "0.0.0.0/8",
    "10.0.0.0/8",
    "100.64.0.0/10",
    "127.0.0.0/8",
    "169.254.0.0/16",
    "172.16.0.0/12",
    "192.0.2.0/24",
    "192.168.0.0/16",
    "198.18.0.0/15",
    "198.51.100.0/24",
    "203.0.113.0/24",
    "224.0.0.0/3",
    "255.255.255.255/32",
)

MASK_LENGTHS = (8, 16, 24)
CONTEXT_BYTES = 64


@dataclass(frozen=True)
class ExtractionPolicy:
    """Knobs for the byte scanners.

    ``bogons`` lists excluded prefixes; hits inside any of them are dropped,
    as are masked networks wholly inside one.
    """

    bogons: tuple[str, ...] = DEFAULT_BOGONS
    raw32: bool = False
    list_span: int = 64
    list_min_hits: int = 3

    @cached_property
    def bogon_set(self) -> PrefixSet:
        return PrefixSet(parse_prefix(b) for b in self.bogons)

    def is_bogon(self, address: int) -> bool:
        return self.bogon_set.contains(address)

    def is_bogon_prefix(self, prefix: Prefix) -> bool:
        return any(b.covers_prefix(prefix) for b in self.bogon_set)

    def without(self, *prefixes: str) -> "ExtractionPolicy":
        """Copy of this policy with the named bogon ranges allowed again."""
        drop = {str(parse_prefix(p)) for p in prefixes}
        return replace(self, bogons=tuple(b for b in self.bogons if str(parse_prefix(b)) not in drop))


DEFAULT_POLICY = ExtractionPolicy()


@dataclass(frozen=True)
class MalwareSample:
    sample_id: str
    byte_length: int
    source_path: str = ""
    family_label: str | None = None
    data: bytes | None = field(default=None, repr=False, compare=False)

    @classmethod
    def from_bytes(cls, data: bytes, source_path: str = "", family_label: str | None = None) -> "MalwareSample":
        return cls(hashlib.sha256(data).hexdigest(), len(data), source_path, family_label, data)

    @classmethod
    def from_path(cls, path: str | os.PathLike, family_label: str | None = None) -> "MalwareSample":
        data = Path(path).read_bytes()
        return cls(hashlib.sha256(data).hexdigest(), len(data), str(path), family_label)

    def read_bytes(self) -> bytes:
        if self.data is not None:
            return self.data
        return Path(self.source_path).read_bytes()


@dataclass(frozen=True)
class MaskedEndpoint:
    prefix: Prefix
    token: str
    position: int
    kind: str  # "wildcard" or "cidr"


@dataclass(frozen=True)
class EndpointHit:
    sample_id: str
    byte_offset: int
    literal: str
    address: int | None
    mask: Prefix | None = None
    role: Role = Role.UNKNOWN
    context: str = ""
    encoding: str = "ascii"

    @property
    def span(self) -> int:
        """Number of sample bytes the hit occupies."""
        return 4 if self.encoding == "raw32" else len(self.literal)

    @property
    def endpoint(self) -> str:
        return str(self.mask) if self.mask is not None else int_to_ip(self.address)

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "byte_offset": self.byte_offset,
            "literal": self.literal,
            "address": None if self.address is None else int_to_ip(self.address),
            "mask": None if self.mask is None else str(self.mask),
            "role": self.role.value,
            "context": self.context,
            "encoding": self.encoding,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "EndpointHit":
        return cls(
            sample_id=rec["sample_id"],
            byte_offset=int(rec["byte_offset"]),
            literal=rec["literal"],
            address=None if rec.get("address") is None else ip_to_int(rec["address"]),
            mask=None if rec.get("mask") is None else parse_prefix(rec["mask"]),
            role=Role(rec.get("role", Role.UNKNOWN.value)),
            context=rec.get("context", ""),
            encoding=rec.get("encoding", "ascii"),
        )


# --- scanners ---------------------------------------------------------------

_RUN_RE = re.compile(rb"[0-9.]+")
_OCTET = r"(?:25[0-5]|2[0-4][0-9]|1[0-9][0-9]|[1-9][0-9]|[0-9])"
_OCTET_RE = re.compile(_OCTET)
_QUAD_RE = re.compile(rf"{_OCTET}\.{_OCTET}\.{_OCTET}\.{_OCTET}")

_WILD = rb"(?:[0-9]{1,3}|[xX*]|%d)"
_MASKED_RE = re.compile(
    rb"(?<![0-9A-Za-z.*%])" + _WILD + rb"\." + _WILD + rb"\." + _WILD + rb"\." + _WILD
    + rb"(?:/[0-9]+)?(?![0-9A-Za-z.*%/])"
)
_WILDCARDS = {"x", "X", "*", "%d"}


def _printable(b: int) -> bool:
    return 0x20 <= b < 0x7F


def _context(blob: bytes, start: int, end: int, width: int = CONTEXT_BYTES) -> str:
    budget = max(0, width - (end - start))
    left_budget = budget // 2
    right_budget = budget - left_budget
    lo = start
    while lo > 0 and start - lo < left_budget and _printable(blob[lo - 1]):
        lo -= 1
    hi = end
    while hi < len(blob) and hi - end < right_budget and _printable(blob[hi]):
        hi += 1
    return blob[lo:hi].decode("latin-1")


def scan_ascii_ipv4(blob: bytes, policy: ExtractionPolicy = DEFAULT_POLICY, sample_id: str = "") -> list[EndpointHit]:
    """All maximal ASCII dotted quads in ``blob`` that survive bogon filtering.

    A token is the whole run of digits and dots; anything longer or shorter
    than four valid octets (``1.2.3.4.5``, ``999.1.1.1``, ``01.2.3.4``) is
    rejected in full.
    """
    hits = []
    for m in _RUN_RE.finditer(blob):
        token = m.group().decode("ascii")
        if not _QUAD_RE.fullmatch(token):
            continue
        address = ip_to_int(token)
        if policy.is_bogon(address):
            continue
        hits.append(
            EndpointHit(sample_id, m.start(), token, address, context=_context(blob, m.start(), m.end()))
        )
    return hits


def detect_masked(token: str, position: int = 0, diagnostics: list[str] | None = None) -> MaskedEndpoint | None:
    """Interpret a wildcard or CIDR token as a network.

    Trailing wildcards map to /24, /16 or /8 for one, two or three wildcard
    octets. Wildcards anywhere else, or four of them, yield ``None``. A
    malformed CIDR suffix yields ``None`` plus a diagnostic.
    """
    addr_part, slash, suffix = token.partition("/")
    octets = addr_part.split(".")
    if len(octets) != 4:
        return None
    wild = [o in _WILDCARDS for o in octets]
    if slash:
        if any(wild):
            return None
        try:
            prefix = parse_prefix(token, normalize=True, diagnostics=diagnostics)
        except PrefixError as exc:
            if diagnostics is not None:
                diagnostics.append(f"offset {position}: {exc}")
            return None
        return MaskedEndpoint(prefix, token, position, "cidr")

    n_wild = sum(wild)
    if n_wild == 0 or n_wild == 4 or wild != [False] * (4 - n_wild) + [True] * n_wild:
        return None
    fixed = octets[: 4 - n_wild]
    if not all(_OCTET_RE.fullmatch(o) for o in fixed):
        return None
    base = ip_to_int(".".join(fixed + ["0"] * n_wild))
    return MaskedEndpoint(Prefix(base, 32 - 8 * n_wild), token, position, "wildcard")


def scan_masked(blob: bytes, policy: ExtractionPolicy = DEFAULT_POLICY, sample_id: str = "",
                diagnostics: list[str] | None = None) -> list[EndpointHit]:
    hits = []
    for m in _MASKED_RE.finditer(blob):
        token = m.group().decode("ascii")
        if "/" not in token and not any(o in _WILDCARDS for o in token.split(".")):
            continue
        masked = detect_masked(token, m.start(), diagnostics)
        if masked is None:
            continue
        if masked.prefix.length not in MASK_LENGTHS:
            if diagnostics is not None:
                diagnostics.append(f"offset {m.start()}: unsupported mask length in {token!r}")
            continue
        if policy.is_bogon_prefix(masked.prefix):
            continue
        hits.append(EndpointHit(sample_id, m.start(), token, None, masked.prefix,
                                context=_context(blob, m.start(), m.end())))
    return hits


def scan_raw32(blob: bytes, policy: ExtractionPolicy = DEFAULT_POLICY, sample_id: str = "") -> list[EndpointHit]:
    """Aligned big-endian 32-bit words read as addresses. Noisy; off by default."""
    hits = []
    for off in range(0, len(blob) - 3, 4):
        word = blob[off:off + 4]
        address = int.from_bytes(word, "big")
        if policy.is_bogon(address):
            continue
        hits.append(EndpointHit(sample_id, off, word.hex(), address, encoding="raw32"))
    return hits


# --- role classification ----------------------------------------------------

class RoleManifest:
    """Explicit ``(sample_id, endpoint) -> role`` labels.

    Endpoints are dotted quads or ``a.b.c.d/n`` prefixes. The file format is
    one ``sample_id,endpoint,role`` record per line; ``#`` starts a comment.
    """

    def __init__(self, entries: Mapping[tuple[str, str], Role] | None = None):
        self.entries: dict[tuple[str, str], Role] = {}
        for (sid, endpoint), role in (entries or {}).items():
            self.entries[(sid, _canonical_endpoint(endpoint))] = Role.parse(role) if isinstance(role, str) else role

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RoleManifest":
        entries = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected sample_id,endpoint,role")
            entries[(parts[0], parts[1])] = Role.parse(parts[2])
        return cls(entries)

    def lookup(self, hit: EndpointHit) -> Role | None:
        return self.entries.get((hit.sample_id, hit.endpoint))

    def __len__(self) -> int:
        return len(self.entries)


def _canonical_endpoint(text: str) -> str:
    text = text.strip()
    if "/" in text:
        return str(parse_prefix(text))
    return int_to_ip(ip_to_int(text))


_SCHEME_RE = re.compile(r"[A-Za-z][A-Za-z0-9+.-]*://")
_VERB_RE = re.compile(r"(?i:wget|tftp|curl)|GET ")


def classify_role(hit: EndpointHit, manifest: RoleManifest | None = None, in_list: bool = False) -> Role:
    """Manifest label if any; otherwise the context heuristic.

    ``in_list`` says the hit sits in a dense address-list region, which the
    caller determines from the sample's other hits.
    """
    if manifest is not None:
        labelled = manifest.lookup(hit)
        if labelled is not None:
            return labelled
    if hit.mask is not None:
        return Role.TARGET
    ctx = hit.context
    if ctx:
        if _SCHEME_RE.search(ctx) or _VERB_RE.search(ctx):
            return Role.DROPZONE
        if re.search(re.escape(hit.literal) + r":[0-9]{1,5}(?![0-9])", ctx):
            return Role.DROPZONE
    if in_list:
        return Role.TARGET
    return Role.UNKNOWN


def dense_members(hits: list[EndpointHit], span: int = 64, min_hits: int = 3,
                  regions: list[int] | None = None) -> set[int]:
    """Indices of hits lying in a run of ``min_hits`` hits spanning at most ``span`` bytes.

    ``regions`` optionally gives each hit's text-region id; a run never
    crosses regions.
    """
    members: set[int] = set()
    i = 0
    for j, hj in enumerate(hits):
        end = hj.byte_offset + hj.span
        while end - hits[i].byte_offset > span or (regions is not None and regions[i] != regions[j]):
            i += 1
        if j - i + 1 >= min_hits:
            members.update(range(i, j + 1))
    return members


_NONPRINTABLE_RE = re.compile(rb"[^\x20-\x7e]")


def _text_regions(blob: bytes, hits: list[EndpointHit]) -> list[int]:
    breaks = [m.start() for m in _NONPRINTABLE_RE.finditer(blob)]
    return [bisect.bisect_left(breaks, h.byte_offset) for h in hits]


def scan_sample(blob: bytes, sample_id: str = "", policy: ExtractionPolicy = DEFAULT_POLICY,
                manifest: RoleManifest | None = None) -> tuple[list[EndpointHit], list[str]]:
    """Every scanner over one sample, roles assigned. Returns ``(hits, diagnostics)``."""
    diagnostics: list[str] = []
    masked = scan_masked(blob, policy, sample_id, diagnostics)
    masked_starts = {h.byte_offset for h in masked}
    # a CIDR token's address part is already represented by its masked hit
    hits = [h for h in scan_ascii_ipv4(blob, policy, sample_id) if h.byte_offset not in masked_starts]
    hits.extend(masked)
    hits.sort(key=lambda h: h.byte_offset)
    dense = dense_members(hits, policy.list_span, policy.list_min_hits, _text_regions(blob, hits))
    hits = [replace(h, role=classify_role(h, manifest, i in dense)) for i, h in enumerate(hits)]
    if policy.raw32:
        raw = [replace(h, role=classify_role(h, manifest)) for h in scan_raw32(blob, policy, sample_id)]
        hits = sorted(hits + raw, key=lambda h: (h.byte_offset, h.encoding))
    return hits, diagnostics


# --- corpus ---------------------------------------------------------------

def _percent(numerator: int, denominator: int) -> float:
    if denominator == 0:
        return 0.0
    value = Decimal(100 * numerator) / Decimal(denominator)
    return float(value.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class ExtractionReport:
    samples: dict[str, MalwareSample]
    hits: dict[str, tuple[EndpointHit, ...]]
    errors: dict[str, str] = field(default_factory=dict)
    diagnostics: dict[str, tuple[str, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.samples = dict(sorted(self.samples.items()))
        self.hits = {sid: tuple(self.hits.get(sid, ())) for sid in self.samples}
        self.errors = dict(sorted(self.errors.items()))
        self.diagnostics = {k: tuple(v) for k, v in sorted(self.diagnostics.items()) if v}

    def iter_hits(self) -> Iterable[EndpointHit]:
        for sid in self.hits:
            yield from self.hits[sid]

    @property
    def sample_count(self) -> int:
        return len(self.samples)

    @property
    def empty_corpus(self) -> bool:
        return not self.samples

    def unique(self, role: Role) -> frozenset[int]:
        return frozenset(h.address for h in self.iter_hits() if h.role is role and h.address is not None)

    @property
    def unique_targets(self) -> frozenset[int]:
        return self.unique(Role.TARGET)

    @property
    def unique_dropzones(self) -> frozenset[int]:
        return self.unique(Role.DROPZONE)

    @property
    def masked_prefixes(self) -> tuple[Prefix, ...]:
        """Distinct masked networks as written, before any containment removal."""
        return tuple(sorted({h.mask for h in self.iter_hits() if h.mask is not None}))

    @property
    def masked_endpoints(self) -> PrefixSet:
        return PrefixSet(self.masked_prefixes, merge=False)

    def occurrences(self, role: Role) -> int:
        return sum(1 for h in self.iter_hits() if h.role is role)

    def samples_with(self, role: Role) -> int:
        return sum(1 for hs in self.hits.values() if any(h.role is role for h in hs))

    def coverage(self, role: Role) -> float:
        return self.samples_with(role) / self.sample_count if self.sample_count else 0.0

    def summary(self) -> dict:
        n = self.sample_count
        roles = {}
        for role in Role:
            with_role = self.samples_with(role)
            roles[role.value] = {
                "occurrences": self.occurrences(role),
                "unique_addresses": len(self.unique(role)),
                "samples_with": with_role,
                "coverage": with_role / n if n else 0.0,
                "coverage_percent": _percent(with_role, n),
            }
        masked_occ = sum(1 for h in self.iter_hits() if h.mask is not None)
        raw = self.masked_prefixes
        return {
            "sample_count": n,
            "empty_corpus": self.empty_corpus,
            "error_count": len(self.errors),
            "errors": self.errors,
            "hit_count": sum(len(v) for v in self.hits.values()),
            "roles": roles,
            "masked": {
                "occurrences": masked_occ,
                "unique_prefixes": len(raw),
                "breakdown_as_written": [list(r) for r in length_breakdown(raw, MASK_LENGTHS)],
                "breakdown_containment_free": [
                    list(r) for r in length_breakdown(self.masked_endpoints, MASK_LENGTHS)
                ],
                "covered_addresses": self.masked_endpoints.address_count(),
            },
            "non_masked_target_occurrences": sum(
                1 for h in self.iter_hits() if h.role is Role.TARGET and h.address is not None
            ),
            "diagnostics": {k: list(v) for k, v in self.diagnostics.items()},
        }

    # persistence

    def write(self, directory: str | os.PathLike) -> None:
        """Write ``samples.jsonl``, ``hits.jsonl`` and ``summary.json``."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "samples.jsonl", "w") as fh:
            for sid, s in self.samples.items():
                rec = {"sample_id": sid, "byte_length": s.byte_length, "source_path": s.source_path,
                       "family_label": s.family_label, "hit_count": len(self.hits[sid]),
                       "diagnostics": list(self.diagnostics.get(sid, ()))}
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(out / "hits.jsonl", "w") as fh:
            for hit in self.iter_hits():
                fh.write(json.dumps(hit.to_record(), sort_keys=True) + "\n")
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, directory: str | os.PathLike) -> "ExtractionReport":
        src = Path(directory)
        samples, diagnostics = {}, {}
        for line in (src / "samples.jsonl").read_text().splitlines():
            rec = json.loads(line)
            samples[rec["sample_id"]] = MalwareSample(rec["sample_id"], rec["byte_length"],
                                                      rec["source_path"], rec.get("family_label"))
            diagnostics[rec["sample_id"]] = tuple(rec.get("diagnostics", ()))
        hits: dict[str, list[EndpointHit]] = {sid: [] for sid in samples}
        for line in (src / "hits.jsonl").read_text().splitlines():
            hit = EndpointHit.from_record(json.loads(line))
            hits[hit.sample_id].append(hit)
        summary = json.loads((src / "summary.json").read_text())
        return cls(samples, {k: tuple(v) for k, v in hits.items()}, summary.get("errors", {}), diagnostics)


def _scan_job(args: tuple) -> tuple[str, list[EndpointHit] | None, list[str], str | None]:
    sample, policy, manifest = args
    try:
        blob = sample.read_bytes()
    except OSError as exc:
        return sample.sample_id, None, [], f"{type(exc).__name__}: {exc}"
    hits, diags = scan_sample(blob, sample.sample_id, policy, manifest)
    return sample.sample_id, hits, diags, None


def load_corpus(directory: str | os.PathLike) -> tuple[list[MalwareSample], dict[str, str]]:
    """Every regular file under ``directory`` (recursively) as a sample.

    Unreadable files land in the returned error map keyed by path.
    """
    samples, errors = [], {}
    for path in sorted(p for p in Path(directory).rglob("*") if p.is_file()):
        try:
            samples.append(MalwareSample.from_path(path))
        except OSError as exc:
            errors[str(path)] = f"{type(exc).__name__}: {exc}"
    return samples, errors


def extract_corpus(samples: Iterable[MalwareSample], policy: ExtractionPolicy = DEFAULT_POLICY,
                   manifest: RoleManifest | None = None, workers: int = 1,
                   errors: Mapping[str, str] | None = None) -> ExtractionReport:
    """Scan every sample and aggregate the hits into an :class:`ExtractionReport`.

    Byte-identical samples collapse to one (their ids are content hashes); the
    lexicographically first source path is kept. Output does not depend on
    input order or on ``workers``.
    """
    unique: dict[str, MalwareSample] = {}
    for s in sorted(samples, key=lambda s: (s.sample_id, s.source_path)):
        unique.setdefault(s.sample_id, s)

    jobs = [(s, policy, manifest) for s in unique.values()]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_scan_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        results = [_scan_job(j) for j in jobs]

    all_errors = dict(errors or {})
    hits, diagnostics = {}, {}
    for sid, sample_hits, diags, err in results:
        if err is not None:
            all_errors[sid] = err
            del unique[sid]
            continue
        hits[sid] = tuple(sample_hits)
        diagnostics[sid] = tuple(diags)
    # stored samples never carry their bytes
    kept = {sid: replace(s, data=None) for sid, s in unique.items()}
    return ExtractionReport(kept, hits, all_errors, diagnostics)
