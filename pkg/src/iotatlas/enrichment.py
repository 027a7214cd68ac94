"""Per-address geolocation and scan intelligence with a persistent cache.

Providers are either offline fixtures (a CSV geo table, a JSON/JSONL scan
document) or thin HTTP adapters configured from environment variables.
Everything funnels into an :class:`EnrichmentStore` keyed by address.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .ipspace import int_to_ip, ip_to_int

log = logging.getLogger(__name__)

DAY = 86400.0
DEFAULT_TTL = 30 * DAY
DEFAULT_RATE = 1.0

SEVERITIES = ("low", "medium", "high", "critical", "unknown")
_CVE_RE = re.compile(r"CVE-\d{4}-\d{4,}")
_COUNTRY_RE = re.compile(r"[A-Z]{2}")

GEO = "geo"
SCAN = "scan"

FRESH, STALE, NOT_FOUND, ERROR = "fresh", "stale", "not_found", "error"


class EnrichmentError(Exception):
    pass


class NotFound(EnrichmentError):
    """The provider answered but has no data for the address."""


class TransportError(EnrichmentError):
    """Timeout, quota or server failure. Retryable."""


class ProviderDataError(EnrichmentError):
    """The provider returned data that fails validation."""


def severity_bucket(value: Any) -> str:
    """Map a qualitative label or a numeric CVSS score onto a severity bucket."""
    if value is None or value == "":
        return "unknown"
    if isinstance(value, str):
        label = value.strip().lower()
        if label in SEVERITIES:
            return label
        try:
            value = float(label)
        except ValueError:
            raise ProviderDataError(f"unrecognised severity {value!r}") from None
    score = float(value)
    if math.isnan(score) or not 0.0 <= score <= 10.0:
        raise ProviderDataError(f"CVSS score {value!r} outside 0..10")
    if score < 4.0:
        return "low"
    if score < 7.0:
        return "medium"
    if score < 9.0:
        return "high"
    return "critical"


def normalize_device_type(label: str | None) -> str | None:
    if label is None:
        return None
    label = str(label).strip().lower()
    return label or None


@dataclass(frozen=True)
class GeoRecord:
    address: int
    country: str
    city: str | None
    asn: int | None
    latitude: float
    longitude: float
    provider_id: str
    fetched_at: float

    def __post_init__(self) -> None:
        if not _COUNTRY_RE.fullmatch(self.country or ""):
            raise ProviderDataError(f"country {self.country!r} is not an ISO alpha-2 code")
        if not -90.0 <= self.latitude <= 90.0:
            raise ProviderDataError(f"latitude {self.latitude} out of range")
        if not -180.0 <= self.longitude <= 180.0:
            raise ProviderDataError(f"longitude {self.longitude} out of range")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["address"] = int_to_ip(self.address)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeoRecord":
        return cls(**{**d, "address": ip_to_int(d["address"])})


@dataclass(frozen=True)
class ScanRecord:
    address: int
    open_ports: frozenset[int]
    cves: tuple[tuple[str, str], ...]
    device_type: str | None
    provider_id: str
    fetched_at: float

    def __post_init__(self) -> None:
        for port in self.open_ports:
            if not isinstance(port, int) or not 0 <= port <= 65535:
                raise ProviderDataError(f"port {port!r} out of range")
        for cve_id, severity in self.cves:
            if not _CVE_RE.fullmatch(cve_id):
                raise ProviderDataError(f"malformed CVE id {cve_id!r}")
            if severity not in SEVERITIES:
                raise ProviderDataError(f"bad severity {severity!r} for {cve_id}")

    def to_dict(self) -> dict:
        return {
            "address": int_to_ip(self.address),
            "open_ports": sorted(self.open_ports),
            "cves": [list(c) for c in self.cves],
            "device_type": self.device_type,
            "provider_id": self.provider_id,
            "fetched_at": self.fetched_at,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScanRecord":
        return cls(ip_to_int(d["address"]), frozenset(d["open_ports"]), tuple(tuple(c) for c in d["cves"]),
                   d.get("device_type"), d["provider_id"], d["fetched_at"])


# --- payload mapping -----------------------------------------------------------

def _first(payload: Mapping, *keys: str) -> Any:
    for k in keys:
        if k in payload and payload[k] not in (None, ""):
            return payload[k]
    return None


def _parse_asn(value: Any) -> int | None:
    if value is None or value == "":
        return None
    text = str(value).strip().upper()
    if text.startswith("AS"):
        text = text[2:]
    try:
        return int(text)
    except ValueError:
        raise ProviderDataError(f"bad ASN {value!r}") from None


def geo_from_payload(address: int, payload: Mapping, provider_id: str, fetched_at: float) -> GeoRecord:
    lat = _first(payload, "lat", "latitude")
    lon = _first(payload, "lon", "lng", "longitude")
    country = _first(payload, "country", "country_code")
    if lat is None or lon is None or country is None:
        raise ProviderDataError(f"{int_to_ip(address)}: payload lacks country or coordinates")
    try:
        lat, lon = float(lat), float(lon)
    except (TypeError, ValueError):
        raise ProviderDataError(f"{int_to_ip(address)}: non-numeric coordinates") from None
    return GeoRecord(address, str(country).strip().upper(), _first(payload, "city"),
                     _parse_asn(_first(payload, "asn")), lat, lon, provider_id, fetched_at)


def _parse_cves(raw: Any) -> tuple[tuple[str, str], ...]:
    items: list[tuple[str, Any]] = []
    if raw is None:
        pass
    elif isinstance(raw, Mapping):
        # Shodan style: {"CVE-...": {"cvss": 7.8, ...}}
        for cve_id, info in raw.items():
            sev = info.get("severity", info.get("cvss")) if isinstance(info, Mapping) else info
            items.append((cve_id, sev))
    else:
        for item in raw:
            if isinstance(item, str):
                items.append((item, None))
            elif isinstance(item, Mapping):
                items.append((item.get("id") or item.get("cve_id"), item.get("severity", item.get("cvss"))))
            else:
                cve_id, sev = item
                items.append((cve_id, sev))
    out = {}
    for cve_id, sev in items:
        if not isinstance(cve_id, str) or not _CVE_RE.fullmatch(cve_id.strip()):
            raise ProviderDataError(f"malformed CVE id {cve_id!r}")
        out[cve_id.strip()] = severity_bucket(sev)
    return tuple(sorted(out.items()))


def scan_from_payload(address: int, payload: Mapping, provider_id: str, fetched_at: float) -> ScanRecord:
    ports_raw = _first(payload, "open_ports", "ports") or []
    try:
        ports = frozenset(int(p) for p in ports_raw)
    except (TypeError, ValueError):
        raise ProviderDataError(f"{int_to_ip(address)}: non-integer port list") from None
    if any(not 0 <= p <= 65535 for p in ports):
        raise ProviderDataError(f"{int_to_ip(address)}: port out of range")
    device = _first(payload, "device_type", "devicetype")
    if device is None:
        for banner in payload.get("data") or ():
            if isinstance(banner, Mapping) and banner.get("devicetype"):
                device = banner["devicetype"]
                break
    cves = _parse_cves(_first(payload, "cves", "vulns"))
    return ScanRecord(address, ports, cves, normalize_device_type(device), provider_id, fetched_at)


# --- rate limiting ---------------------------------------------------------------

class RateLimiter:
    """Token bucket of capacity ``burst`` refilled at ``rate`` tokens per second.

    Implemented as a theoretical-arrival-time scheduler. With the default
    burst of 1, consecutive grants are spaced at least ``1 / rate`` seconds
    apart, so no one-second window ever holds more than ``rate`` calls.
    """

    # widen the interval slightly so float rounding can never squeeze an
    # extra grant into a window
    _MARGIN = 1e-9

    def __init__(self, rate: float = DEFAULT_RATE, burst: int = 1,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        if burst < 1:
            raise ValueError("burst must be at least 1")
        self.rate = rate
        self.burst = burst
        self.interval = (1.0 / rate) * (1.0 + self._MARGIN)
        self._clock = clock
        self._sleep = sleep
        self._tat: float | None = None
        self._lock = threading.Lock()

    def acquire(self) -> float:
        """Block until a token is available; return the grant time."""
        with self._lock:
            now = self._clock()
            if self._tat is None:
                self._tat = now
            earliest = self._tat - (self.burst - 1) * self.interval
            grant = now
            if now < earliest:
                self._sleep(earliest - now)
                # a fake clock may not advance during sleep
                grant = max(self._clock(), earliest)
            self._tat = max(self._tat, grant) + self.interval
            return grant


# --- providers ---------------------------------------------------------------

class Provider:
    """Base class. Subclasses implement :meth:`fetch_payload`."""

    kind: str = GEO

    def __init__(self, provider_id: str):
        self.provider_id = provider_id
        self.calls = 0
        self._calls_lock = threading.Lock()

    def fetch_payload(self, address: int) -> Mapping:
        raise NotImplementedError

    def fetch(self, address: int, fetched_at: float) -> GeoRecord | ScanRecord:
        with self._calls_lock:
            self.calls += 1
        payload = self.fetch_payload(address)
        if self.kind == GEO:
            return geo_from_payload(address, payload, self.provider_id, fetched_at)
        return scan_from_payload(address, payload, self.provider_id, fetched_at)


class CsvGeoProvider(Provider):
    """Geo fixture: CSV with header ``address,country,city,asn,lat,lon``."""

    kind = GEO

    def __init__(self, rows: Iterable[Mapping[str, str]], provider_id: str = "geo-fixture"):
        super().__init__(provider_id)
        self._rows = {ip_to_int(r["address"].strip()): dict(r) for r in rows}

    @classmethod
    def from_path(cls, path: str | os.PathLike, provider_id: str = "geo-fixture") -> "CsvGeoProvider":
        with open(path, newline="") as fh:
            return cls(list(csv.DictReader(fh)), provider_id)

    def fetch_payload(self, address: int) -> Mapping:
        try:
            return self._rows[address]
        except KeyError:
            raise NotFound(int_to_ip(address)) from None

    def addresses(self) -> list[int]:
        return sorted(self._rows)


class FixtureScanProvider(Provider):
    """Scan fixture: records with ``address``, ``ports``, ``cves`` and ``device_type``.

    Accepts a JSON list, a JSON object with a ``records`` list, or JSONL.
    """

    kind = SCAN

    def __init__(self, records: Iterable[Mapping], provider_id: str = "scan-fixture"):
        super().__init__(provider_id)
        self._records = {ip_to_int(r["address"]): r for r in records}

    @classmethod
    def from_path(cls, path: str | os.PathLike, provider_id: str = "scan-fixture") -> "FixtureScanProvider":
        text = Path(path).read_text()
        if str(path).endswith(".jsonl"):
            records = [json.loads(line) for line in text.splitlines() if line.strip()]
        else:
            doc = json.loads(text)
            records = doc["records"] if isinstance(doc, Mapping) else doc
        return cls(records, provider_id)

    def fetch_payload(self, address: int) -> Mapping:
        try:
            return self._records[address]
        except KeyError:
            raise NotFound(int_to_ip(address)) from None

    def addresses(self) -> list[int]:
        return sorted(self._records)


class HttpProvider(Provider):
    """JSON-over-HTTP lookup: ``GET <base_url>/<address>?key=<key>``.

    Payload fields follow the fixture names, with Shodan host-API spellings
    (``country_code``, ``latitude``, ``vulns``, ``devicetype``) also accepted.
    """

    def __init__(self, kind: str, base_url: str, key: str | None = None, provider_id: str | None = None,
                 session: Any = None, timeout: float = 15.0):
        super().__init__(provider_id or f"{kind}-http")
        self.kind = kind
        self.base_url = base_url.rstrip("/")
        self._key = key
        self.timeout = timeout
        if session is None:
            import requests
            session = requests.Session()
        self.session = session

    @classmethod
    def from_env(cls, kind: str, env: Mapping[str, str] | None = None, **kwargs: Any) -> "HttpProvider | None":
        env = os.environ if env is None else env
        url = env.get(f"{kind.upper()}_PROVIDER_URL")
        if not url:
            return None
        return cls(kind, url, env.get(f"{kind.upper()}_PROVIDER_KEY"), **kwargs)

    def fetch_payload(self, address: int) -> Mapping:
        import requests

        params = {"key": self._key} if self._key else None
        try:
            resp = self.session.get(f"{self.base_url}/{int_to_ip(address)}", params=params, timeout=self.timeout)
        except requests.RequestException as exc:
            raise TransportError(f"{int_to_ip(address)}: {exc}") from exc
        if resp.status_code == 404:
            raise NotFound(int_to_ip(address))
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"{int_to_ip(address)}: HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ProviderDataError(f"{int_to_ip(address)}: HTTP {resp.status_code}")
        try:
            payload = resp.json()
        except ValueError:
            raise ProviderDataError(f"{int_to_ip(address)}: response is not JSON") from None
        if not isinstance(payload, Mapping):
            raise ProviderDataError(f"{int_to_ip(address)}: response is not an object")
        return payload


# --- store ---------------------------------------------------------------------

@dataclass
class StoreEntry:
    address: int
    geo: GeoRecord | None = None
    scan: ScanRecord | None = None
    status: dict[str, str] = field(default_factory=dict)
    checked_at: dict[str, float] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "address": int_to_ip(self.address),
            "geo": self.geo.to_dict() if self.geo else None,
            "scan": self.scan.to_dict() if self.scan else None,
            "status": dict(sorted(self.status.items())),
            "checked_at": dict(sorted(self.checked_at.items())),
            "notes": list(self.notes),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StoreEntry":
        return cls(
            ip_to_int(d["address"]),
            GeoRecord.from_dict(d["geo"]) if d.get("geo") else None,
            ScanRecord.from_dict(d["scan"]) if d.get("scan") else None,
            dict(d.get("status", {})),
            dict(d.get("checked_at", {})),
            list(d.get("notes", [])),
        )

    def copy(self) -> "StoreEntry":
        return replace(self, status=dict(self.status), checked_at=dict(self.checked_at), notes=list(self.notes))


class EnrichmentStore:
    """Address-keyed cache of enrichment results.

    When ``path`` is set, committed entries are appended to that JSONL file
    (last line per address wins on load); :meth:`compact` rewrites it sorted.
    """

    def __init__(self, ttl: float = DEFAULT_TTL, clock: Callable[[], float] = time.time,
                 path: str | os.PathLike | None = None):
        self.ttl = ttl
        self.clock = clock
        self.path = Path(path) if path is not None else None
        self.entries: dict[int, StoreEntry] = {}
        self._lock = threading.Lock()

    @classmethod
    def open(cls, path: str | os.PathLike, ttl: float = DEFAULT_TTL,
             clock: Callable[[], float] = time.time) -> "EnrichmentStore":
        store = cls(ttl, clock, path)
        if store.path.exists():
            for line in store.path.read_text().splitlines():
                if line.strip():
                    entry = StoreEntry.from_dict(json.loads(line))
                    store.entries[entry.address] = entry
        return store

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, address: int) -> bool:
        return address in self.entries

    def get(self, address: int) -> StoreEntry | None:
        return self.entries.get(address)

    def geo(self, address: int) -> GeoRecord | None:
        e = self.entries.get(address)
        return e.geo if e else None

    def scan(self, address: int) -> ScanRecord | None:
        e = self.entries.get(address)
        return e.scan if e else None

    def copy(self) -> "EnrichmentStore":
        new = EnrichmentStore(self.ttl, self.clock, self.path)
        new.entries = {a: e.copy() for a, e in self.entries.items()}
        return new

    def is_fresh(self, address: int, kind: str) -> bool:
        """True if ``kind`` needs no refetch: a fresh record or a recent not_found."""
        e = self.entries.get(address)
        if e is None or e.status.get(kind) not in (FRESH, NOT_FOUND):
            return False
        return self.clock() - e.checked_at.get(kind, float("-inf")) < self.ttl

    def status(self, address: int, kind: str) -> str | None:
        """Current status, reporting expired fresh records as stale."""
        e = self.entries.get(address)
        if e is None or kind not in e.status:
            return None
        if e.status[kind] == FRESH and not self.is_fresh(address, kind):
            return STALE
        return e.status[kind]

    def commit(self, entries: Sequence[StoreEntry]) -> None:
        with self._lock:
            for e in entries:
                self.entries[e.address] = e
            if self.path is not None and entries:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with open(self.path, "a") as fh:
                    for e in entries:
                        fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")

    def compact(self) -> None:
        if self.path is None:
            return
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            tmp = self.path.with_suffix(self.path.suffix + ".tmp")
            with open(tmp, "w") as fh:
                for a in sorted(self.entries):
                    fh.write(json.dumps(self.entries[a].to_dict(), sort_keys=True) + "\n")
            os.replace(tmp, self.path)

    def status_counts(self) -> dict[str, dict[str, int]]:
        counts: dict[str, dict[str, int]] = {GEO: {}, SCAN: {}}
        for a in sorted(self.entries):
            for kind in (GEO, SCAN):
                s = self.status(a, kind)
                if s is not None:
                    counts[kind][s] = counts[kind].get(s, 0) + 1
        return {k: dict(sorted(v.items())) for k, v in counts.items()}


# --- batch enrichment ------------------------------------------------------------

def lookup_geo(address: int, provider: Provider, fetched_at: float | None = None) -> GeoRecord:
    return provider.fetch(address, time.time() if fetched_at is None else fetched_at)


def lookup_scan(address: int, provider: Provider, fetched_at: float | None = None) -> ScanRecord:
    return provider.fetch(address, time.time() if fetched_at is None else fetched_at)


def _fetch_kind(address: int, providers: Sequence[Provider], limiters: Mapping[str, RateLimiter],
                now: float, retries: int) -> tuple[Any, str, list[str]]:
    """Ask every provider of one kind; keep the newest record."""
    records, notes, outcomes = [], [], []
    for p in providers:
        for attempt in range(retries + 1):
            limiters[p.provider_id].acquire()
            try:
                records.append(p.fetch(address, now))
                outcomes.append(FRESH)
            except NotFound:
                outcomes.append(NOT_FOUND)
            except TransportError as exc:
                if attempt < retries:
                    continue
                outcomes.append(ERROR)
                notes.append(f"{p.provider_id}: transport error: {exc}")
            except ProviderDataError as exc:
                outcomes.append(ERROR)
                notes.append(f"{p.provider_id}: provider-data error: {exc}")
            break
    if records:
        # newest wins; ties keep provider order
        best = max(enumerate(records), key=lambda ir: (ir[1].fetched_at, -ir[0]))[1]
        if len(records) > 1:
            notes.append("merged " + ",".join(r.provider_id for r in records) + f" -> {best.provider_id}")
        return best, FRESH, notes
    if ERROR in outcomes:
        return None, ERROR, notes
    return None, NOT_FOUND, notes


def enrich_batch(addresses: Iterable[int], providers: Sequence[Provider], store: EnrichmentStore,
                 rate_limits: Mapping[str, float] | None = None, limiters: Mapping[str, RateLimiter] | None = None,
                 in_flight: int = 4, retries: int = 1) -> EnrichmentStore:
    """Fill ``store`` for ``addresses`` and return the updated copy.

    Fresh (and recently not-found) entries are never refetched. Each
    provider gets its own :class:`RateLimiter`; failures are recorded per
    address and per kind, so a scan outage leaves geo data untouched.
    """
    result = store.copy()
    by_kind = {GEO: [p for p in providers if p.kind == GEO], SCAN: [p for p in providers if p.kind == SCAN]}
    rate_limits = rate_limits or {}
    limiters = dict(limiters or {})
    for p in providers:
        if p.provider_id not in limiters:
            limiters[p.provider_id] = RateLimiter(rate_limits.get(p.provider_id, DEFAULT_RATE))

    todo = []
    for a in sorted(set(addresses)):
        kinds = [k for k, ps in by_kind.items() if ps and not result.is_fresh(a, k)]
        if kinds:
            todo.append((a, kinds))
    if not todo:
        return result

    now = result.clock()

    def work(item: tuple[int, list[str]]) -> StoreEntry:
        address, kinds = item
        entry = result.entries[address].copy() if address in result.entries else StoreEntry(address)
        for kind in kinds:
            record, status, notes = _fetch_kind(address, by_kind[kind], limiters, now, retries)
            entry.checked_at[kind] = now
            entry.notes = [n for n in entry.notes if not n.startswith(f"{kind}:")] + [f"{kind}: {n}" for n in notes]
            if record is not None:
                setattr(entry, kind, record)
                entry.status[kind] = FRESH
            elif status == ERROR and getattr(entry, kind) is not None:
                # keep the previous record; it is now past its TTL
                entry.status[kind] = STALE
            else:
                setattr(entry, kind, None)
                entry.status[kind] = status
        return entry

    with ThreadPoolExecutor(max_workers=max(1, in_flight)) as pool:
        updated = list(pool.map(work, todo))
    result.commit(updated)
    return result
