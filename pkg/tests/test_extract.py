import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iotatlas.extract import (
    DEFAULT_POLICY,
    EndpointHit,
    ExtractionPolicy,
    ExtractionReport,
    MalwareSample,
    Role,
    RoleManifest,
    classify_role,
    dense_members,
    detect_masked,
    extract_corpus,
    load_corpus,
    scan_ascii_ipv4,
    scan_raw32,
    scan_sample,
)
from iotatlas.ipspace import int_to_ip, ip_to_int, parse_prefix

from oracles import enumerate_quads, quad_value

OPEN = ExtractionPolicy(bogons=())  # no bogon filtering
DOC = DEFAULT_POLICY.without("198.51.100.0/24", "192.0.2.0/24", "203.0.113.0/24")


class TestScanAscii:
    def test_url(self):
        hits = scan_ascii_ipv4(b"GET http://198.51.100.7/bins.sh", DOC)
        assert [(h.literal, h.byte_offset) for h in hits] == [("198.51.100.7", 11)]

    def test_documentation_range_is_bogon_by_default(self):
        assert scan_ascii_ipv4(b"GET http://198.51.100.7/bins.sh") == []

    def test_five_octets_rejected_whole(self):
        assert scan_ascii_ipv4(b"v1.2.3.4.5 build", OPEN) == []

    def test_invalid_octet_and_bogon(self):
        assert scan_ascii_ipv4(b"999.1.1.1 10.0.0.5") == []

    def test_leading_zero_rejected(self):
        assert scan_ascii_ipv4(b" 01.2.3.4 1.02.3.4 ", OPEN) == []
        assert [h.literal for h in scan_ascii_ipv4(b" 0.2.3.4 ", OPEN)] == ["0.2.3.4"]

    def test_trailing_dot_rejects(self):
        assert scan_ascii_ipv4(b"host 45.1.2.3. end", OPEN) == []

    def test_port_suffix_kept(self):
        hits = scan_ascii_ipv4(b"45.1.2.3:23", OPEN)
        assert [h.literal for h in hits] == ["45.1.2.3"]

    def test_adjacent_letters_are_boundaries(self):
        assert [h.literal for h in scan_ascii_ipv4(b"ip45.1.2.3x", OPEN)] == ["45.1.2.3"]

    def test_empty(self):
        assert scan_ascii_ipv4(b"") == []

    def test_context_window(self):
        blob = b"\x00\x01" + b"A" * 100 + b" 45.1.2.3 " + b"B" * 100 + b"\xff"
        (hit,) = scan_ascii_ipv4(blob, OPEN)
        assert len(hit.context) == 64 and "45.1.2.3" in hit.context

    def test_context_stops_at_binary(self):
        (hit,) = scan_ascii_ipv4(b"wget\x00 45.1.2.3\x00tail", OPEN)
        assert hit.context == " 45.1.2.3"

    def test_round_trip_and_bounds(self):
        blob = b"a 1.2.3.4 b 255.255.255.254;8.8.8.8"
        for h in scan_ascii_ipv4(blob, OPEN):
            assert int_to_ip(h.address) == h.literal
            assert h.byte_offset + len(h.literal) <= len(blob)

    def test_bogon_policy_configurable(self):
        assert scan_ascii_ipv4(b" 10.0.0.5 ", DEFAULT_POLICY.without("10.0.0.0/8"))[0].literal == "10.0.0.5"


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=80) | st.text(alphabet="0123456789.x/ :,", max_size=60).map(str.encode))
def test_scan_matches_enumeration_oracle(blob):
    got = [(h.byte_offset, h.literal) for h in scan_ascii_ipv4(blob, OPEN)]
    assert got == enumerate_quads(blob)
    offsets = [o for o, _ in got]
    assert offsets == sorted(set(offsets))
    for (o1, l1), (o2, _) in zip(got, got[1:]):
        assert o1 + len(l1) < o2


class TestDetectMasked:
    @pytest.mark.parametrize("token,expected", [
        ("41.x.x.x", "41.0.0.0/8"),
        ("189.34.5.%d", "189.34.5.0/24"),
        ("12.34.*.*", "12.34.0.0/16"),
        ("77.8.9.X", "77.8.9.0/24"),
        ("1.2.3.0/24", "1.2.3.0/24"),
        ("5.6.0.0/16", "5.6.0.0/16"),
    ])
    def test_maps(self, token, expected):
        assert str(detect_masked(token, 0).prefix) == expected

    @pytest.mark.parametrize("token", ["1.2.x.1", "x.2.3.4", "x.x.x.x", "1.2.3.4", "300.x.x.x", "1.x.3.x", "1.2.x.0/24"])
    def test_absent(self, token):
        assert detect_masked(token, 0) is None

    def test_bad_cidr_length_is_diagnostic(self):
        diags = []
        assert detect_masked("1.2.3.4/33", 7, diags) is None
        assert diags and "offset 7" in diags[0]

    def test_host_bits_normalized(self):
        diags = []
        assert str(detect_masked("1.2.3.4/24", 0, diags).prefix) == "1.2.3.0/24"
        assert diags


class TestClassifyRole:
    def hit(self, ctx, literal="45.1.2.3", sid="s"):
        return EndpointHit(sid, 0, literal, ip_to_int(literal), context=ctx)

    @pytest.mark.parametrize("ctx", [
        "wget http://45.1.2.3/a", "tftp -g 45.1.2.3", "curl 45.1.2.3", "GET /x HTTP/1.0 45.1.2.3",
        "ftp://45.1.2.3/", "connect 45.1.2.3:23 now",
    ])
    def test_dropzone_context(self, ctx):
        assert classify_role(self.hit(ctx)) is Role.DROPZONE

    def test_get_is_case_sensitive(self):
        assert classify_role(self.hit("target 45.1.2.3 get ")) is Role.UNKNOWN

    def test_manifest_precedence(self):
        m = RoleManifest({("s", "45.1.2.3"): "target"})
        assert classify_role(self.hit("wget http://45.1.2.3/a"), m) is Role.TARGET

    def test_isolated_unknown(self):
        assert classify_role(self.hit("")) is Role.UNKNOWN

    def test_list_region_target(self):
        assert classify_role(self.hit("45.1.2.3,5.6.7.8"), in_list=True) is Role.TARGET

    def test_masked_defaults_to_target(self):
        h = EndpointHit("s", 0, "41.x.x.x", None, parse_prefix("41.0.0.0/8"), context="wget 41.x.x.x")
        assert classify_role(h) is Role.TARGET


def test_dense_members():
    hits = [EndpointHit("s", off, "1.1.1.1", 1) for off in (0, 10, 20, 200, 300, 310)]
    assert dense_members(hits) == {0, 1, 2}
    assert dense_members(hits, regions=[0, 0, 1, 1, 2, 2]) == set()


def test_scan_sample_roles_and_masks():
    blob = (b"\x7fELF\x00cd /tmp; wget http://45.3.2.1/x.sh\x00\x00"
            b"41.x.x.x,61.2.3.4,5.6.7.8,9.9.9.9,8.8.8.0/24\x00\x00dns 8.8.4.4\x00")
    hits, diags = scan_sample(blob, "s")
    assert diags == []
    got = [(h.literal, h.role, None if h.mask is None else str(h.mask)) for h in hits]
    assert got == [
        ("45.3.2.1", Role.DROPZONE, None),
        ("41.x.x.x", Role.TARGET, "41.0.0.0/8"),
        ("61.2.3.4", Role.TARGET, None),
        ("5.6.7.8", Role.TARGET, None),
        ("9.9.9.9", Role.TARGET, None),
        ("8.8.8.0/24", Role.TARGET, "8.8.8.0/24"),
        ("8.8.4.4", Role.UNKNOWN, None),
    ]
    for h in hits:
        assert h.byte_offset + h.span <= len(blob)
        assert h.mask is None or h.mask.length in (8, 16, 24)


def test_masked_bogon_and_odd_lengths_dropped():
    hits, diags = scan_sample(b" 10.x.x.x 45.6.0.0/20 1.2.3.4/40 ", "s")
    # the quads stay as plain host hits; only the masked readings are dropped
    assert [(h.literal, h.mask) for h in hits] == [("45.6.0.0", None), ("1.2.3.4", None)]
    assert any("unsupported mask length" in d for d in diags)
    assert any("outside 0..32" in d for d in diags)


def test_raw32_mode():
    blob = bytes([45, 1, 2, 3, 10, 0, 0, 1])
    hits = scan_raw32(blob)
    assert [(h.byte_offset, int_to_ip(h.address)) for h in hits] == [(0, "45.1.2.3")]
    assert hits[0].span == 4
    assert scan_sample(blob, "s")[0] == []
    assert len(scan_sample(blob, "s", ExtractionPolicy(raw32=True))[0]) == 1


def _corpus(rng, n):
    out = []
    for i in range(n):
        parts = [f"s{i}".encode()]
        if rng.random() < 0.7:
            parts.append(f"\x00wget http://45.{rng.randrange(256)}.1.{i % 250}/b\x00".encode())
        if rng.random() < 0.5:
            parts.append(("\x00" + ",".join(f"61.{rng.randrange(256)}.{j}.9" for j in range(4)) + "\x00").encode())
        out.append(MalwareSample.from_bytes(b"".join(parts), f"mem://{i}"))
    return out


class TestExtractCorpus:
    def test_counts_and_coverage(self):
        samples = [
            MalwareSample.from_bytes(b"wget http://45.1.1.1/a\x00\x0061.1.1.1,61.1.1.2,61.1.1.3"),
            MalwareSample.from_bytes(b"wget http://45.1.1.1/b\x00\x0061.1.1.1,61.1.1.2,61.1.1.4"),
            MalwareSample.from_bytes(b"nothing here"),
        ]
        r = extract_corpus(samples)
        assert r.sample_count == 3
        assert r.occurrences(Role.TARGET) == 6 and len(r.unique_targets) == 4
        assert r.occurrences(Role.DROPZONE) == 2 and len(r.unique_dropzones) == 1
        assert r.coverage(Role.TARGET) == pytest.approx(2 / 3)
        s = r.summary()
        assert s["roles"]["target-candidate"]["coverage_percent"] == 66.67
        assert not s["empty_corpus"]

    def test_empty_corpus(self):
        r = extract_corpus([])
        s = r.summary()
        assert s["empty_corpus"] is True and s["sample_count"] == 0
        assert all(v["coverage"] == 0.0 and v["occurrences"] == 0 for v in s["roles"].values())

    def test_unreadable_sample_recorded(self, tmp_path):
        good = tmp_path / "a.bin"
        good.write_bytes(b"wget http://45.1.1.1/a")
        ghost = MalwareSample("deadbeef", 10, str(tmp_path / "missing.bin"))
        r = extract_corpus([MalwareSample.from_path(good), ghost])
        assert r.sample_count == 1 and "deadbeef" in r.errors

    def test_order_and_worker_independence(self, tmp_path):
        rng = random.Random(5)
        samples = _corpus(rng, 40)
        a = extract_corpus(samples)
        shuffled = samples[:]
        rng.shuffle(shuffled)
        b = extract_corpus(shuffled, workers=3)
        a.write(tmp_path / "a")
        b.write(tmp_path / "b")
        for name in ("hits.jsonl", "samples.jsonl", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_monotone_occurrences(self):
        rng = random.Random(9)
        samples = _corpus(rng, 20)
        before = extract_corpus(samples[:-1])
        after = extract_corpus(samples)
        for role in Role:
            assert after.occurrences(role) >= before.occurrences(role)

    def test_duplicate_bytes_collapse(self):
        s = MalwareSample.from_bytes(b"wget http://45.1.1.1/a")
        r = extract_corpus([s, MalwareSample.from_bytes(b"wget http://45.1.1.1/a", "other")])
        assert r.sample_count == 1

    def test_write_read_round_trip(self, tmp_path):
        samples = _corpus(random.Random(2), 15) + [MalwareSample.from_bytes(b"\x0041.x.x.x,7.7.7.7,7.7.7.8")]
        r = extract_corpus(samples)
        r.write(tmp_path)
        back = ExtractionReport.read(tmp_path)
        assert back.summary() == r.summary()
        assert list(back.iter_hits()) == list(r.iter_hits())
        assert back.masked_endpoints.to_text() == ["41.0.0.0/8"]

    def test_manifest_file(self, tmp_path):
        blob = b"wget http://45.1.1.1/a"
        s = MalwareSample.from_bytes(blob)
        path = tmp_path / "roles.txt"
        path.write_text(f"# labels\n{s.sample_id},45.1.1.1,target\n")
        r = extract_corpus([s], manifest=RoleManifest.load(path))
        assert r.unique_targets == {ip_to_int("45.1.1.1")}

    def test_load_corpus(self, tmp_path):
        (tmp_path / "sub").mkdir()
        (tmp_path / "sub" / "x.bin").write_bytes(b"a")
        (tmp_path / "y.bin").write_bytes(b"b")
        samples, errors = load_corpus(tmp_path)
        assert len(samples) == 2 and errors == {}
        assert all(len(s.sample_id) == 64 for s in samples)


def test_planted_recall():
    rng = random.Random(11)
    planted = [f"{rng.randint(11, 99)}.{rng.randrange(256)}.{rng.randrange(256)}.{rng.randrange(256)}"
               for _ in range(50)]
    blob = ("|".join(planted)).encode()
    found = {h.literal for h in scan_ascii_ipv4(blob, OPEN)}
    assert found == set(planted)
    assert {quad_value(p) for p in planted} == {h.address for h in scan_ascii_ipv4(blob, OPEN)}
