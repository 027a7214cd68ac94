"""CIDR prefixes and canonical prefix sets over the IPv4 space.

Addresses are plain ``int`` values in ``[0, 2**32)``. A :class:`PrefixSet` is
always sorted, duplicate-free and containment-free; sibling merging is on by
default and can be disabled to keep the original /8, /16, /24 granularity.
"""

from __future__ import annotations

import bisect
import ipaddress
import logging
from dataclasses import dataclass
from typing import Iterable, Iterator

log = logging.getLogger(__name__)

ADDRESS_SPACE = 1 << 32


class PrefixError(ValueError):
    """Raised for unparseable or non-canonical prefix text."""


def ip_to_int(text: str) -> int:
    """Parse a dotted quad. Leading-zero octets are rejected."""
    try:
        return int(ipaddress.IPv4Address(text))
    except ipaddress.AddressValueError as exc:
        raise PrefixError(f"invalid IPv4 address {text!r}: {exc}") from None


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


@dataclass(frozen=True, order=True)
class Prefix:
    base: int
    length: int

    def __post_init__(self) -> None:
        if not 0 <= self.length <= 32:
            raise PrefixError(f"prefix length {self.length} outside 0..32")
        if not 0 <= self.base < ADDRESS_SPACE:
            raise PrefixError(f"base {self.base} outside the IPv4 space")
        if self.base & self.hostmask:
            raise PrefixError(f"host bits set in {int_to_ip(self.base)}/{self.length}")

    @classmethod
    def covering(cls, address: int, length: int) -> "Prefix":
        """Prefix of ``length`` bits that contains ``address``."""
        hostmask = (1 << (32 - length)) - 1
        return cls(address & ~hostmask & (ADDRESS_SPACE - 1), length)

    @property
    def hostmask(self) -> int:
        return (1 << (32 - self.length)) - 1

    @property
    def size(self) -> int:
        return 1 << (32 - self.length)

    @property
    def last(self) -> int:
        return self.base + self.size - 1

    def covers(self, address: int) -> bool:
        return self.base <= address <= self.last

    def covers_prefix(self, other: "Prefix") -> bool:
        return self.length <= other.length and self.base <= other.base and other.last <= self.last

    def __str__(self) -> str:
        return f"{int_to_ip(self.base)}/{self.length}"


def parse_prefix(text: str, normalize: bool = False, diagnostics: list[str] | None = None) -> Prefix:
    """Parse ``a.b.c.d/n`` into a canonical :class:`Prefix`.

    Host bits below the mask are an error unless ``normalize`` is set, in
    which case they are cleared and a diagnostic is recorded (appended to
    ``diagnostics`` when given, and logged).
    """
    addr_text, sep, length_text = text.strip().partition("/")
    if not sep or not length_text.isdigit():
        raise PrefixError(f"expected a.b.c.d/n, got {text!r}")
    length = int(length_text)
    if length > 32:
        raise PrefixError(f"prefix length {length} outside 0..32 in {text!r}")
    address = ip_to_int(addr_text)
    prefix = Prefix.covering(address, length)
    if prefix.base != address:
        if not normalize:
            raise PrefixError(f"host bits set in {text!r}")
        msg = f"host bits cleared: {text} -> {prefix}"
        log.info(msg)
        if diagnostics is not None:
            diagnostics.append(msg)
    return prefix


def _siblings(a: Prefix, b: Prefix) -> bool:
    if a.length != b.length or a.length == 0:
        return False
    # a is the lower half of the parent: the parent's host bits in a.base are zero
    return b.base == a.base + a.size and a.base & (a.size * 2 - 1) == 0


class PrefixSet:
    """Immutable, canonical set of prefixes with O(log n) membership."""

    __slots__ = ("prefixes", "merged", "_bases")

    def __init__(self, prefixes: Iterable[Prefix] = (), merge: bool = True):
        self.prefixes: tuple[Prefix, ...] = _canonicalize(prefixes, merge)
        self.merged = merge
        self._bases = [p.base for p in self.prefixes]

    def __iter__(self) -> Iterator[Prefix]:
        return iter(self.prefixes)

    def __len__(self) -> int:
        return len(self.prefixes)

    def __contains__(self, address: int) -> bool:
        return self.contains(address)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PrefixSet):
            return NotImplemented
        return self.prefixes == other.prefixes

    def __hash__(self) -> int:
        return hash(self.prefixes)

    def __repr__(self) -> str:
        shown = ", ".join(str(p) for p in self.prefixes[:6])
        more = ", ..." if len(self.prefixes) > 6 else ""
        return f"PrefixSet([{shown}{more}])"

    def contains(self, address: int) -> bool:
        i = bisect.bisect_right(self._bases, address) - 1
        return i >= 0 and address <= self.prefixes[i].last

    def address_count(self) -> int:
        return sum(p.size for p in self.prefixes)

    def to_text(self) -> list[str]:
        return [str(p) for p in self.prefixes]


def _canonicalize(prefixes: Iterable[Prefix], merge: bool) -> tuple[Prefix, ...]:
    # Sorted by (base, length), any container precedes what it contains.
    stack: list[Prefix] = []
    for p in sorted(set(prefixes)):
        if stack and stack[-1].last >= p.base:
            continue
        stack.append(p)
        while merge and len(stack) >= 2 and _siblings(stack[-2], stack[-1]):
            right = stack.pop()
            left = stack.pop()
            stack.append(Prefix(left.base, right.length - 1))
    return tuple(stack)


def normalize(prefixes: Iterable[Prefix], merge: bool = True) -> PrefixSet:
    return PrefixSet(prefixes, merge=merge)


def address_count(prefix_set: PrefixSet) -> int:
    return prefix_set.address_count()


def contains(prefix_set: PrefixSet, address: int) -> bool:
    return prefix_set.contains(address)


def length_breakdown(prefixes: Iterable[Prefix], lengths: Iterable[int] | None = None) -> list[tuple[int, int, int]]:
    """``(length, unique prefix count, covered addresses)`` rows, longest mask last.

    Duplicates are collapsed before counting. Pass ``lengths`` to force rows
    (with zero counts) for lengths that may be absent.
    """
    counts: dict[int, int] = {}
    for p in set(prefixes):
        counts[p.length] = counts.get(p.length, 0) + 1
    keys = sorted(set(counts) | set(lengths or ()))
    return [(n, counts.get(n, 0), counts.get(n, 0) << (32 - n)) for n in keys]
