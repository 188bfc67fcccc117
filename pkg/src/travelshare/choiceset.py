"""Activity nests and the combinations built from them.

A combination is a nonempty set of nests, stored as a bitmask in which bit
``b`` stands for the ``b``-th nest of the universe.  The canonical order puts
the singletons first (in nest order) followed by every multi-nest combination
in ascending bitmask order, so with the five default nests the singletons
occupy positions 1-5 and the mixtures positions 6-31.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DomainError, ParseError

MAX_COUNT_N = 62
MAX_NESTS = 16


@dataclass(frozen=True)
class NestId:
    code: str
    name: str = ""

    def __str__(self) -> str:
        return self.code


@dataclass(frozen=True)
class Activity:
    id: int
    label: str
    nest: NestId


PASSIVE = NestId("P", "Passive time spending")
LEISURE = NestId("L", "Leisure (alone)")
INTERACTIVE = NestId("I", "Interacting with other people")
WORK = NestId("W", "Work")
OTHER = NestId("O", "Other activities")

DEFAULT_NESTS: tuple[NestId, ...] = (PASSIVE, LEISURE, INTERACTIVE, WORK, OTHER)

DEFAULT_ACTIVITIES: tuple[Activity, ...] = tuple(
    Activity(i + 1, label, nest)
    for i, (label, nest) in enumerate(
        [
            ("Sleeping/snoozing", PASSIVE),
            ("Window gazing/people watching", PASSIVE),
            ("Being bored", PASSIVE),
            ("Being anxious about the journey", PASSIVE),
            ("Reading for leisure", LEISURE),
            ("Playing games", LEISURE),
            ("Listening to music/radio", LEISURE),
            ("Talking to other passengers", INTERACTIVE),
            ("Text messages/phone calls (personal)", INTERACTIVE),
            ("Entertaining children", INTERACTIVE),
            ("Working/studying (reading/writing/typing/thinking)", WORK),
            ("Text messages/phone calls (work)", WORK),
            ("Eating/drinking", OTHER),
            ("Planning onward/return journey", OTHER),
        ]
    )
)


def _check_universe(nests: Sequence[NestId]) -> tuple[NestId, ...]:
    nests = tuple(nests)
    if not nests:
        raise DomainError("nest list is empty")
    if len(nests) > MAX_NESTS:
        raise DomainError(f"at most {MAX_NESTS} nests are supported, got {len(nests)}")
    codes = [n.code for n in nests]
    if len(set(codes)) != len(codes):
        raise DomainError(f"duplicate nest codes in {codes}")
    for code in codes:
        if not code or "+" in code or any(ch.isspace() for ch in code):
            raise DomainError(f"invalid nest code {code!r}")
    return nests


@dataclass(frozen=True)
class Combination:
    """Nonempty set of nests drawn from ``nests``."""

    mask: int
    nests: tuple[NestId, ...] = DEFAULT_NESTS

    def __post_init__(self) -> None:
        if self.mask <= 0 or self.mask >= (1 << len(self.nests)):
            raise DomainError(f"combination mask {self.mask} outside universe of {len(self.nests)} nests")

    @classmethod
    def of(cls, members: Iterable[NestId | str], nests: Sequence[NestId] = DEFAULT_NESTS) -> "Combination":
        nests = tuple(nests)
        codes = [n.code for n in nests]
        mask = 0
        for m in members:
            code = m.code if isinstance(m, NestId) else m
            try:
                mask |= 1 << codes.index(code)
            except ValueError:
                raise DomainError(f"unknown nest {code!r}") from None
        return cls(mask, nests)

    @property
    def members(self) -> tuple[NestId, ...]:
        return tuple(n for b, n in enumerate(self.nests) if self.mask >> b & 1)

    @property
    def size(self) -> int:
        return self.mask.bit_count()

    @property
    def is_singleton(self) -> bool:
        return self.mask & (self.mask - 1) == 0

    @property
    def index(self) -> int:
        """1-based rank in the canonical enumeration of all combinations."""
        if self.is_singleton:
            return self.mask.bit_length()
        below = self.mask - 1
        return len(self.nests) + below - below.bit_length() + 1

    def contains(self, nest: NestId | str) -> bool:
        code = nest.code if isinstance(nest, NestId) else nest
        return any(n.code == code for n in self.members)

    @property
    def label(self) -> str:
        return canonical_label(self)

    def __str__(self) -> str:
        return self.label


def canonical_key(c: Combination) -> tuple[int, int, int]:
    """Sort key realising the canonical total order."""
    if c.is_singleton:
        return (0, c.mask, 1)
    return (1, c.mask, c.size)


def count_combinations(n: int) -> int:
    if isinstance(n, bool) or not isinstance(n, int):
        raise DomainError(f"n must be an integer, got {n!r}")
    if n < 1 or n > MAX_COUNT_N:
        raise DomainError(f"n must be in 1..{MAX_COUNT_N}, got {n}")
    return sum(comb(n, k) for k in range(1, n + 1))


@dataclass(frozen=True)
class ChoiceSet:
    combinations: tuple[Combination, ...]
    exclusions: frozenset[Combination] = frozenset()
    nests: tuple[NestId, ...] = DEFAULT_NESTS
    _positions: dict = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        if len(set(self.combinations)) != len(self.combinations):
            raise DomainError("duplicate combinations in choice set")
        if any(c in self.exclusions for c in self.combinations):
            raise DomainError("excluded combination present in choice set")
        if list(self.combinations) != sorted(self.combinations, key=canonical_key):
            raise DomainError("choice set is not in canonical order")
        object.__setattr__(self, "_positions", {c: i for i, c in enumerate(self.combinations)})

    def __len__(self) -> int:
        return len(self.combinations)

    def __iter__(self) -> Iterator[Combination]:
        return iter(self.combinations)

    def __getitem__(self, i: int) -> Combination:
        return self.combinations[i]

    def __contains__(self, c: object) -> bool:
        return c in self._positions

    def position(self, c: Combination) -> int:
        """0-based position of ``c`` in this choice set."""
        try:
            return self._positions[c]
        except KeyError:
            raise DomainError(f"{c} is not in the choice set") from None

    @property
    def labels(self) -> list[str]:
        return [canonical_label(c) for c in self.combinations]

    def parse(self, text: str) -> Combination:
        return parse_combination_label(text, self.nests)

    def allocation_matrix(self) -> np.ndarray:
        """(J, M) matrix of allocation weights, rows summing to one."""
        out = np.zeros((len(self), len(self.nests)))
        for j, c in enumerate(self.combinations):
            for b, w in enumerate(_weights_by_bit(c)):
                out[j, b] = float(w)
        return out

    def to_text(self) -> str:
        return "\n".join(self.labels) + "\n"

    @classmethod
    def from_labels(cls, labels: Iterable[str], nests: Sequence[NestId] = DEFAULT_NESTS) -> "ChoiceSet":
        nests = _check_universe(nests)
        combos = sorted({parse_combination_label(s, nests) for s in labels}, key=canonical_key)
        full = {Combination(m, nests) for m in range(1, 1 << len(nests))}
        return cls(tuple(combos), frozenset(full - set(combos)), nests)


def enumerate_combinations(
    nests: Sequence[NestId] = DEFAULT_NESTS,
    exclusions: Iterable[Combination | str] = (),
) -> ChoiceSet:
    nests = _check_universe(nests)
    excl = set()
    for e in exclusions:
        c = parse_combination_label(e, nests) if isinstance(e, str) else e
        if c.nests != nests:
            raise DomainError(f"exclusion {c} refers to a different nest universe")
        excl.add(c)
    combos = [Combination(m, nests) for m in range(1, 1 << len(nests))]
    kept = [c for c in combos if c not in excl]
    if not kept:
        raise DomainError("exclusions remove every alternative")
    kept.sort(key=canonical_key)
    return ChoiceSet(tuple(kept), frozenset(excl), nests)


def parse_combination_label(text: str, nests: Sequence[NestId] = DEFAULT_NESTS) -> Combination:
    nests = tuple(nests)
    if not isinstance(text, str) or not text:
        raise ParseError("empty combination label")
    codes = [n.code for n in nests]
    mask = 0
    for seg in text.split("+"):
        if not seg:
            raise ParseError(f"empty segment in label {text!r}")
        if seg not in codes:
            raise ParseError(f"unknown nest code {seg!r} in label {text!r}")
        bit = 1 << codes.index(seg)
        if mask & bit:
            raise ParseError(f"duplicate nest code {seg!r} in label {text!r}")
        mask |= bit
    return Combination(mask, nests)


def canonical_label(c: Combination) -> str:
    return "+".join(n.code for n in c.members)


def _weights_by_bit(c: Combination) -> list[Fraction]:
    share = Fraction(1, c.size)
    return [share if c.mask >> b & 1 else Fraction(0) for b in range(len(c.nests))]


def allocation_weights(c: Combination) -> dict[NestId, Fraction]:
    """Equal split of a combination across its member nests."""
    return dict(zip(c.nests, _weights_by_bit(c)))
