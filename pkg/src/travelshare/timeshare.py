"""Time constraint allowing several activities to share one interval.

Durations are held set-keyed (:class:`CanonicalAllocation`): each shared
interval appears once, under the set of activities undertaken together.  The
symmetric matrix over activity pairs is a derived view in which an interval
shared by activities ``i`` and ``j`` appears twice, at ``(i, j)`` and
``(j, i)``; the sharing coefficient ``(z - k + 1)! / z!`` undoes the
duplication when the matrix is summed.

Only ``z <= 2`` has a matrix view.  For ``z >= 3`` a ``k``-activity set
appears under a multinomial number of index tuples that the coefficient does
not cancel in general (``z = 3, k = 2``: six tuples at weight 1/3), so the
tensor operations refuse it.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from typing import Iterable, Mapping

import numpy as np

from .errors import DataError, DomainError, ParseError, UnsupportedOperationError


def check_consistency(n, z, k) -> bool:
    """True iff n >= z >= k >= 1 with all three positive integers."""
    vals = (n, z, k)
    if any(isinstance(v, bool) or not isinstance(v, (int, np.integer)) for v in vals):
        return False
    return n >= z >= k >= 1


def sharing_coefficient(z: int, k: int) -> Fraction:
    if not check_consistency(z, z, k):
        raise DomainError(f"invalid (z, k) = ({z}, {k}); need z >= k >= 1")
    return Fraction(math.factorial(z - k + 1), math.factorial(z))


def _key(activities: Iterable[int]) -> frozenset[int]:
    return frozenset(int(a) for a in activities)


@dataclass(frozen=True)
class ActivityUniverse:
    """Activities ``1..n`` of which at most ``z`` may share an interval.

    ``infeasible`` lists the activity sets (size 2..z) that cannot share
    time; every other set of size <= z is feasible.
    """

    n: int
    z: int
    infeasible: frozenset[frozenset[int]] = frozenset()

    def __post_init__(self) -> None:
        if not check_consistency(self.n, self.z, 1):
            raise DomainError(f"need n >= z >= 1, got n={self.n}, z={self.z}")
        sets = frozenset(_key(s) for s in self.infeasible)
        for s in sets:
            if len(s) < 2:
                raise DomainError("single activities are always feasible")
            if len(s) > self.z or min(s) < 1 or max(s) > self.n:
                raise DomainError(f"infeasible set {sorted(s)} outside the universe")
        object.__setattr__(self, "infeasible", sets)

    def feasible(self, activities: Iterable[int]) -> bool:
        s = _key(activities)
        return 1 <= len(s) <= self.z and min(s) >= 1 and max(s) <= self.n and s not in self.infeasible

    def delta_matrix(self) -> np.ndarray:
        """Pairwise feasibility dummies (z <= 2 view)."""
        d = np.eye(self.n)
        if self.z >= 2:
            for i, j in combinations(range(1, self.n + 1), 2):
                if self.feasible((i, j)):
                    d[i - 1, j - 1] = d[j - 1, i - 1] = 1.0
        return d


@dataclass(frozen=True)
class CanonicalAllocation:
    universe: ActivityUniverse
    durations: Mapping[frozenset[int], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        clean: dict[frozenset[int], float] = {}
        for key, t in self.durations.items():
            s = _key(key)
            t = float(t)
            if not math.isfinite(t) or t < 0:
                raise DataError(f"duration of {sorted(s)} must be finite and >= 0, got {t}")
            if not s or len(s) > self.universe.z or min(s) < 1 or max(s) > self.universe.n:
                raise DataError(f"activity set {sorted(s)} outside the universe (n={self.universe.n}, z={self.universe.z})")
            if t > 0 and not self.universe.feasible(s):
                raise DataError(f"activities {sorted(s)} cannot share time but have duration {t}")
            if s in clean:
                raise DataError(f"activity set {sorted(s)} listed twice")
            clean[s] = t
        object.__setattr__(self, "durations", clean)

    def __getitem__(self, activities: Iterable[int]) -> float:
        return self.durations.get(_key(activities), 0.0)


@dataclass(frozen=True)
class AllocationTensor:
    """z = 2 matrix view: diagonal holds exclusive time, off-diagonal shared time."""

    matrix: np.ndarray
    delta: np.ndarray

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=float)
        d = np.array(self.delta, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or d.shape != m.shape:
            raise DataError("allocation matrix and feasibility matrix must be square and equal in shape")
        m.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "delta", d)


def build_tensor(alloc: CanonicalAllocation, universe: ActivityUniverse | None = None) -> AllocationTensor:
    universe = universe or alloc.universe
    if universe.z >= 3:
        raise UnsupportedOperationError(
            f"z = {universe.z}: the sharing coefficient does not cancel tuple multiplicities "
            "for 1 < k < z, so only z <= 2 has a consistent tensor view"
        )
    n = universe.n
    m = np.zeros((n, n))
    for s, t in alloc.durations.items():
        if t > 0 and not universe.feasible(s):
            raise DataError(f"activities {sorted(s)} cannot share time but have duration {t}")
        idx = sorted(a - 1 for a in s)
        if max(idx) >= n:
            raise DataError(f"activity set {sorted(s)} outside the universe")
        if len(idx) == 1:
            m[idx[0], idx[0]] = t
        else:
            i, j = idx
            m[i, j] = m[j, i] = t
    return AllocationTensor(m, universe.delta_matrix())


def tensor_total_time(tensor: AllocationTensor, universe: ActivityUniverse | None = None) -> float:
    """Coefficient-weighted sum over all matrix entries."""
    m, d = tensor.matrix, tensor.delta
    z = 2 if universe is None else universe.z
    if universe is not None:
        if universe.z >= 3:
            raise UnsupportedOperationError(f"z = {universe.z} has no matrix view")
        if universe.n != m.shape[0]:
            raise DataError(f"matrix is {m.shape[0]}x{m.shape[0]} but the universe has {universe.n} activities")
    if not np.array_equal(m, m.T):
        raise DataError("allocation matrix is not symmetric")
    off = ~np.eye(len(m), dtype=bool)
    if z == 1 and np.any(m[off] != 0):
        raise DataError("z = 1 admits no shared intervals")
    diag = float(sharing_coefficient(z, 1))
    total = diag * float(np.sum(np.diag(d) * np.diag(m)))
    if z == 2:
        total += float(sharing_coefficient(2, 2)) * float(np.sum((d * m)[off]))
    return total


def canonical_total_time(alloc: CanonicalAllocation) -> float:
    return math.fsum(alloc.durations.values())


def small_matrix(h: float, l: float, t: float, h_t: float, l_t: float) -> AllocationTensor:
    """Work (1), leisure (2), travel (3); work and leisure never share time."""
    vals = dict(h=h, l=l, t=t, h_t=h_t, l_t=l_t)
    for name, v in vals.items():
        if not math.isfinite(v) or v < 0:
            raise DomainError(f"{name} must be a finite duration >= 0, got {v}")
    universe = small_universe()
    alloc = CanonicalAllocation(
        universe,
        {frozenset({1}): h, frozenset({2}): l, frozenset({3}): t, frozenset({1, 3}): h_t, frozenset({2, 3}): l_t},
    )
    return build_tensor(alloc)


def small_universe() -> ActivityUniverse:
    return ActivityUniverse(3, 2, frozenset({frozenset({1, 2})}))


def random_allocation(rng: np.random.Generator, max_n: int = 6, p_infeasible: float = 0.3) -> CanonicalAllocation:
    """Random z = 2 allocation with a random feasibility pattern."""
    n = int(rng.integers(2, max_n + 1))
    pairs = list(combinations(range(1, n + 1), 2))
    infeasible = frozenset(frozenset(p) for p in pairs if rng.random() < p_infeasible)
    universe = ActivityUniverse(n, 2, infeasible)
    durations: dict[frozenset[int], float] = {}
    for i in range(1, n + 1):
        if rng.random() < 0.8:
            durations[frozenset({i})] = float(rng.exponential(2.0))
    for p in pairs:
        s = frozenset(p)
        if s not in infeasible and rng.random() < 0.5:
            durations[s] = float(rng.exponential(1.0))
    return CanonicalAllocation(universe, durations)


def parse_activity_set(text: str) -> frozenset[int]:
    parts = text.strip().split("+")
    try:
        ids = [int(p) for p in parts]
    except ValueError:
        raise ParseError(f"bad activity list {text!r}") from None
    if any(str(i) != p for i, p in zip(ids, parts)) or ids != sorted(set(ids)):
        raise ParseError(f"activity list {text!r} must be ascending distinct ids joined by '+'")
    return frozenset(ids)


def load_allocation(text: str, universe: ActivityUniverse) -> CanonicalAllocation:
    """Read the ``activities,duration`` CSV format."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0]] != ["activities", "duration"]:
        raise ParseError("allocation file must start with header 'activities,duration'")
    durations: dict[frozenset[int], float] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise ParseError(f"line {lineno}: expected 2 fields, got {len(row)}")
        key = parse_activity_set(row[0])
        try:
            value = float(row[1])
        except ValueError:
            raise ParseError(f"line {lineno}: non-numeric duration {row[1]!r}") from None
        if key in durations:
            raise ParseError(f"line {lineno}: activity set {row[0]} repeated")
        durations[key] = value
    try:
        return CanonicalAllocation(universe, durations)
    except DataError as exc:
        raise DataError(f"allocation file: {exc}") from None


def dump_allocation(alloc: CanonicalAllocation) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["activities", "duration"])
    for s in sorted(alloc.durations, key=lambda s: (len(s), sorted(s))):
        w.writerow(["+".join(str(a) for a in sorted(s)), repr(alloc.durations[s])])
    return buf.getvalue()
