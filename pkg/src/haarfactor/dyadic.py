"""Exact arithmetic for dyadic intervals, Haar expansions and step functions.

Everything in this module is exact: interval endpoints and measures are
rationals with power-of-two denominators, and every transform keeps whatever
numeric type the caller supplies (int, Fraction, float).  Floating point only
enters when the caller puts it in.

Intervals live in [0, 1).  The interval at level ``l`` and position ``k`` is
[k * 2^-l, (k+1) * 2^-l).  The Haar function of an interval takes the value +1
on the left half, -1 on the right half and 0 outside; it is bounded by 1
rather than normalized in L2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator

import numpy as np

# Dense enumeration of all levels up to N holds 2^(N+1) - 1 intervals; above
# this cap the index sets no longer fit comfortably in memory.
MAX_ENUM_LEVEL = 20


class CapacityError(ValueError):
    """Raised when a requested resolution exceeds the dense-storage cap."""


def _validate_level(level: int) -> None:
    if level < 0:
        raise ValueError(f"level must be nonnegative, got {level}")


@dataclass(frozen=True, order=True)
class DyadicInterval:
    """Half-open dyadic interval [k * 2^-l, (k+1) * 2^-l) in [0, 1)."""

    level: int
    position: int

    def __post_init__(self) -> None:
        _validate_level(self.level)
        if not 0 <= self.position < (1 << self.level):
            raise ValueError(
                f"position {self.position} out of range for level {self.level}"
            )

    @classmethod
    def parse(cls, label: str) -> "DyadicInterval":
        """Parse the textual form ``level:position``."""
        try:
            lvl, pos = label.strip().split(":")
            return cls(int(lvl), int(pos))
        except (ValueError, TypeError) as exc:
            raise ValueError(f"malformed interval label {label!r}") from exc

    @property
    def label(self) -> str:
        return f"{self.level}:{self.position}"

    @property
    def measure(self) -> Fraction:
        return Fraction(1, 1 << self.level)

    @property
    def inf(self) -> Fraction:
        return Fraction(self.position, 1 << self.level)

    @property
    def sup(self) -> Fraction:
        return Fraction(self.position + 1, 1 << self.level)

    def children(self) -> tuple["DyadicInterval", "DyadicInterval"]:
        """Left and right halves; the left one has the smaller infimum."""
        lvl, pos = self.level + 1, self.position << 1
        return DyadicInterval(lvl, pos), DyadicInterval(lvl, pos + 1)

    def parent(self) -> "DyadicInterval | None":
        if self.level == 0:
            return None
        return DyadicInterval(self.level - 1, self.position >> 1)

    def contains(self, other: "DyadicInterval") -> bool:
        if other.level < self.level:
            return False
        return (other.position >> (other.level - self.level)) == self.position

    def disjoint_from(self, other: "DyadicInterval") -> bool:
        # Two dyadic intervals are either nested or disjoint.
        return not (self.contains(other) or other.contains(self))

    def cell_span(self, mesh: int) -> tuple[int, int]:
        """Index range [start, stop) of the cells covering self at mesh 2^-mesh."""
        if mesh < self.level:
            raise ValueError(f"mesh 2^-{mesh} coarser than interval level {self.level}")
        width = 1 << (mesh - self.level)
        return self.position * width, (self.position + 1) * width

    def cell_mask(self, mesh: int) -> int:
        """Bitmask of the mesh cells covering self (bit i = cell i)."""
        start, stop = self.cell_span(mesh)
        return ((1 << (stop - start)) - 1) << start


def interval_index(interval: DyadicInterval) -> int:
    """Position of an interval in the level-major enumeration order."""
    return (1 << interval.level) - 1 + interval.position


def interval_at(index: int) -> DyadicInterval:
    """Inverse of :func:`interval_index`."""
    if index < 0:
        raise ValueError("index must be nonnegative")
    level = (index + 1).bit_length() - 1
    return DyadicInterval(level, index - ((1 << level) - 1))


def enumerate_intervals(N: int) -> "IndexSet":
    """All intervals of level at most N in level-major order."""
    _validate_level(N)
    if N > MAX_ENUM_LEVEL:
        raise CapacityError(
            f"N={N} exceeds the dense enumeration cap of {MAX_ENUM_LEVEL}"
        )
    intervals = tuple(
        DyadicInterval(level, pos)
        for level in range(N + 1)
        for pos in range(1 << level)
    )
    return IndexSet(N=N, intervals=intervals)


@dataclass(frozen=True)
class IndexSet:
    """The index set of all dyadic intervals with level <= N."""

    N: int
    intervals: tuple[DyadicInterval, ...]

    @property
    def size(self) -> int:
        return (1 << (self.N + 1)) - 1

    def index_of(self, interval: DyadicInterval) -> int:
        if interval.level > self.N:
            raise ValueError(f"{interval.label} is finer than level {self.N}")
        return interval_index(interval)

    def __iter__(self) -> Iterator[DyadicInterval]:
        return iter(self.intervals)

    def __len__(self) -> int:
        return self.size


def dimension(N: int) -> int:
    """Dimension of the span of all Haar functions with level <= N."""
    return (1 << (N + 1)) - 1


def measure_vector(N: int) -> np.ndarray:
    """Measures |I| for all I of level <= N, in enumeration order (float)."""
    d = dimension(N)
    out = np.empty(d)
    for level in range(N + 1):
        out[(1 << level) - 1 : (1 << (level + 1)) - 1] = 2.0 ** (-level)
    return out


class HaarVector:
    """A finite Haar expansion sum_I a_I h_I over all levels <= N.

    Coefficients are stored densely in enumeration order and may be ints,
    Fractions or floats; arithmetic preserves exactness of exact inputs.
    """

    __slots__ = ("N", "coeffs")

    def __init__(self, N: int, coeffs) -> None:
        _validate_level(N)
        d = dimension(N)
        coeffs = list(coeffs)
        if len(coeffs) != d:
            raise ValueError(f"expected {d} coefficients for N={N}, got {len(coeffs)}")
        self.N = N
        self.coeffs = coeffs

    @classmethod
    def zero(cls, N: int) -> "HaarVector":
        return cls(N, [0] * dimension(N))

    @classmethod
    def basis(cls, N: int, interval: DyadicInterval) -> "HaarVector":
        """The single Haar function h_I inside resolution N."""
        vec = cls.zero(N)
        vec.coeffs[vec.index_of(interval)] = 1
        return vec

    @classmethod
    def from_pairs(cls, N: int, pairs) -> "HaarVector":
        """Build from (interval, value) pairs; repeated intervals accumulate."""
        vec = cls.zero(N)
        for interval, value in pairs:
            vec.coeffs[vec.index_of(interval)] += value
        return vec

    def index_of(self, interval: DyadicInterval) -> int:
        if interval.level > self.N:
            raise ValueError(f"{interval.label} is finer than level {self.N}")
        return interval_index(interval)

    def coeff(self, interval: DyadicInterval):
        return self.coeffs[self.index_of(interval)]

    def promoted(self, N: int) -> "HaarVector":
        """The same expansion viewed at a finer resolution (zero padding)."""
        if N < self.N:
            raise ValueError("cannot demote a Haar expansion")
        if N == self.N:
            return self
        out = HaarVector.zero(N)
        out.coeffs[: len(self.coeffs)] = self.coeffs
        return out

    def as_array(self) -> np.ndarray:
        return np.array([float(c) for c in self.coeffs])

    def __add__(self, other: "HaarVector") -> "HaarVector":
        N = max(self.N, other.N)
        a, b = self.promoted(N), other.promoted(N)
        return HaarVector(N, [x + y for x, y in zip(a.coeffs, b.coeffs)])

    def scaled(self, factor) -> "HaarVector":
        return HaarVector(self.N, [factor * c for c in self.coeffs])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, HaarVector):
            return NotImplemented
        return self.N == other.N and self.coeffs == other.coeffs

    def __repr__(self) -> str:
        nonzero = sum(1 for c in self.coeffs if c != 0)
        return f"HaarVector(N={self.N}, nonzero={nonzero})"


@dataclass
class StepFunction:
    """Piecewise-constant function on the 2^mesh equal cells of [0, 1)."""

    mesh: int
    values: list

    def __post_init__(self) -> None:
        _validate_level(self.mesh)
        if len(self.values) != (1 << self.mesh):
            raise ValueError(
                f"expected {1 << self.mesh} cells for mesh {self.mesh}, "
                f"got {len(self.values)}"
            )

    def integral(self):
        """Exact integral over [0, 1) when the cells are exact."""
        total = sum(self.values)
        if isinstance(total, float):
            return total / (1 << self.mesh)
        return Fraction(total, 1 << self.mesh)

    def max_abs(self):
        return max(abs(v) for v in self.values)

    def as_array(self) -> np.ndarray:
        return np.array([float(v) for v in self.values])


def haar_to_step(vec: HaarVector) -> StepFunction:
    """Evaluate a Haar expansion on the canonical mesh of 2^(N+1) cells.

    Works level by level from coarse to fine, so the cost is linear in the
    number of cells.  Exact for exact coefficients.
    """
    cells = [0]
    for level in range(vec.N + 1):
        doubled = [0] * (len(cells) * 2)
        doubled[0::2] = cells
        doubled[1::2] = cells
        cells = doubled
        base = (1 << level) - 1
        for pos in range(1 << level):
            a = vec.coeffs[base + pos]
            if a != 0:
                cells[2 * pos] += a
                cells[2 * pos + 1] -= a
    return StepFunction(mesh=vec.N + 1, values=cells)


def step_to_haar(sf: StepFunction) -> tuple[HaarVector, object]:
    """Haar coefficients of a step function, plus its mean.

    Returns ``(vec, mean)`` where ``vec`` collects the Haar components of
    levels < mesh and ``mean`` is the constant component (the integral).
    The two together reconstruct the input exactly.
    """
    if sf.mesh == 0:
        return HaarVector.zero(0), sf.values[0]
    N = sf.mesh - 1
    # cell integrals, summed pairwise up the tree
    sums_by_level: list[list] = [list(sf.values)]
    while len(sums_by_level[-1]) > 1:
        prev = sums_by_level[-1]
        sums_by_level.append([prev[2 * i] + prev[2 * i + 1] for i in range(len(prev) // 2)])
    sums_by_level.reverse()  # sums_by_level[l] has 2^l entries, sums over level-l cells
    vec = HaarVector.zero(N)
    is_float = isinstance(sf.values[0], float)
    for level in range(N + 1):
        below = sums_by_level[level + 1]
        base = (1 << level) - 1
        # <f, h_I> = (sum over left half - sum over right half) * 2^-mesh,
        # and a_I = <f, h_I> / |I| with |I| = 2^-level.
        denom = 1 << (sf.mesh - level)
        for pos in range(1 << level):
            diff = below[2 * pos] - below[2 * pos + 1]
            if is_float:
                vec.coeffs[base + pos] = diff / denom
            else:
                a = Fraction(diff, denom) if not isinstance(diff, Fraction) else diff / denom
                vec.coeffs[base + pos] = a
    mean = sf.integral()
    return vec, mean


def pairing(f: HaarVector, g: HaarVector, *, validate: bool = False):
    """Inner product <f, g> = integral of f * g over [0, 1).

    Computed from the coefficient formula sum_I a_I b_I |I|.  With
    ``validate=True`` the step-function route is evaluated as well and the
    two results are required to agree (exactly for exact inputs, to 1e-12
    in relative terms otherwise).
    """
    N = max(f.N, g.N)
    a, b = f.promoted(N), g.promoted(N)
    total = 0
    for level in range(N + 1):
        base = (1 << level) - 1
        weight = Fraction(1, 1 << level)
        for pos in range(1 << level):
            x, y = a.coeffs[base + pos], b.coeffs[base + pos]
            if x != 0 and y != 0:
                total += x * y * weight
    if isinstance(total, Fraction) and total.denominator == 1:
        total = total.numerator
    if validate:
        other = pairing_step(f, g)
        if isinstance(total, float) or isinstance(other, float):
            scale = max(abs(float(total)), abs(float(other)), 1.0)
            if abs(float(total) - float(other)) > 1e-12 * scale:
                raise ArithmeticError(
                    f"pairing cross-validation failed: {total} vs {other}"
                )
        elif total != other:
            raise ArithmeticError(
                f"pairing cross-validation failed: {total} vs {other}"
            )
    return total


def pairing_step(f: HaarVector, g: HaarVector):
    """The same inner product evaluated through the step representations."""
    N = max(f.N, g.N)
    fs = haar_to_step(f.promoted(N))
    gs = haar_to_step(g.promoted(N))
    total = sum(x * y for x, y in zip(fs.values, gs.values))
    if isinstance(total, float):
        return total / (1 << fs.mesh)
    return Fraction(total, 1 << fs.mesh)


def square_function_squared(vec: HaarVector) -> StepFunction:
    """The cells of (Sf)^2 = sum_I a_I^2 1_I, exact for exact coefficients."""
    cells = [0]
    for level in range(vec.N + 1):
        doubled = [0] * (len(cells) * 2)
        doubled[0::2] = cells
        doubled[1::2] = cells
        cells = doubled
        base = (1 << level) - 1
        for pos in range(1 << level):
            a = vec.coeffs[base + pos]
            if a != 0:
                sq = a * a
                cells[2 * pos] += sq
                cells[2 * pos + 1] += sq
    return StepFunction(mesh=vec.N + 1, values=cells)


def exact_sqrt(value: Fraction) -> Fraction | None:
    """The exact rational square root, or None when it is irrational."""
    if value < 0:
        raise ValueError("square root of a negative value")
    num, den = value.numerator, value.denominator
    rn, rd = math.isqrt(num), math.isqrt(den)
    if rn * rn == num and rd * rd == den:
        return Fraction(rn, rd)
    return None


def square_function(vec: HaarVector) -> StepFunction:
    """The square function S f as a step function (cells >= 0).

    Cells whose squared value has an exact rational square root stay exact;
    the rest are evaluated in floating point.
    """
    squared = square_function_squared(vec)
    out = []
    for q in squared.values:
        if isinstance(q, float):
            out.append(math.sqrt(q))
            continue
        root = exact_sqrt(Fraction(q))
        out.append(root if root is not None else math.sqrt(q))
    return StepFunction(mesh=squared.mesh, values=out)


# ---------------------------------------------------------------------------
# vectorized float fast paths (used by the norm solvers)

def step_cells_np(coeffs: np.ndarray, N: int) -> np.ndarray:
    """Float cells of the Haar expansion at mesh 2^-(N+1)."""
    cells = np.zeros(1)
    for level in range(N + 1):
        cells = np.repeat(cells, 2)
        seg = coeffs[(1 << level) - 1 : (1 << (level + 1)) - 1]
        cells[0::2] += seg
        cells[1::2] -= seg
    return cells


def square_cells_np(coeffs: np.ndarray, N: int) -> np.ndarray:
    """Float cells of (Sf)^2 at mesh 2^-(N+1)."""
    cells = np.zeros(1)
    for level in range(N + 1):
        cells = np.repeat(cells, 2)
        seg = coeffs[(1 << level) - 1 : (1 << (level + 1)) - 1]
        sq = seg * seg
        cells[0::2] += sq
        cells[1::2] += sq
    return cells


def interval_sums_np(cells: np.ndarray, N: int) -> np.ndarray:
    """Sums of a mesh-(N+1) cell array over every interval of level <= N."""
    d = dimension(N)
    out = np.empty(d)
    current = cells
    for level in range(N, -1, -1):
        current = current[0::2] + current[1::2]
        out[(1 << level) - 1 : (1 << (level + 1)) - 1] = current
    return out
