"""Block collections over the dyadic tree and their compatibility checks.

A block collection assigns to every interval I of level <= n a finite family
of pairwise-disjoint intervals of level <= N inside the host span.  The
compatibility conditions (Jones conditions) are checked exactly: supports are
manipulated as bitmasks over the canonical mesh of 2^(N+1) cells, and all
measure comparisons run in rational arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .dyadic import (
    DyadicInterval,
    HaarVector,
    dimension,
    enumerate_intervals,
    interval_at,
    interval_index,
)


class CollectionFormatError(ValueError):
    """Raised when a collection or sign file cannot be parsed."""


@dataclass
class BlockCollection:
    """Members for every target interval of level <= n, inside level <= N."""

    n: int
    N: int
    members: dict[DyadicInterval, tuple[DyadicInterval, ...]]

    def __post_init__(self) -> None:
        if self.n < 0 or self.N < self.n:
            raise ValueError(f"need 0 <= n <= N, got n={self.n}, N={self.N}")
        targets = set(self.members)
        expected = set(enumerate_intervals(self.n))
        if targets != expected:
            missing = sorted(iv.label for iv in expected - targets)
            extra = sorted(iv.label for iv in targets - expected)
            raise ValueError(
                f"collection must cover exactly the targets of level <= {self.n};"
                f" missing={missing}, extra={extra}"
            )
        for target, fam in self.members.items():
            for member in fam:
                if member.level > self.N:
                    raise ValueError(
                        f"member {member.label} of target {target.label} "
                        f"exceeds host level {self.N}"
                    )

    @property
    def targets(self) -> list[DyadicInterval]:
        return list(enumerate_intervals(self.n))

    @property
    def mesh(self) -> int:
        return self.N + 1

    def family(self, target: DyadicInterval) -> tuple[DyadicInterval, ...]:
        return self.members[target]

    def support_mask(self, target: DyadicInterval) -> int:
        """Bitmask of the mesh cells covered by the members of one target."""
        mask = 0
        for member in self.members[target]:
            mask |= member.cell_mask(self.mesh)
        return mask

    def union_measure(self, target: DyadicInterval) -> Fraction:
        mask = self.support_mask(target)
        return Fraction(mask.bit_count(), 1 << self.mesh)

    def member_indices(self, target: DyadicInterval) -> np.ndarray:
        """Enumeration-order positions of the members of one target."""
        return np.array(
            [interval_index(m) for m in self.members[target]], dtype=np.intp
        )

    def max_member_level(self) -> int:
        return max(
            (m.level for fam in self.members.values() for m in fam), default=0
        )


def alpha(collection: BlockCollection) -> Fraction:
    """The largest member measure; every family must be nonempty."""
    worst = Fraction(0)
    for target, fam in collection.members.items():
        if not fam:
            raise ValueError(f"target {target.label} has no members")
        worst = max(worst, max(m.measure for m in fam))
    return worst


def gamlen_gaudet(n: int, m0: int, N: int | None = None) -> BlockCollection:
    """The minimal nested block collection starting from all of level m0.

    The root target takes every interval of level m0; the two children of a
    target take the left and right halves of its members respectively.  The
    members of a target at level l all have measure 2^-(m0 + l) and their
    union has exactly the measure of the target.
    """
    if n < 0 or m0 < 0:
        raise ValueError("n and m0 must be nonnegative")
    if N is None:
        N = n + m0
    if N < n + m0:
        raise ValueError(
            f"host level N={N} cannot hold members of level {n + m0} "
            f"(need N >= n + m0)"
        )
    members: dict[DyadicInterval, tuple[DyadicInterval, ...]] = {}
    root = DyadicInterval(0, 0)
    members[root] = tuple(DyadicInterval(m0, k) for k in range(1 << m0))
    for level in range(n):
        for pos in range(1 << level):
            target = DyadicInterval(level, pos)
            left, right = target.children()
            fam = members[target]
            members[left] = tuple(m.children()[0] for m in fam)
            members[right] = tuple(m.children()[1] for m in fam)
    return BlockCollection(n=n, N=N, members=members)


@dataclass
class JonesReport:
    """Exact verdict on the four compatibility conditions at a given kappa."""

    kappa: Fraction
    disjointness_violations: list = field(default_factory=list)
    nesting_violations: list = field(default_factory=list)
    measure_violations: list = field(default_factory=list)
    density_violations: list = field(default_factory=list)
    density_all_equal: bool = True
    checked_triples: int = 0

    @property
    def passes(self) -> bool:
        return not (
            self.disjointness_violations
            or self.nesting_violations
            or self.measure_violations
            or self.density_violations
        )

    def summary(self) -> dict:
        return {
            "kappa": str(self.kappa),
            "passes": self.passes,
            "disjointness_violations": len(self.disjointness_violations),
            "nesting_violations": len(self.nesting_violations),
            "measure_violations": len(self.measure_violations),
            "density_violations": len(self.density_violations),
            "density_all_equal": self.density_all_equal,
            "checked_triples": self.checked_triples,
        }


def jones_check(collection: BlockCollection, kappa=1) -> JonesReport:
    """Exact check of the four compatibility conditions.

    (1) members of one target are pairwise disjoint and no interval serves
        two targets; (2) the supports of the two child targets are disjoint
        subsets of the parent support; (3) each support measure is within a
        factor kappa of the target measure; (4) for nested targets, every
        member of the outer one meets the inner support with at least the
        average density 1/kappa * |inner support| / |outer support|.
    """
    kappa = Fraction(kappa)
    if kappa < 1:
        raise ValueError(f"kappa must be at least 1, got {kappa}")
    report = JonesReport(kappa=kappa)
    mesh = collection.mesh
    cells = 1 << mesh

    owner: dict[DyadicInterval, DyadicInterval] = {}
    masks: dict[DyadicInterval, int] = {}
    for target in collection.targets:
        fam = collection.members[target]
        mask = 0
        for member in fam:
            if member in owner:
                report.disjointness_violations.append(
                    {
                        "member": member.label,
                        "targets": [owner[member].label, target.label],
                        "reason": "member shared between targets",
                    }
                )
            else:
                owner[member] = target
            mmask = member.cell_mask(mesh)
            if mask & mmask:
                report.disjointness_violations.append(
                    {
                        "member": member.label,
                        "targets": [target.label],
                        "reason": "overlapping members inside one target",
                    }
                )
            mask |= mmask
        masks[target] = mask

    for target in collection.targets:
        if target.level >= collection.n:
            continue
        left, right = target.children()
        lm, rm = masks[left], masks[right]
        if lm & rm:
            report.nesting_violations.append(
                {"target": target.label, "reason": "child supports overlap"}
            )
        if (lm | rm) & ~masks[target]:
            report.nesting_violations.append(
                {"target": target.label, "reason": "child supports escape the parent"}
            )

    for target in collection.targets:
        support = Fraction(masks[target].bit_count(), cells)
        lower = target.measure / kappa
        upper = target.measure * kappa
        if not lower <= support <= upper:
            report.measure_violations.append(
                {
                    "target": target.label,
                    "support": str(support),
                    "bounds": [str(lower), str(upper)],
                }
            )

    for outer in collection.targets:
        outer_mask = masks[outer]
        outer_measure = Fraction(outer_mask.bit_count(), cells)
        if outer_measure == 0:
            continue
        inners = [t for t in collection.targets if outer.contains(t)]
        for inner in inners:
            inner_measure = Fraction(masks[inner].bit_count(), cells)
            required = inner_measure / (kappa * outer_measure)
            for member in collection.members[outer]:
                report.checked_triples += 1
                overlap = (member.cell_mask(mesh) & masks[inner]).bit_count()
                density = Fraction(overlap, member.cell_mask(mesh).bit_count())
                if density < required:
                    report.density_violations.append(
                        {
                            "outer": outer.label,
                            "inner": inner.label,
                            "member": member.label,
                            "density": str(density),
                            "required": str(required),
                        }
                    )
                if density != required:
                    report.density_all_equal = False
    return report


@dataclass
class SignAssignment:
    """One sign per interval of level <= N, with its creation seed."""

    N: int
    values: np.ndarray
    seed: int | None = None

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.int8)
        if self.values.shape != (dimension(self.N),):
            raise ValueError(
                f"expected {dimension(self.N)} signs for N={self.N}, "
                f"got shape {self.values.shape}"
            )
        if not np.all(np.abs(self.values) == 1):
            raise ValueError("signs must be +1 or -1")

    @classmethod
    def constant(cls, N: int, sign: int = 1) -> "SignAssignment":
        return cls(N, np.full(dimension(N), sign, dtype=np.int8))

    @classmethod
    def random(cls, N: int, seed: int) -> "SignAssignment":
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
        values = rng.integers(0, 2, size=dimension(N)).astype(np.int8) * 2 - 1
        return cls(N, values, seed=seed)

    def sign(self, interval: DyadicInterval) -> int:
        return int(self.values[interval_index(interval)])

    def flipped(self, interval: DyadicInterval) -> "SignAssignment":
        values = self.values.copy()
        values[interval_index(interval)] *= -1
        return SignAssignment(self.N, values, seed=None)


def synthesize(
    collection: BlockCollection, signs: SignAssignment, *, validate: bool = True
) -> dict[DyadicInterval, HaarVector]:
    """The signed block vectors b_I = sum over members of theta_K h_K.

    With ``validate`` the disjointness condition is re-checked first, since
    the closed-form norms of the blocks silently assume it.
    """
    if signs.N != collection.N:
        raise ValueError(
            f"sign assignment at N={signs.N} does not match collection N={collection.N}"
        )
    if validate:
        _validate_disjointness(collection)
    blocks = {}
    for target in collection.targets:
        vec = HaarVector.zero(collection.N)
        for member in collection.members[target]:
            vec.coeffs[interval_index(member)] = signs.sign(member)
        blocks[target] = vec
    return blocks


def _validate_disjointness(collection: BlockCollection) -> None:
    seen: set[DyadicInterval] = set()
    for target in collection.targets:
        mask = 0
        for member in collection.members[target]:
            if member in seen:
                raise ValueError(
                    f"member {member.label} appears in more than one family"
                )
            seen.add(member)
            mmask = member.cell_mask(collection.mesh)
            if mask & mmask:
                raise ValueError(
                    f"members of target {target.label} overlap at {member.label}"
                )
            mask |= mmask


# ---------------------------------------------------------------------------
# serialization

def collection_lines(collection: BlockCollection) -> list[str]:
    lines = [f"n {collection.n}", f"N {collection.N}"]
    for target in collection.targets:
        for member in collection.members[target]:
            lines.append(f"target={target.label} member={member.label}")
    return lines


def save_collection(collection: BlockCollection, path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(collection_lines(collection)) + "\n")


def load_collection(path: str) -> BlockCollection:
    with open(path, "r", encoding="ascii") as fh:
        lines = fh.read().splitlines()
    header: dict[str, int] = {}
    pairs: list[tuple[DyadicInterval, DyadicInterval]] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) == 2 and tokens[0] in ("n", "N"):
            try:
                header[tokens[0]] = int(tokens[1])
            except ValueError as exc:
                raise CollectionFormatError(f"line {lineno}: {exc}") from exc
            continue
        fields = {}
        for token in tokens:
            key, _, val = token.partition("=")
            fields[key] = val
        try:
            pairs.append(
                (DyadicInterval.parse(fields["target"]), DyadicInterval.parse(fields["member"]))
            )
        except (KeyError, ValueError) as exc:
            raise CollectionFormatError(f"line {lineno}: {exc}") from exc
    if "n" not in header or "N" not in header:
        raise CollectionFormatError("missing 'n' or 'N' header line")
    members: dict[DyadicInterval, list[DyadicInterval]] = {}
    for target, member in pairs:
        members.setdefault(target, []).append(member)
    for target in enumerate_intervals(header["n"]):
        members.setdefault(target, [])
    return BlockCollection(
        n=header["n"],
        N=header["N"],
        members={t: tuple(f) for t, f in members.items()},
    )


def save_signs(signs: SignAssignment, path: str) -> None:
    lines = []
    for idx, value in enumerate(signs.values.tolist()):
        lines.append(f"{interval_at(idx).label} {'+1' if value > 0 else '-1'}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_signs(path: str, N: int) -> SignAssignment:
    values = np.ones(dimension(N), dtype=np.int8)
    seen = np.zeros(dimension(N), dtype=bool)
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                label, sign_text = line.split()
                interval = DyadicInterval.parse(label)
                sign = int(sign_text)
            except ValueError as exc:
                raise CollectionFormatError(f"line {lineno}: {exc}") from exc
            if sign not in (-1, 1):
                raise CollectionFormatError(f"line {lineno}: sign must be +1 or -1")
            if interval.level > N:
                raise CollectionFormatError(
                    f"line {lineno}: {label} exceeds level {N}"
                )
            values[interval_index(interval)] = sign
            seen[interval_index(interval)] = True
    if not seen.all():
        raise CollectionFormatError("sign file does not cover every interval")
    return SignAssignment(N, values)
