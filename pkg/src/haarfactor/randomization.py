"""Random signs on block collections: forms, moments, tail bounds, search.

For a collection with disjoint families, the off-diagonal quantity of
interest is the form value <T b_I, b_J> between two signed blocks, and the
diagonal one is the deviation of <T b_I, b_I> from the sum of the diagonal
form values over the members.  Both are polynomials in the signs, so their
moments over uniform signs can be computed three independent ways: blind
enumeration of every sign pattern (exact, rational), closed-form index sums
(exact, rational), and Monte Carlo (seeded).  The first two must agree to the
last digit; the third is for scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .blocks import BlockCollection, SignAssignment
from .dyadic import DyadicInterval
from .norms import SpaceTag
from .operators import HaarOperator, op_norm_exact_h2

ENUMERATION_CAP = 20


class EnumerationCapError(ValueError):
    """Raised when exact enumeration would exceed the coordinate cap."""


def _member_submatrix(
    T: HaarOperator,
    collection: BlockCollection,
    col_target: DyadicInterval,
    row_target: DyadicInterval,
) -> np.ndarray:
    """gram entries with columns over one family and rows over another."""
    gram = np.asarray(T.gram, dtype=float)
    cols = collection.member_indices(col_target)
    rows = collection.member_indices(row_target)
    return gram[np.ix_(rows, cols)]


def cross_form(
    T: HaarOperator,
    collection: BlockCollection,
    signs: SignAssignment,
    source: DyadicInterval,
    destination: DyadicInterval,
) -> float:
    """<T b_source, b_destination> for the given signs."""
    sub = _member_submatrix(T, collection, source, destination)
    theta = signs.values[collection.member_indices(source)].astype(float)
    phi = signs.values[collection.member_indices(destination)].astype(float)
    return float(phi @ sub @ theta)


def diagonal_deviation(
    T: HaarOperator,
    collection: BlockCollection,
    signs: SignAssignment,
    target: DyadicInterval,
) -> float:
    """<T b_I, b_I> minus the sign-free diagonal sum over the members of I."""
    sub = _member_submatrix(T, collection, target, target)
    theta = signs.values[collection.member_indices(target)].astype(float)
    return float(theta @ sub @ theta) - float(np.trace(sub))


@dataclass
class MomentReport:
    """Mean and second moment of one randomized form value."""

    target: str
    kind: str  # "cross" or "deviation"
    method: str  # "exact-enumeration", "closed-form", "monte-carlo"
    mean: Fraction | float
    second_moment: Fraction | float
    count: int
    seed: int | None = None
    bound: float | None = None

    def to_json(self) -> dict:
        def encode(v):
            if isinstance(v, Fraction):
                return {"exact": f"{v.numerator}/{v.denominator}", "float": float(v)}
            return {"exact": None, "float": float(v)}

        return {
            "pair": self.target,
            "kind": self.kind,
            "method": self.method,
            "mean": encode(self.mean),
            "second_moment": encode(self.second_moment),
            "bound": self.bound,
            "samples": self.count,
            "seed": self.seed,
        }


def _exact_entries(values: np.ndarray) -> tuple[list[list[int]], int]:
    """Scale a float/Fraction matrix to integers over a common denominator."""
    fracs = [[Fraction(v) for v in row] for row in values.tolist()]
    denom = 1
    for row in fracs:
        for v in row:
            denom = math.lcm(denom, v.denominator)
    ints = [[int(v * denom) for v in row] for row in fracs]
    return ints, denom


def _normalize_target(target) -> tuple[str, DyadicInterval | None, DyadicInterval]:
    if isinstance(target, DyadicInterval):
        return "deviation", None, target
    source, destination = target
    if source == destination:
        raise ValueError("cross form needs two distinct targets")
    return "cross", source, destination


def exact_moments(
    T: HaarOperator,
    collection: BlockCollection,
    target,
    *,
    cap: int = ENUMERATION_CAP,
) -> MomentReport:
    """Blind enumeration of every sign pattern touching the target.

    ``target`` is either a pair ``(I, J)`` of distinct intervals (cross form)
    or a single interval (diagonal deviation).  All arithmetic is rational:
    float form entries are converted losslessly, every one of the 2^m sign
    patterns is visited (Gray order, constant work per step), and the
    returned mean and second moment are exact.
    """
    kind, source, destination = _normalize_target(target)
    if kind == "cross":
        a = len(collection.members[source])
        b = len(collection.members[destination])
        m = a + b
        if m > cap:
            raise EnumerationCapError(
                f"{m} sign coordinates exceed the enumeration cap {cap}; "
                "use mc_moments instead"
            )
        sub = _member_submatrix(T, collection, source, destination)
        ints, denom = _exact_entries(sub)  # ints[j][i], rows over destination
        total, total_sq = _enumerate_cross(ints, a, b)
        count = 1 << m
        label = f"{source.label}->{destination.label}"
    else:
        members = collection.members[destination]
        m = len(members)
        if m > cap:
            raise EnumerationCapError(
                f"{m} sign coordinates exceed the enumeration cap {cap}; "
                "use mc_moments instead"
            )
        sub = _member_submatrix(T, collection, destination, destination)
        ints, denom = _exact_entries(sub)
        total, total_sq = _enumerate_deviation(ints, m)
        count = 1 << m
        label = destination.label
    mean = Fraction(total, count) / denom
    second = Fraction(total_sq, count) / (denom * denom)
    return MomentReport(
        target=label,
        kind=kind,
        method="exact-enumeration",
        mean=mean,
        second_moment=second,
        count=count,
    )


def _gray_bit(t: int) -> int:
    return (t & -t).bit_length() - 1


def _enumerate_cross(ints: list[list[int]], a: int, b: int) -> tuple[int, int]:
    """Sum and squared sum of sum_ij theta_i phi_j M[j][i] over all patterns."""
    # col_dot[i] = sum_j phi_j M[j][i]; row_dot[j] = sum_i theta_i M[j][i]
    theta = [1] * a
    phi = [1] * b
    col_dot = [sum(ints[j][i] for j in range(b)) for i in range(a)]
    row_dot = [sum(ints[j]) for j in range(b)]
    value = sum(col_dot)
    total, total_sq = value, value * value
    for t in range(1, 1 << (a + b)):
        bit = _gray_bit(t)
        if bit < a:
            s = theta[bit]
            value -= 2 * s * col_dot[bit]
            theta[bit] = -s
            d = -2 * s
            for j in range(b):
                row_dot[j] += d * ints[j][bit]
        else:
            j = bit - a
            s = phi[j]
            value -= 2 * s * row_dot[j]
            phi[j] = -s
            d = -2 * s
            row = ints[j]
            for i in range(a):
                col_dot[i] += d * row[i]
        total += value
        total_sq += value * value
    return total, total_sq


def _enumerate_deviation(ints: list[list[int]], m: int) -> tuple[int, int]:
    """Sum and squared sum of sum_{i != j} theta_i theta_j A[j][i]."""
    # symmetrized rows: B[i][j] = A[i][j] + A[j][i], diagonal excluded
    sym = [
        [ints[i][j] + ints[j][i] if i != j else 0 for j in range(m)]
        for i in range(m)
    ]
    theta = [1] * m
    # v[i] = sum_{j != i} theta_j * B[i][j]
    v = [sum(row) for row in sym]
    value = sum(sum(ints[i][j] for j in range(m) if j != i) for i in range(m))
    total, total_sq = value, value * value
    for t in range(1, 1 << m):
        bit = _gray_bit(t)
        s = theta[bit]
        value -= 2 * s * v[bit]
        theta[bit] = -s
        d = -2 * s
        row = sym[bit]
        for j in range(m):
            v[j] += d * row[j]
        total += value
        total_sq += value * value
    return total, total_sq


def cross_second_moment(
    T: HaarOperator,
    collection: BlockCollection,
    source: DyadicInterval,
    destination: DyadicInterval,
) -> Fraction:
    """Closed form: the sum of squared form entries between the two families."""
    sub = _member_submatrix(T, collection, source, destination)
    return sum(
        (Fraction(v) ** 2 for v in sub.flatten().tolist()), Fraction(0)
    )


def deviation_second_moment(
    T: HaarOperator, collection: BlockCollection, target: DyadicInterval
) -> Fraction:
    """Closed form: paired off-diagonal products inside one family."""
    sub = _member_submatrix(T, collection, target, target)
    m = sub.shape[0]
    fr = [[Fraction(sub[i, j]) for j in range(m)] for i in range(m)]
    total = Fraction(0)
    for i in range(m):
        for j in range(m):
            if i != j:
                total += fr[i][j] * fr[i][j] + fr[i][j] * fr[j][i]
    return total


def mc_moments(
    T: HaarOperator,
    collection: BlockCollection,
    target,
    *,
    samples: int = 10000,
    seed: int = 0,
) -> MomentReport:
    """Monte Carlo estimate of the same moments, seeded and vectorized."""
    if samples < 1:
        raise ValueError("need at least one sample")
    kind, source, destination = _normalize_target(target)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    if kind == "cross":
        sub = _member_submatrix(T, collection, source, destination)
        b, a = sub.shape
        theta = rng.integers(0, 2, size=(samples, a)) * 2.0 - 1.0
        phi = rng.integers(0, 2, size=(samples, b)) * 2.0 - 1.0
        values = np.einsum("sj,ji,si->s", phi, sub, theta)
        label = f"{source.label}->{destination.label}"
    else:
        sub = _member_submatrix(T, collection, destination, destination)
        m = sub.shape[0]
        theta = rng.integers(0, 2, size=(samples, m)) * 2.0 - 1.0
        values = np.einsum("sj,ji,si->s", theta, sub, theta) - np.trace(sub)
        label = destination.label
    return MomentReport(
        target=label,
        kind=kind,
        method="monte-carlo",
        mean=float(np.mean(values)),
        second_moment=float(np.mean(values**2)),
        count=samples,
        seed=seed,
    )


@dataclass
class VarianceRow:
    report: MomentReport
    bounds: dict
    passes: bool


@dataclass
class VarianceReport:
    norm_bound: float
    alpha: Fraction
    space: SpaceTag
    rows: list
    all_pass: bool


def variance_bound_check(
    T: HaarOperator,
    collection: BlockCollection,
    space: SpaceTag,
    *,
    gamma: float | None = None,
    rtol: float = 1e-12,
) -> VarianceReport:
    """Second-moment bounds for every form value of the collection.

    Cross forms obey  E Y^2 <= ||T||^2 alpha^(1/2)  and deviations obey
    E Z^2 <= 2 ||T||^2 alpha^(1/2), with alpha the largest member measure.
    For slinf the stronger exponents (alpha in place of alpha^(1/2)) are
    checked as well.  ||T|| is exact for hp(2); any other space requires an
    explicit upper bound gamma.
    """
    from .blocks import alpha as alpha_of

    if space.is_hilbert:
        norm_bound = op_norm_exact_h2(T)
    elif gamma is not None:
        norm_bound = float(gamma)
    else:
        raise ValueError(f"an explicit gamma upper bound is required for {space.label}")
    a = alpha_of(collection)
    sqrt_alpha = float(a) ** 0.5
    base = norm_bound * norm_bound
    rows = []
    all_pass = True
    targets = collection.targets
    for destination in targets:
        for source in targets:
            if source == destination:
                continue
            m2 = cross_second_moment(T, collection, source, destination)
            bounds = {"sqrt-alpha": base * sqrt_alpha}
            if space.family == "slinf":
                bounds["alpha"] = base * float(a)
            ok = all(float(m2) <= b * (1.0 + rtol) for b in bounds.values())
            rows.append(
                VarianceRow(
                    report=MomentReport(
                        target=f"{source.label}->{destination.label}",
                        kind="cross",
                        method="closed-form",
                        mean=Fraction(0),
                        second_moment=m2,
                        count=0,
                        bound=min(bounds.values()),
                    ),
                    bounds=bounds,
                    passes=ok,
                )
            )
            all_pass &= ok
    for target in targets:
        m2 = deviation_second_moment(T, collection, target)
        bounds = {"sqrt-alpha": 2.0 * base * sqrt_alpha}
        if space.family == "slinf":
            bounds["alpha"] = 2.0 * base * float(a)
        ok = all(float(m2) <= b * (1.0 + rtol) for b in bounds.values())
        rows.append(
            VarianceRow(
                report=MomentReport(
                    target=target.label,
                    kind="deviation",
                    method="closed-form",
                    mean=Fraction(0),
                    second_moment=m2,
                    count=0,
                    bound=min(bounds.values()),
                ),
                bounds=bounds,
                passes=ok,
            )
        )
        all_pass &= ok
    return VarianceReport(
        norm_bound=norm_bound, alpha=a, space=space, rows=rows, all_pass=bool(all_pass)
    )


def union_bound(n: int, m0: int, gamma: float, eta0: float) -> float:
    """The failure-probability budget 2^(3(n+2)) Gamma^2 / (2^(m0/2) eta0^2)."""
    if eta0 <= 0 or gamma <= 0:
        raise ValueError("gamma and eta0 must be positive")
    return 2.0 ** (3 * (n + 2)) * gamma * gamma / (2.0 ** (m0 / 2.0) * eta0 * eta0)


def union_bound_below_one(n: int, m0: int, gamma, eta0) -> bool:
    """Exact version of union_bound(...) < 1 (squares away the half power)."""
    g = Fraction(gamma)
    e = Fraction(eta0)
    if g <= 0 or e <= 0:
        raise ValueError("gamma and eta0 must be positive")
    lhs = (Fraction(2) ** (3 * (n + 2)) * g * g / (e * e)) ** 2
    return lhs < Fraction(2) ** m0


# ---------------------------------------------------------------------------
# sign search

@dataclass
class SignSearchResult:
    signs: SignAssignment
    success: bool
    attempts: int
    off_diag_max: float
    diag_dev_max: float
    eta0: float
    strategy: str
    seed: int

    def to_json(self) -> dict:
        return {
            "success": self.success,
            "attempts": self.attempts,
            "off_diag_max": self.off_diag_max,
            "diag_dev_max": self.diag_dev_max,
            "eta0": self.eta0,
            "strategy": self.strategy,
            "seed": self.seed,
            "signs": self.signs.values.tolist(),
        }


class _FormEvaluator:
    """Shared machinery: all pairwise block forms for one sign pattern."""

    def __init__(self, T: HaarOperator, collection: BlockCollection) -> None:
        self.gram = np.asarray(T.gram, dtype=float)
        self.targets = collection.targets
        self.t = len(self.targets)
        self.d = self.gram.shape[0]
        idx = [collection.member_indices(target) for target in self.targets]
        self.rows = np.concatenate(idx)
        self.cols = np.concatenate(
            [np.full(len(ix), i, dtype=np.intp) for i, ix in enumerate(idx)]
        )
        self.diag_base = np.array(
            [float(np.sum(np.diagonal(self.gram)[ix])) for ix in idx]
        )
        self.basis = np.zeros((self.d, self.t))

    def stats(self, theta: np.ndarray) -> tuple[float, float]:
        """(max off-diagonal |form|, max diagonal deviation) for one pattern."""
        self.basis[self.rows, self.cols] = theta[self.rows]
        M = self.basis.T @ (self.gram @ self.basis)
        diag = np.diagonal(M).copy()
        off = np.abs(M - np.diag(diag))
        off_max = float(np.max(off)) if self.t > 1 else 0.0
        dev_max = float(np.max(np.abs(diag - self.diag_base)))
        return off_max, dev_max


def search_signs(
    T: HaarOperator,
    collection: BlockCollection,
    eta0: float,
    *,
    budget: int = 1000,
    seed: int = 0,
    strategy: str = "rejection",
) -> SignSearchResult:
    """Find signs that push all block forms below the threshold eta0.

    The default strategy draws independent uniform sign patterns and accepts
    the first one with every off-diagonal form and every diagonal deviation
    at most eta0; the number of draws is capped by the budget.  The greedy
    strategy starts from one draw and walks single-coordinate flips while the
    worst statistic improves.  Both are deterministic given the seed; on
    failure the best pattern seen is returned with success=False.
    """
    if eta0 <= 0:
        raise ValueError(f"eta0 must be positive, got {eta0}")
    if strategy not in ("rejection", "greedy"):
        raise ValueError(f"unknown strategy {strategy!r}")
    evaluator = _FormEvaluator(T, collection)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    d = evaluator.d

    best = None  # (statistic, theta, off, dev, attempts)
    attempts = 0
    if strategy == "rejection":
        while attempts < budget:
            attempts += 1
            theta = (rng.integers(0, 2, size=d) * 2 - 1).astype(np.int8)
            off, dev = evaluator.stats(theta.astype(float))
            stat = max(off, dev)
            if best is None or stat < best[0]:
                best = (stat, theta, off, dev)
            if stat <= eta0:
                return SignSearchResult(
                    signs=SignAssignment(T.N, theta, seed=seed),
                    success=True,
                    attempts=attempts,
                    off_diag_max=off,
                    diag_dev_max=dev,
                    eta0=float(eta0),
                    strategy=strategy,
                    seed=seed,
                )
    else:
        theta = (rng.integers(0, 2, size=d) * 2 - 1).astype(np.int8)
        off, dev = evaluator.stats(theta.astype(float))
        stat = max(off, dev)
        attempts = 1
        best = (stat, theta.copy(), off, dev)
        active = np.unique(evaluator.rows)
        improved = True
        while improved and attempts < budget and stat > eta0:
            improved = False
            for k in active.tolist():
                if attempts >= budget:
                    break
                theta[k] *= -1
                attempts += 1
                off_c, dev_c = evaluator.stats(theta.astype(float))
                stat_c = max(off_c, dev_c)
                if stat_c < stat:
                    stat, off, dev = stat_c, off_c, dev_c
                    improved = True
                else:
                    theta[k] *= -1
            if stat < best[0]:
                best = (stat, theta.copy(), off, dev)
        if stat <= eta0:
            return SignSearchResult(
                signs=SignAssignment(T.N, theta, seed=seed),
                success=True,
                attempts=attempts,
                off_diag_max=off,
                diag_dev_max=dev,
                eta0=float(eta0),
                strategy=strategy,
                seed=seed,
            )

    assert best is not None
    stat, theta, off, dev = best
    return SignSearchResult(
        signs=SignAssignment(T.N, theta, seed=seed),
        success=False,
        attempts=attempts,
        off_diag_max=off,
        diag_dev_max=dev,
        eta0=float(eta0),
        strategy=strategy,
        seed=seed,
    )


def calibrate_eta0(
    T: HaarOperator,
    collection: BlockCollection,
    *,
    quantile: float = 0.9,
    samples: int = 200,
    seed: int = 0,
) -> float:
    """Empirical quantile of the worst form statistic over uniform signs.

    Picking eta0 at quantile q makes each rejection-sampling attempt succeed
    with probability about q.
    """
    if not 0 < quantile < 1:
        raise ValueError(f"quantile must be in (0, 1), got {quantile}")
    evaluator = _FormEvaluator(T, collection)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    maxima = np.empty(samples)
    for i in range(samples):
        theta = (rng.integers(0, 2, size=evaluator.d) * 2 - 1).astype(float)
        off, dev = evaluator.stats(theta)
        maxima[i] = max(off, dev)
    return float(np.quantile(maxima, quantile, method="linear"))
