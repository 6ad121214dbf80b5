"""Norms on finite Haar spans: square-function p-norms, their duals, SL-infinity.

The primal norms are evaluated exactly on the canonical step grid; the only
irrational step is the final root, and :func:`hp_power_exact` exposes the
rational power sum for exact comparisons.  The dual norm has no closed form
and is estimated from below by a seeded multi-start projected ascent over the
primal unit ball; the returned value is always attained by an explicit
witness, hence a certified lower bound.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .dyadic import (
    HaarVector,
    exact_sqrt,
    interval_sums_np,
    measure_vector,
    square_cells_np,
    square_function_squared,
)


class InexactNormError(ArithmeticError):
    """Raised when an exact norm value would be irrational."""


@dataclass(frozen=True)
class SpaceTag:
    """Which norm a computation runs in: hp(p), its dual, or slinf."""

    family: str
    p: float | None = None

    _FAMILIES = ("hp", "hp-dual", "slinf")

    def __post_init__(self) -> None:
        if self.family not in self._FAMILIES:
            raise ValueError(f"unknown space family {self.family!r}")
        if self.family == "slinf":
            if self.p is not None:
                raise ValueError("slinf carries no exponent")
        else:
            if self.p is None or not 1 <= self.p < float("inf"):
                raise ValueError(f"exponent must satisfy 1 <= p < inf, got {self.p}")

    @classmethod
    def hp(cls, p: float) -> "SpaceTag":
        return cls("hp", float(p))

    @classmethod
    def hp_dual(cls, p: float) -> "SpaceTag":
        return cls("hp-dual", float(p))

    @classmethod
    def slinf(cls) -> "SpaceTag":
        return cls("slinf")

    @property
    def label(self) -> str:
        if self.family == "slinf":
            return "slinf"
        return f"{self.family}({self.p:g})"

    @property
    def block_exponent(self) -> float:
        """Exponent e with ||block||  =  |union of members| ** e."""
        if self.family == "hp":
            return 1.0 / self.p
        if self.family == "hp-dual":
            return 1.0 - 1.0 / self.p  # p = 1 pairs with exponent 0
        return 0.0

    @property
    def is_hilbert(self) -> bool:
        return self.family in ("hp", "hp-dual") and self.p == 2.0


def norm_hp(vec: HaarVector, p: float) -> float:
    """The square-function p-norm (integral of (Sf)^p) ** (1/p)."""
    if not 1 <= p < float("inf"):
        raise ValueError(f"exponent must satisfy 1 <= p < inf, got {p}")
    squared = square_function_squared(vec)
    total = sum(float(q) ** (p / 2.0) for q in squared.values if q != 0)
    return (total / (1 << squared.mesh)) ** (1.0 / p)


def hp_power_exact(vec: HaarVector, p: int) -> Fraction:
    """Exact integral of (Sf)^p for integer p and exact coefficients.

    Raises InexactNormError when an odd power would need an irrational
    square root on some cell.
    """
    if p < 1 or p != int(p):
        raise ValueError(f"exact power requires an integer p >= 1, got {p}")
    squared = square_function_squared(vec)
    total = Fraction(0)
    for q in squared.values:
        if isinstance(q, float):
            raise InexactNormError("coefficients are not exact")
        q = Fraction(q)
        if q == 0:
            continue
        term = q ** (p // 2)
        if p % 2:
            root = exact_sqrt(q)
            if root is None:
                raise InexactNormError(f"cell value {q} has no rational square root")
            term *= root
        total += term
    return total / (1 << squared.mesh)


def norm_slinf(vec: HaarVector) -> float:
    """The SL-infinity norm: the sup of the square function."""
    squared = square_function_squared(vec)
    return float(max(float(q) for q in squared.values)) ** 0.5


def slinf_squared_exact(vec: HaarVector) -> Fraction:
    """Exact sup of (Sf)^2 for exact coefficients."""
    squared = square_function_squared(vec)
    worst = Fraction(0)
    for q in squared.values:
        if isinstance(q, float):
            raise InexactNormError("coefficients are not exact")
        q = Fraction(q)
        if q > worst:
            worst = q
    return worst


# ---------------------------------------------------------------------------
# float evaluation helpers shared with the operator-norm solver

def hp_value_np(x: np.ndarray, N: int, p: float) -> float:
    q = square_cells_np(x, N)
    total = float(np.sum(q ** (p / 2.0)))
    return (total * 2.0 ** -(N + 1)) ** (1.0 / p)


def hp_value_grad_np(x: np.ndarray, N: int, p: float) -> tuple[float, np.ndarray]:
    """Norm value and its gradient with respect to the coefficients."""
    q = square_cells_np(x, N)
    scale = 2.0 ** -(N + 1)
    total = float(np.sum(q ** (p / 2.0)))
    value = (total * scale) ** (1.0 / p)
    if value == 0.0:
        return 0.0, np.zeros_like(x)
    with np.errstate(divide="ignore"):
        w = np.where(q > 0.0, q ** ((p - 2.0) / 2.0), 0.0)
    sums = interval_sums_np(w, N)
    grad = value ** (1.0 - p) * scale * x * sums
    return value, grad


def slinf_value_grad_np(x: np.ndarray, N: int) -> tuple[float, np.ndarray]:
    """SL-infinity value and a subgradient (peak cell rule)."""
    q = square_cells_np(x, N)
    cell = int(np.argmax(q))
    value = float(q[cell]) ** 0.5
    grad = np.zeros_like(x)
    if value == 0.0:
        return 0.0, grad
    mesh = N + 1
    for level in range(N + 1):
        pos = cell >> (mesh - level)
        idx = (1 << level) - 1 + pos
        grad[idx] = x[idx] / value
    return value, grad


def space_value_grad_np(x: np.ndarray, N: int, space: SpaceTag):
    if space.family == "hp":
        return hp_value_grad_np(x, N, space.p)
    if space.family == "slinf":
        return slinf_value_grad_np(x, N)
    raise ValueError("dual norms have no direct gradient evaluation")


@dataclass
class DualNormEstimate:
    """Certified lower bound for a dual norm, with the attaining witness."""

    value: float
    witness: HaarVector
    p: float
    iterations: int
    converged: bool
    rel_tol: float

    def __repr__(self) -> str:
        flag = "converged" if self.converged else "low-confidence"
        return f"DualNormEstimate(value={self.value:.6g}, p={self.p:g}, {flag})"


def dual_norm_hp(
    vec: HaarVector,
    p: float,
    *,
    starts: int = 16,
    max_iter: int = 400,
    rel_tol: float = 1e-9,
    seed: int = 0,
) -> DualNormEstimate:
    """sup { <f, g> : ||g||_hp <= 1 } estimated by multi-start projected ascent.

    The first start is f itself (exactly optimal whenever the square function
    of f is flat on its support); the rest are seeded Gaussian draws.  Every
    candidate is radially projected onto the unit sphere of the primal norm,
    so the reported value is attained and therefore a true lower bound.
    """
    if not 1 <= p < float("inf"):
        raise ValueError(f"exponent must satisfy 1 <= p < inf, got {p}")
    N = vec.N
    weights = measure_vector(N)
    target = vec.as_array() * weights  # gradient of g -> <f, g>
    if not np.any(target):
        return DualNormEstimate(0.0, HaarVector.zero(N), p, 0, True, rel_tol)

    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    start_vectors = [vec.as_array()]
    for _ in range(max(0, starts - 1)):
        start_vectors.append(rng.standard_normal(len(target)))

    best_val = -np.inf
    best_x: np.ndarray | None = None
    best_converged = False
    total_iters = 0
    for x0 in start_vectors:
        nrm = hp_value_np(x0, N, p)
        if nrm == 0.0:
            continue
        x = x0 / nrm
        val = float(target @ x)
        if val < 0:
            x, val = -x, -val
        step = 1.0
        converged = False
        for _ in range(max_iter):
            total_iters += 1
            _, grad_norm = hp_value_grad_np(x, N, p)
            ascent = target - val * grad_norm
            gnorm = float(np.linalg.norm(ascent))
            if gnorm <= rel_tol * max(1.0, abs(val)):
                converged = True
                break
            improved = False
            while step > 1e-14:
                cand = x + step * ascent
                cnorm = hp_value_np(cand, N, p)
                if cnorm > 0.0:
                    cand = cand / cnorm
                    cval = float(target @ cand)
                    if cval > val + 1e-14 * max(abs(val), 1.0):
                        x, val = cand, cval
                        improved = True
                        break
                step *= 0.5
            if not improved:
                converged = True
                break
            step = min(step * 2.0, 1.0)
        if val > best_val:
            best_val, best_x, best_converged = val, x, converged

    assert best_x is not None
    # renormalize defensively so the witness sits inside the unit ball
    nrm = hp_value_np(best_x, N, p)
    best_x = best_x / (nrm * (1.0 + 1e-12))
    witness = HaarVector(N, list(best_x))
    value = float(target @ best_x)
    return DualNormEstimate(value, witness, p, total_iters, best_converged, rel_tol)


def norm(vec: HaarVector, space: SpaceTag, **solver_kwargs) -> float:
    """Dispatch to the norm named by the tag (dual norms use the solver)."""
    if space.family == "hp":
        return norm_hp(vec, space.p)
    if space.family == "slinf":
        return norm_slinf(vec)
    return dual_norm_hp(vec, space.p, **solver_kwargs).value


def block_union_measure(members) -> Fraction:
    """Exact measure of the union of pairwise-disjoint intervals."""
    members = list(members)
    if not members:
        raise ValueError("empty member list")
    ordered = sorted(members, key=lambda iv: (iv.inf, iv.level))
    for left, right in zip(ordered, ordered[1:]):
        if not left.disjoint_from(right):
            raise ValueError(
                f"members {left.label} and {right.label} are not disjoint"
            )
    return sum((iv.measure for iv in members), Fraction(0))


def block_norm_closed_form(members, space: SpaceTag) -> float:
    """Norm of sum_K theta_K h_K over disjoint K, for any sign choice.

    The square function of such a sum is the indicator of the union of the
    members, so the norm is |union| ** e with the exponent set by the space
    (1/p, 1 - 1/p, or 0).  The union measure itself is exact.
    """
    measure = block_union_measure(members)
    return float(measure) ** space.block_exponent
