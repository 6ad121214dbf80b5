"""Linear operators on a finite Haar span, stored through their bilinear form.

The defining data of an operator T is the matrix of values
``gram[r, c] = <T h_c, h_r>`` over all intervals of level <= N in enumeration
order: columns index the input function, rows the output pairing.  The action
on coefficients is recovered by dividing row r by |I_r|.

The Hilbert-space operator norm (hp with p = 2) is exact up to the spectral
solver; every other norm is covered by a certified lower bound from projected
ascent plus a crude but sound upper bound from entrywise sums.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .dyadic import (
    DyadicInterval,
    HaarVector,
    dimension,
    interval_at,
    interval_index,
    measure_vector,
)
from .norms import SpaceTag, hp_value_np, space_value_grad_np


class OperatorFormatError(ValueError):
    """Raised when an operator file cannot be parsed."""


@dataclass
class HaarOperator:
    """Operator on the span of Haar functions of level <= N."""

    N: int
    gram: np.ndarray

    def __post_init__(self) -> None:
        d = dimension(self.N)
        self.gram = np.asarray(self.gram)
        if self.gram.shape != (d, d):
            raise ValueError(
                f"gram matrix must be {d}x{d} for N={self.N}, got {self.gram.shape}"
            )

    @property
    def d(self) -> int:
        return dimension(self.N)

    @classmethod
    def identity(cls, N: int) -> "HaarOperator":
        return cls(N, np.diag(measure_vector(N)))

    @classmethod
    def from_coefficient_matrix(cls, N: int, coeff: np.ndarray) -> "HaarOperator":
        m = measure_vector(N)
        return cls(N, np.asarray(coeff, dtype=float) * m[:, None])

    def coefficient_matrix(self) -> np.ndarray:
        """Matrix acting on coefficient vectors (row r scaled by 1/|I_r|)."""
        m = measure_vector(self.N)
        return np.asarray(self.gram, dtype=float) / m[:, None]

    def apply(self, vec: HaarVector) -> HaarVector:
        x = vec.promoted(self.N).as_array()
        return HaarVector(self.N, list(self.coefficient_matrix() @ x))

    def bilinear(self, f: HaarVector, g: HaarVector) -> float:
        """<T f, g> evaluated through the stored form values."""
        x = f.promoted(self.N).as_array()
        y = g.promoted(self.N).as_array()
        return float(y @ np.asarray(self.gram, dtype=float) @ x)

    def adjoint(self) -> "HaarOperator":
        """The operator with <T* f, g> = <f, T g> (transpose of the form)."""
        return HaarOperator(self.N, np.asarray(self.gram).T.copy())

    def scaled(self, factor: float) -> "HaarOperator":
        return HaarOperator(self.N, np.asarray(self.gram, dtype=float) * factor)


def bilinear(T: HaarOperator, f: HaarVector, g: HaarVector) -> float:
    return T.bilinear(f, g)


@dataclass
class DiagonalReport:
    """Outcome of the large-diagonal test |<T h_K, h_K>| >= delta |K|."""

    requested_delta: float
    ratios: np.ndarray
    achieved_delta: float
    passes: bool

    def worst_interval(self) -> DyadicInterval:
        return interval_at(int(np.argmin(np.abs(self.ratios))))


def check_large_diagonal(T: HaarOperator, delta: float) -> DiagonalReport:
    """Compare every diagonal form value against delta times the measure."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    m = measure_vector(T.N)
    diag = np.asarray(np.diagonal(np.asarray(T.gram, dtype=float)))
    ratios = diag / m
    achieved = float(np.min(np.abs(ratios)))
    return DiagonalReport(
        requested_delta=float(delta),
        ratios=ratios,
        achieved_delta=achieved,
        passes=bool(achieved >= delta),
    )


@dataclass
class SignNormalization:
    """A diagonal +-1 multiplier M and the composition T o M."""

    signs: np.ndarray
    operator: HaarOperator


def sign_normalize(T: HaarOperator) -> SignNormalization:
    """Flip input signs so every diagonal form value becomes nonnegative.

    The multiplier sends h_K to sign(<T h_K, h_K>) h_K with sign(0) = +1; the
    returned operator is T composed with it, i.e. the columns of the form
    matrix are rescaled by the signs.
    """
    gram = np.asarray(T.gram, dtype=float)
    diag = np.diagonal(gram)
    signs = np.where(diag < 0.0, -1, 1).astype(np.int8)
    return SignNormalization(signs=signs, operator=HaarOperator(T.N, gram * signs[None, :]))


# ---------------------------------------------------------------------------
# operator norms

@dataclass
class OperatorNormEstimate:
    value: float
    witness: HaarVector
    exact: bool
    iterations: int
    converged: bool


def op_norm_exact_h2(T: HaarOperator) -> float:
    """Exact hp(2) operator norm via the measure-weighted spectral norm."""
    m = measure_vector(T.N)
    w = 1.0 / np.sqrt(m)
    sym = np.asarray(T.gram, dtype=float) * w[:, None] * w[None, :]
    return float(np.linalg.norm(sym, 2))


def op_norm(
    T: HaarOperator,
    space: SpaceTag,
    *,
    starts: int = 16,
    budget: int = 2000,
    seed: int = 0,
) -> OperatorNormEstimate:
    """Certified lower bound on sup ||T f|| / ||f||, exact for hp(2).

    Dual spaces reduce to the adjoint (the operator norm is invariant under
    passing to adjoints between a space and its dual); hp and slinf run a
    seeded multi-start projected ascent whose best witness is reported.
    """
    if space.is_hilbert:
        m = measure_vector(T.N)
        w = 1.0 / np.sqrt(m)
        sym = np.asarray(T.gram, dtype=float) * w[:, None] * w[None, :]
        U, S, Vt = np.linalg.svd(sym)
        x = Vt[0] * w  # unweight the top right-singular vector
        witness = HaarVector(T.N, list(x))
        return OperatorNormEstimate(float(S[0]), witness, True, 0, True)
    if space.family == "hp-dual":
        inner = op_norm(T.adjoint(), SpaceTag.hp(space.p), starts=starts, budget=budget, seed=seed)
        return OperatorNormEstimate(
            inner.value, inner.witness, inner.exact, inner.iterations, inner.converged
        )

    C = T.coefficient_matrix()
    N = T.N
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    d = T.d
    start_vectors = [np.ones(d)]
    for _ in range(max(0, starts - 1)):
        start_vectors.append(rng.standard_normal(d))

    best_val, best_x = -np.inf, None
    total_iters = 0
    converged_best = False
    per_start = max(1, budget // max(1, len(start_vectors)))
    for x0 in start_vectors:
        den0 = _space_value(x0, N, space)
        if den0 == 0.0:
            continue
        x = x0 / den0
        val = _space_value(C @ x, N, space)
        step = 1.0
        converged = False
        for _ in range(per_start):
            total_iters += 1
            y = C @ x
            num, grad_num = space_value_grad_np(y, N, space)
            den, grad_den = space_value_grad_np(x, N, space)
            if num == 0.0:
                break
            ratio = num / den
            ascent = (C.T @ grad_num) / den - ratio * grad_den / den
            if float(np.linalg.norm(ascent)) <= 1e-12 * max(1.0, ratio):
                converged = True
                break
            improved = False
            while step > 1e-14:
                cand = x + step * ascent
                cden = _space_value(cand, N, space)
                if cden > 0.0:
                    cand = cand / cden
                    cval = _space_value(C @ cand, N, space)
                    if cval > val + 1e-14 * max(val, 1.0):
                        x, val = cand, cval
                        improved = True
                        break
                step *= 0.5
            if not improved:
                converged = True
                break
            step = min(step * 2.0, 1.0)
        if val > best_val:
            best_val, best_x, converged_best = val, x, converged

    if best_x is None:
        return OperatorNormEstimate(0.0, HaarVector.zero(N), False, total_iters, True)
    witness = HaarVector(N, list(best_x))
    return OperatorNormEstimate(float(best_val), witness, False, total_iters, converged_best)


def _space_value(x: np.ndarray, N: int, space: SpaceTag) -> float:
    if space.family == "hp":
        return hp_value_np(x, N, space.p)
    if space.family == "slinf":
        value, _ = space_value_grad_np(x, N, space)
        return value
    raise ValueError(f"no direct evaluation for {space.label}")


def op_norm_upper(T: HaarOperator, space: SpaceTag) -> float:
    """A sound upper bound on the operator norm in the given space.

    Exact (spectral) for hp(2).  Otherwise bounds ||T f|| by the weighted
    entrywise L1 sum of the coefficient matrix, using |a_I| <= ||f|| / ||h_I||
    and the triangle inequality; crude but certified.
    """
    if space.is_hilbert:
        return op_norm_exact_h2(T)
    if space.family == "hp-dual":
        return op_norm_upper(T.adjoint(), SpaceTag.hp(space.p))
    C = np.abs(T.coefficient_matrix())
    m = measure_vector(T.N)
    if space.family == "hp":
        w_out = m ** (1.0 / space.p)
        w_in = m ** (-1.0 / space.p)
    else:  # slinf
        w_out = np.ones_like(m)
        w_in = np.ones_like(m)
    return float(w_out @ C @ w_in)


@dataclass
class EntryBoundReport:
    """Check of |<T h_K, h_K'>| <= Gamma |K|^(1/p) |K'|^(1/p') for all entries."""

    gamma: float
    p: float
    max_ratio: float
    violations: list = field(default_factory=list)

    @property
    def passes(self) -> bool:
        return not self.violations


def elementary_bound_check(
    T: HaarOperator,
    p: float,
    gamma: float | None = None,
    *,
    rtol: float = 1e-12,
) -> EntryBoundReport:
    """Verify the entry envelope implied by boundedness on hp(p).

    With gamma omitted, the exact hp(2) norm is used when p = 2; any other
    exponent requires an explicit upper bound for gamma.
    """
    if gamma is None:
        if p == 2.0:
            gamma = op_norm_exact_h2(T)
        else:
            raise ValueError("gamma is required unless p = 2")
    m = measure_vector(T.N)
    envelope = gamma * np.outer(m ** (1.0 - 1.0 / p), m ** (1.0 / p))
    gram = np.abs(np.asarray(T.gram, dtype=float))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(envelope > 0, gram / envelope, np.inf)
    max_ratio = float(np.max(ratios))
    violations = []
    rows, cols = np.where(gram > envelope * (1.0 + rtol))
    for r, c in zip(rows.tolist(), cols.tolist()):
        violations.append(
            {
                "row": interval_at(r).label,
                "col": interval_at(c).label,
                "value": float(gram[r, c]),
                "bound": float(envelope[r, c]),
            }
        )
    return EntryBoundReport(gamma=float(gamma), p=float(p), max_ratio=max_ratio, violations=violations)


# ---------------------------------------------------------------------------
# serialization

def save_operator(T: HaarOperator, path: str) -> None:
    """Write the operator to disk; `.json` selects the JSON layout."""
    if str(path).endswith(".json"):
        entries = []
        gram = np.asarray(T.gram, dtype=float)
        rows, cols = np.nonzero(gram)
        for r, c in zip(rows.tolist(), cols.tolist()):
            entries.append(
                {
                    "row": interval_at(r).label,
                    "col": interval_at(c).label,
                    "value": float(gram[r, c]),
                }
            )
        with open(path, "w", encoding="ascii") as fh:
            json.dump({"N": T.N, "entries": entries}, fh, indent=1)
            fh.write("\n")
        return
    with open(path, "w", encoding="ascii") as fh:
        fh.write(canonical_text(T))


def canonical_text(T: HaarOperator) -> str:
    """Deterministic text form: header line, then nonzero entries in order."""
    gram = np.asarray(T.gram, dtype=float)
    lines = [f"N {T.N}"]
    rows, cols = np.nonzero(gram)
    for r, c in zip(rows.tolist(), cols.tolist()):
        lines.append(
            f"row={interval_at(r).label} col={interval_at(c).label} "
            f"value={float(gram[r, c])!r}"
        )
    return "\n".join(lines) + "\n"


def operator_digest(T: HaarOperator) -> str:
    """sha256 of the canonical text; stable across runs and platforms."""
    return hashlib.sha256(canonical_text(T).encode("ascii")).hexdigest()


def load_operator(path: str) -> HaarOperator:
    """Read an operator file in either the text or the JSON layout."""
    with open(path, "r", encoding="ascii") as fh:
        content = fh.read()
    stripped = content.lstrip()
    if stripped.startswith("{"):
        try:
            payload = json.loads(content)
            N = int(payload["N"])
            entries = [
                (str(e["row"]), str(e["col"]), float(e["value"]))
                for e in payload["entries"]
            ]
        except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
            raise OperatorFormatError(f"malformed JSON operator file: {exc}") from exc
        return _assemble_operator(N, entries, source=path)

    lines = content.splitlines()
    if not lines:
        raise OperatorFormatError("empty operator file")
    header = lines[0].split()
    if len(header) != 2 or header[0] != "N":
        raise OperatorFormatError(f"line 1: expected 'N <int>' header, got {lines[0]!r}")
    try:
        N = int(header[1])
    except ValueError as exc:
        raise OperatorFormatError(f"line 1: bad resolution {header[1]!r}") from exc
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        fields = {}
        for token in line.split():
            if "=" not in token:
                raise OperatorFormatError(f"line {lineno}: bad token {token!r}")
            key, _, val = token.partition("=")
            fields[key] = val
        try:
            entries.append((fields["row"], fields["col"], float(fields["value"])))
        except (KeyError, ValueError) as exc:
            raise OperatorFormatError(f"line {lineno}: {exc}") from exc
    return _assemble_operator(N, entries, source=path)


def _assemble_operator(N: int, entries, source: str) -> HaarOperator:
    if N < 0:
        raise OperatorFormatError(f"{source}: negative resolution")
    d = dimension(N)
    gram = np.zeros((d, d))
    for row_label, col_label, value in entries:
        try:
            r = DyadicInterval.parse(row_label)
            c = DyadicInterval.parse(col_label)
        except ValueError as exc:
            raise OperatorFormatError(f"{source}: {exc}") from exc
        if r.level > N or c.level > N:
            raise OperatorFormatError(
                f"{source}: entry ({row_label}, {col_label}) exceeds level {N}"
            )
        gram[interval_index(r), interval_index(c)] = value
    return HaarOperator(N, gram)
