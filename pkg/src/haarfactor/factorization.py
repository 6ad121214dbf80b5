"""Factoring the identity of a small space through a large-diagonal operator.

Given an operator T on the big space whose Haar diagonal stays away from
zero, the identity of the small space factors as F T E with controlled
norms.  E embeds the small Haar system as a signed block basis; F averages
back through a compensator that divides by the block diagonal of T and a
direct inversion of the resulting near-identity block transfer matrix.
Everything is finite matrices; the analytic norm chain and the computed
norms are reported side by side.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .blocks import BlockCollection, JonesReport, SignAssignment, jones_check
from .dyadic import dimension, measure_vector
from .norms import SpaceTag, space_value_grad_np
from .operators import (
    DiagonalReport,
    HaarOperator,
    check_large_diagonal,
    op_norm_upper,
    sign_normalize,
)

CONDITION_LIMIT = 1e12


class FactorizationError(Exception):
    """Base class for pipeline failures; message names the failed inequality."""


class LargeDiagonalError(FactorizationError):
    pass


class BlockConditionError(FactorizationError):
    pass


class AlmostDiagonalError(FactorizationError):
    pass


class InsufficientSeparationError(FactorizationError):
    pass


class IllConditionedError(FactorizationError):
    pass


# ---------------------------------------------------------------------------
# parameters


def _floor_log2(q: Fraction) -> int:
    """Largest e with 2^e <= q, exact."""
    if q <= 0:
        raise ValueError("floor_log2 needs a positive argument")
    e = q.numerator.bit_length() - q.denominator.bit_length()
    two = Fraction(2)
    while two**e > q:
        e -= 1
    while two ** (e + 1) <= q:
        e += 1
    return e


@dataclass(frozen=True)
class Params:
    """Configured accuracy inputs and the dimensions they force.

    All rationals are kept exact so the derived values are reproducible
    digit for digit.  The fully derived N is astronomically large
    for any interesting input; desk-scale runs override N, m0 and eta0 and
    verify the downstream inequalities directly.
    """

    n: int
    delta: Fraction
    gamma: Fraction
    eta: Fraction
    eta0: Fraction
    m0: int
    N: int

    @property
    def separation(self) -> Fraction:
        """delta - eta0 (2^n + 2^(3(n+1))), the margin every bound divides by."""
        return self.delta - self.eta0 * (2**self.n + 2 ** (3 * (self.n + 1)))

    @property
    def norm_product_bound(self) -> Fraction:
        return (1 + self.eta) / self.delta

    def neumann_ratio(self) -> Fraction:
        """q = eta0 2^(3(n+1)) / (delta - eta0 2^n); the inversion needs q < 1."""
        denom = self.delta - self.eta0 * 2**self.n
        if denom <= 0:
            raise InsufficientSeparationError(
                f"delta - eta0*2^n = {float(denom)} <= 0"
            )
        return self.eta0 * 2 ** (3 * (self.n + 1)) / denom

    def implied_eta(self) -> Fraction:
        """Smallest eta whose product bound the analytic chain still meets."""
        sep = self.separation
        if sep <= 0:
            raise InsufficientSeparationError(
                f"delta - eta0*(2^n + 2^(3(n+1))) = {float(sep)} <= 0"
            )
        return self.delta / sep - 1

    def override(
        self,
        *,
        N: int | None = None,
        m0: int | None = None,
        eta0=None,
        eta=None,
    ) -> "Params":
        """Desk-scale replacement of the derived values, consistency kept."""
        new_N = self.N if N is None else int(N)
        new_m0 = self.m0 if m0 is None else int(m0)
        new_eta0 = self.eta0 if eta0 is None else Fraction(eta0)
        new_eta = self.eta if eta is None else Fraction(eta)
        if new_m0 < 0:
            raise ValueError(f"m0 must be nonnegative, got {new_m0}")
        if new_eta0 <= 0:
            raise ValueError("eta0 must be positive")
        if new_m0 + self.n > new_N:
            raise ValueError(
                f"m0 + n = {new_m0 + self.n} exceeds N = {new_N}; "
                "the block collection would not fit"
            )
        return Params(
            n=self.n,
            delta=self.delta,
            gamma=self.gamma,
            eta=new_eta,
            eta0=new_eta0,
            m0=new_m0,
            N=new_N,
        )

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "delta": {"exact": str(self.delta), "float": float(self.delta)},
            "gamma": {"exact": str(self.gamma), "float": float(self.gamma)},
            "eta": {"exact": str(self.eta), "float": float(self.eta)},
            "eta0": {"exact": str(self.eta0), "float": float(self.eta0)},
            "m0": self.m0,
            "N": self.N,
            "separation": float(self.separation),
            "norm_product_bound": float(self.norm_product_bound),
        }


def derive_params(n: int, delta, gamma, eta) -> Params:
    """Accuracy inputs -> (eta0, m0, N), exactly as the closed formulas read.

    eta0 = eta*delta / ((1+eta) 2^(3(n+2)));
    m0   = smallest integer with 2^m0 > 2^(6(n+2)) gamma^4 / eta0^4;
    N    = 19(n+2) + floor(4 log2(gamma/delta) + 4 log2(1 + 1/eta)).
    """
    if n < 0:
        raise ValueError(f"n must be nonnegative, got {n}")
    d, g, e = Fraction(delta), Fraction(gamma), Fraction(eta)
    if d <= 0 or g <= 0 or e <= 0:
        raise ValueError("delta, gamma, eta must all be positive")
    if g < d:
        warnings.warn(
            f"gamma = {float(g)} < delta = {float(d)}: no operator can have "
            "norm <= gamma and diagonal >= delta",
            stacklevel=2,
        )
    eta0 = e * d / ((1 + e) * 2 ** (3 * (n + 2)))
    m0 = _floor_log2(2 ** (6 * (n + 2)) * g**4 / eta0**4) + 1
    m0 = max(m0, 0)
    N = 19 * (n + 2) + _floor_log2(((g / d) * (1 + 1 / e)) ** 4)
    return Params(n=n, delta=d, gamma=g, eta=e, eta0=eta0, m0=m0, N=N)


# ---------------------------------------------------------------------------
# the block-basis operators, exact


def _require_jones(collection: BlockCollection) -> JonesReport:
    report = jones_check(collection, 1)
    if not report.passes:
        raise BlockConditionError(
            f"collection fails the compatibility conditions: {report.summary()}"
        )
    return report


def build_embedding(
    collection: BlockCollection, signs: SignAssignment, *, validate: bool = True
) -> np.ndarray:
    """Matrix of h_I -> b_I in Haar coordinates, entries exact rationals."""
    if validate:
        _require_jones(collection)
    targets = collection.targets
    mat = np.full((dimension(collection.N), len(targets)), Fraction(0), dtype=object)
    for i, target in enumerate(targets):
        idx = collection.member_indices(target)
        for k in idx.tolist():
            mat[k, i] = Fraction(int(signs.values[k]))
    return mat


def build_averaging(
    collection: BlockCollection, signs: SignAssignment, *, validate: bool = True
) -> np.ndarray:
    """Matrix of the block-averaging map back onto the small space.

    Row I has entry theta_K |K| / |B_I| at each member K, so the map sends
    b_I to h_I and kills anything orthogonal to every block.
    """
    if validate:
        _require_jones(collection)
    targets = collection.targets
    mat = np.full((len(targets), dimension(collection.N)), Fraction(0), dtype=object)
    for i, target in enumerate(targets):
        weight = collection.union_measure(target)
        for member, k in zip(
            collection.family(target), collection.member_indices(target).tolist()
        ):
            mat[i, k] = Fraction(int(signs.values[k])) * member.measure / weight
    return mat


def build_projection(
    collection: BlockCollection, signs: SignAssignment, *, validate: bool = True
) -> np.ndarray:
    """Projection onto the span of the blocks: embedding after averaging."""
    emb = build_embedding(collection, signs, validate=validate)
    avg = build_averaging(collection, signs, validate=False)
    return emb @ avg


def embedding_float(collection: BlockCollection, signs: SignAssignment) -> np.ndarray:
    mat = np.zeros((dimension(collection.N), len(collection.targets)))
    for i, target in enumerate(collection.targets):
        idx = collection.member_indices(target)
        mat[idx, i] = signs.values[idx].astype(float)
    return mat


def averaging_float(collection: BlockCollection, signs: SignAssignment) -> np.ndarray:
    mat = np.zeros((len(collection.targets), dimension(collection.N)))
    for i, target in enumerate(collection.targets):
        weight = float(collection.union_measure(target))
        idx = collection.member_indices(target)
        m = measure_vector(collection.N)[idx]
        mat[i, idx] = signs.values[idx].astype(float) * m / weight
    return mat


# ---------------------------------------------------------------------------
# compensator and inversion


def block_diagonal(
    T: HaarOperator, collection: BlockCollection, signs: SignAssignment
) -> np.ndarray:
    """d_I = <T b_I, b_I> for every target, as a float vector."""
    emb = embedding_float(collection, signs)
    return np.einsum("ki,kl,li->i", emb, np.asarray(T.gram, dtype=float), emb)


def compensator_coordinates(
    T: HaarOperator, collection: BlockCollection, signs: SignAssignment
) -> tuple[np.ndarray, np.ndarray]:
    """Block coordinates of the diagonal compensator, plus the diagonal.

    Row I is theta_K |K| / d_I over the members K, where d_I = <T b_I, b_I>;
    composing with the embedding gives the full operator that maps f to
    sum_I <f, b_I> / d_I * b_I.  Raises when some d_I is too close to zero
    to divide by, which is exactly the insufficient-separation regime.
    """
    diag = block_diagonal(T, collection, signs)
    scale = np.array(
        [float(collection.union_measure(t)) for t in collection.targets]
    )
    bad = np.abs(diag) <= 1e-14 * scale
    if np.any(bad):
        worst = collection.targets[int(np.argmax(bad))]
        raise InsufficientSeparationError(
            f"<T b_I, b_I> vanishes at I = {worst.label}; "
            "the compensator denominators are not bounded away from zero"
        )
    coords = np.zeros((len(collection.targets), dimension(collection.N)))
    m = measure_vector(collection.N)
    for i, target in enumerate(collection.targets):
        idx = collection.member_indices(target)
        coords[i, idx] = signs.values[idx].astype(float) * m[idx] / diag[i]
    return coords, diag


def compensator_matrix(
    T: HaarOperator, collection: BlockCollection, signs: SignAssignment
) -> np.ndarray:
    """The compensator as a full coefficient matrix on the big space."""
    coords, _ = compensator_coordinates(T, collection, signs)
    return embedding_float(collection, signs) @ coords


def block_transfer_matrix(
    T: HaarOperator, collection: BlockCollection, signs: SignAssignment
) -> np.ndarray:
    """Compensated action of T on the blocks: rows scaled by 1/d_I.

    Entry (i, j) is <T b_j, b_i> / d_i; the almost-diagonal inequalities
    make this a small perturbation of the identity.
    """
    emb = embedding_float(collection, signs)
    gram_b = emb.T @ np.asarray(T.gram, dtype=float) @ emb
    diag = np.diagonal(gram_b)
    scale = np.array(
        [float(collection.union_measure(t)) for t in collection.targets]
    )
    if np.any(np.abs(diag) <= 1e-14 * scale):
        raise InsufficientSeparationError(
            "a block diagonal value <T b_I, b_I> vanishes"
        )
    return gram_b / diag[:, None]


@dataclass
class InversionReport:
    """Direct solve of the block transfer matrix, with the series diagnostic."""

    inverse: np.ndarray
    cond: float
    inverse_norm: float
    neumann_q: float | None
    neumann_bound: float | None

    def to_json(self) -> dict:
        return {
            "cond": self.cond,
            "inverse_norm": self.inverse_norm,
            "neumann_q": self.neumann_q,
            "neumann_bound": self.neumann_bound,
        }


def invert_on_range(
    transfer: np.ndarray, params: Params | None = None
) -> InversionReport:
    """Invert the compensated block matrix directly.

    The geometric-series bound 1/(1-q) with q = eta0 2^(3(n+1)) / (delta -
    eta0 2^n) is attached as a diagnostic when parameters are supplied; the
    inverse itself always comes from a dense solve.
    """
    transfer = np.asarray(transfer, dtype=float)
    cond = float(np.linalg.cond(transfer))
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise IllConditionedError(
            f"block transfer matrix has condition number {cond:.3e} "
            f"(limit {CONDITION_LIMIT:.0e})"
        )
    inverse = np.linalg.solve(transfer, np.eye(transfer.shape[0]))
    q = bound = None
    if params is not None:
        try:
            q_frac = params.neumann_ratio()
        except InsufficientSeparationError:
            q_frac = None
        if q_frac is not None:
            q = float(q_frac)
            bound = 1.0 / (1.0 - q) if q < 1 else None
    return InversionReport(
        inverse=inverse,
        cond=cond,
        inverse_norm=float(np.linalg.norm(inverse, 2)),
        neumann_q=q,
        neumann_bound=bound,
    )


# ---------------------------------------------------------------------------
# norms of the assembled factors


def h2_matrix_norm(mat: np.ndarray, N_out: int, N_in: int) -> float:
    """Exact quadratic-mean operator norm of a coefficient matrix."""
    w_out = np.sqrt(measure_vector(N_out))
    w_in = np.sqrt(measure_vector(N_in))
    return float(np.linalg.norm(w_out[:, None] * mat / w_in[None, :], 2))


def sampled_matrix_norm(
    mat: np.ndarray,
    N_out: int,
    N_in: int,
    space: SpaceTag,
    *,
    samples: int = 64,
    seed: int = 0,
    extra_probes: list | None = None,
) -> float:
    """Certified lower bound on the space norm of a coefficient matrix.

    Probes every coordinate direction, seeded Gaussian inputs, and any
    caller-supplied vectors; the maximum attained ratio is a true lower
    bound in any space.
    """
    mat = np.asarray(mat, dtype=float)
    d_in = mat.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    probes = [np.eye(d_in)[:, j] for j in range(d_in)]
    probes.extend(rng.standard_normal(d_in) for _ in range(samples))
    if extra_probes is not None:
        probes.extend(np.asarray(x, dtype=float) for x in extra_probes)
    best = 0.0
    for x in probes:
        denom = space_value_grad_np(x, N_in, space)[0]
        if denom <= 0:
            continue
        value = space_value_grad_np(mat @ x, N_out, space)[0]
        best = max(best, value / denom)
    return best


def _defect_norm(defect: np.ndarray, n: int, space: SpaceTag) -> tuple[float, str]:
    if space.is_hilbert:
        return h2_matrix_norm(defect, n, n), "exact-spectral"
    upper = op_norm_upper(HaarOperator.from_coefficient_matrix(n, defect), space)
    return upper, "entry-l1-upper"


# ---------------------------------------------------------------------------
# assembly


@dataclass
class FactorizationResult:
    """The assembled factor pair and every certificate attached to it."""

    params: Params
    space: SpaceTag
    collection: BlockCollection
    signs: SignAssignment
    column_signs: np.ndarray
    embed: np.ndarray  # coefficient matrix, small space -> big space
    recover: np.ndarray  # coefficient matrix, big space -> small space
    defect: np.ndarray
    residual: float
    residual_kind: str
    embed_norm: float
    recover_norm: float
    norm_kind: str
    norm_product_bound: float
    analytic_product_bound: float
    off_diag_max: float
    diag_dev_max: float
    diagonal: DiagonalReport
    jones: JonesReport
    inversion: InversionReport

    @property
    def norm_product(self) -> float:
        return self.embed_norm * self.recover_norm

    @property
    def product_within_bound(self) -> bool:
        return self.norm_product <= self.norm_product_bound * (1 + 1e-12)

    def to_json(self) -> dict:
        from .blocks import collection_lines
        from .dyadic import interval_at

        def matrix_entries(mat: np.ndarray, out_level: int, in_level: int) -> dict:

            entries = []
            for r in range(mat.shape[0]):
                for c in range(mat.shape[1]):
                    v = float(mat[r, c])
                    if v != 0.0:
                        entries.append(
                            {
                                "row": interval_at(r).label,
                                "col": interval_at(c).label,
                                "value": v,
                            }
                        )
            return {"rows_level": out_level, "cols_level": in_level, "entries": entries}

        return {
            "params": self.params.to_json(),
            "space": self.space.label,
            "collection": collection_lines(self.collection),
            "signs": self.signs.values.tolist(),
            "column_signs": self.column_signs.tolist(),
            "embed": matrix_entries(self.embed, self.params.N, self.params.n),
            "recover": matrix_entries(self.recover, self.params.n, self.params.N),
            "residual": self.residual,
            "residual_kind": self.residual_kind,
            "embed_norm": self.embed_norm,
            "recover_norm": self.recover_norm,
            "norm_kind": self.norm_kind,
            "norm_product": self.norm_product,
            "norm_product_bound": self.norm_product_bound,
            "analytic_product_bound": self.analytic_product_bound,
            "off_diag_max": self.off_diag_max,
            "diag_dev_max": self.diag_dev_max,
            "inversion": self.inversion.to_json(),
            "diagonal": {
                "requested_delta": self.diagonal.requested_delta,
                "achieved_delta": self.diagonal.achieved_delta,
            },
        }


def assemble(
    T: HaarOperator,
    params: Params,
    collection: BlockCollection,
    signs: SignAssignment,
    space: SpaceTag,
) -> FactorizationResult:
    """Run the whole construction and verify its inequalities.

    Stages: flip Haar signs so the diagonal of T is positive; confirm the
    diagonal stays above delta; confirm the collection's compatibility
    conditions; confirm the supplied signs really push every block form
    below eta0; divide out the block diagonal and invert the transfer
    matrix; assemble the two factors and measure the defect against the
    identity.  Each stage failure raises a subclass of FactorizationError
    naming the violated inequality.
    """
    from .randomization import _FormEvaluator

    if collection.N != T.N:
        raise ValueError(
            f"collection lives at level {collection.N}, operator at {T.N}"
        )
    if params.N != T.N:
        raise ValueError(f"params.N = {params.N} but the operator has N = {T.N}")
    if collection.n != params.n:
        raise ValueError(
            f"collection targets level {collection.n}, params.n = {params.n}"
        )

    normalization = sign_normalize(T)
    Ts = normalization.operator

    diagonal = check_large_diagonal(Ts, float(params.delta))
    if not diagonal.passes:
        raise LargeDiagonalError(
            f"diagonal ratio {diagonal.achieved_delta:.6g} at "
            f"{diagonal.worst_interval().label} is below delta = "
            f"{float(params.delta):.6g}"
        )

    jones = _require_jones(collection)

    separation = params.separation
    if separation <= 0:
        raise InsufficientSeparationError(
            "need delta - eta0*(2^n + 2^(3(n+1))) > 0, got "
            f"{float(params.delta):.6g} - {float(params.eta0):.6g}"
            f"*{2**params.n + 2**(3*(params.n+1))} = {float(separation):.6g}"
        )

    evaluator = _FormEvaluator(Ts, collection)
    off_max, dev_max = evaluator.stats(signs.values.astype(float))
    eta0 = float(params.eta0)
    slack = 1 + 1e-9
    if off_max > eta0 * slack or dev_max > eta0 * slack:
        raise AlmostDiagonalError(
            f"block forms exceed eta0 = {eta0:.6g}: off-diagonal max "
            f"{off_max:.6g}, diagonal deviation max {dev_max:.6g}"
        )

    coords, _ = compensator_coordinates(Ts, collection, signs)
    transfer = block_transfer_matrix(Ts, collection, signs)
    inversion = invert_on_range(transfer, params)

    recover = inversion.inverse @ coords
    column_signs = normalization.signs.astype(np.int8)
    embed = embedding_float(collection, signs) * column_signs[:, None].astype(float)

    coeff = T.coefficient_matrix()
    defect = recover @ (coeff @ embed) - np.eye(len(collection.targets))
    residual, residual_kind = _defect_norm(defect, params.n, space)

    if space.is_hilbert:
        embed_norm = h2_matrix_norm(embed, params.N, params.n)
        recover_norm = h2_matrix_norm(recover, params.n, params.N)
        norm_kind = "exact-spectral"
    else:
        embed_norm = sampled_matrix_norm(embed, params.N, params.n, space)
        # the blocks themselves are the natural worst cases for the recovery
        recover_norm = sampled_matrix_norm(
            recover,
            params.n,
            params.N,
            space,
            extra_probes=[embed[:, j] for j in range(embed.shape[1])],
        )
        norm_kind = "sampled-lower"

    return FactorizationResult(
        params=params,
        space=space,
        collection=collection,
        signs=signs,
        column_signs=column_signs,
        embed=embed,
        recover=recover,
        defect=defect,
        residual=residual,
        residual_kind=residual_kind,
        embed_norm=embed_norm,
        recover_norm=recover_norm,
        norm_kind=norm_kind,
        norm_product_bound=float(params.norm_product_bound),
        analytic_product_bound=float(1 / separation),
        off_diag_max=off_max,
        diag_dev_max=dev_max,
        diagonal=diagonal,
        jones=jones,
        inversion=inversion,
    )


@dataclass
class VerificationReport:
    residual: float
    residual_kind: str
    tolerance: float
    norm_product: float
    norm_product_bound: float
    analytic_product_bound: float
    analytic_within_bound: bool
    residual_ok: bool
    product_ok: bool

    @property
    def passes(self) -> bool:
        return self.residual_ok and self.product_ok

    def to_json(self) -> dict:
        return {
            "residual": self.residual,
            "residual_kind": self.residual_kind,
            "tolerance": self.tolerance,
            "norm_product": self.norm_product,
            "norm_product_bound": self.norm_product_bound,
            "analytic_product_bound": self.analytic_product_bound,
            "analytic_within_bound": self.analytic_within_bound,
            "residual_ok": self.residual_ok,
            "product_ok": self.product_ok,
            "passes": self.passes,
        }


def default_tolerance(space: SpaceTag) -> float:
    """Residual acceptance: exact-arithmetic tier at p = 2, solver tier else."""
    return 1e-8 if space.is_hilbert else 1e-6


def verify(
    result: FactorizationResult,
    T: HaarOperator,
    space: SpaceTag | None = None,
    *,
    tolerance: float | None = None,
) -> VerificationReport:
    """Recompute the defect from the stored factors and re-check every bound."""
    space = space or result.space
    if tolerance is None:
        tolerance = default_tolerance(space)
    n = result.params.n
    defect = result.recover @ (T.coefficient_matrix() @ result.embed) - np.eye(
        dimension(n)
    )
    residual, kind = _defect_norm(defect, n, space)
    sep = result.params.separation
    analytic = float(1 / sep) if sep > 0 else float("inf")
    bound = float(result.params.norm_product_bound)
    product = result.norm_product
    return VerificationReport(
        residual=residual,
        residual_kind=kind,
        tolerance=tolerance,
        norm_product=product,
        norm_product_bound=bound,
        analytic_product_bound=analytic,
        analytic_within_bound=analytic <= bound * (1 + 1e-12),
        residual_ok=residual <= tolerance,
        product_ok=product <= bound * (1 + 1e-12),
    )
