"""Factor assembly: parameter formulas, block maps, inversion, verification."""

import warnings
from fractions import Fraction

import numpy as np
import pytest

from haarfactor.blocks import (
    BlockCollection,
    SignAssignment,
    gamlen_gaudet,
)
from haarfactor.dyadic import DyadicInterval, dimension, measure_vector
from haarfactor.factorization import (
    AlmostDiagonalError,
    BlockConditionError,
    IllConditionedError,
    InsufficientSeparationError,
    LargeDiagonalError,
    assemble,
    averaging_float,
    block_diagonal,
    block_transfer_matrix,
    build_averaging,
    build_embedding,
    build_projection,
    compensator_coordinates,
    compensator_matrix,
    default_tolerance,
    derive_params,
    embedding_float,
    h2_matrix_norm,
    invert_on_range,
    sampled_matrix_norm,
    verify,
    _floor_log2,
)
from haarfactor.norms import SpaceTag, space_value_grad_np
from haarfactor.operators import HaarOperator
from haarfactor.randomization import calibrate_eta0, search_signs


def test_floor_log2_exact():
    assert _floor_log2(Fraction(1)) == 0
    assert _floor_log2(Fraction(1024)) == 10
    assert _floor_log2(Fraction(1023)) == 9
    assert _floor_log2(Fraction(1025)) == 10
    assert _floor_log2(Fraction(1, 8)) == -3
    assert _floor_log2(Fraction(3, 1024)) == -9
    with pytest.raises(ValueError):
        _floor_log2(Fraction(0))


# hand values for the closed parameter formulas
def test_derive_params_hand_values():
    p = derive_params(1, 1, 1, 1)
    assert p.eta0 == Fraction(1, 1024)
    assert p.m0 == 59
    assert p.N == 61
    q = derive_params(2, Fraction(1, 2), 2, Fraction(1, 2))
    assert q.eta0 == Fraction(1, 24576)
    assert q.m0 == 87
    assert q.N == 90


def test_derive_params_validation():
    with pytest.raises(ValueError):
        derive_params(-1, 1, 1, 1)
    with pytest.raises(ValueError):
        derive_params(1, 0, 1, 1)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        derive_params(1, 1, Fraction(1, 2), 1)
    assert any("gamma" in str(w.message) for w in caught)


def test_params_algebra():
    p = derive_params(1, Fraction(1, 2), 1, 1)
    # separation and the implied eta are two readings of the same margin
    sep = p.delta - p.eta0 * (2**p.n + 2 ** (3 * (p.n + 1)))
    assert p.separation == sep
    assert (1 + p.implied_eta()) / p.delta == 1 / sep
    q = p.neumann_ratio()
    assert q == p.eta0 * 2 ** (3 * (p.n + 1)) / (p.delta - p.eta0 * 2**p.n)
    assert 0 < q < 1


def test_params_override_validation():
    p = derive_params(1, Fraction(1, 2), 1, 1)
    small = p.override(N=4, m0=2, eta0=Fraction(1, 1000))
    assert small.N == 4 and small.m0 == 2
    assert small.delta == p.delta
    with pytest.raises(ValueError):
        p.override(N=4, m0=4)  # m0 + n > N
    with pytest.raises(ValueError):
        p.override(N=4, m0=2, eta0=0)
    with pytest.raises(ValueError):
        p.override(N=4, m0=-1)


def test_params_insufficient_separation_raises():
    p = derive_params(1, Fraction(1, 2), 1, 1).override(
        N=4, m0=2, eta0=Fraction(1, 32)
    )
    with pytest.raises(InsufficientSeparationError):
        p.implied_eta()
    far = derive_params(1, Fraction(1, 2), 1, 1).override(
        N=4, m0=2, eta0=Fraction(1, 2)
    )
    with pytest.raises(InsufficientSeparationError):
        far.neumann_ratio()


def _desk_params(n=1, N=4, m0=2, eta0=Fraction(1, 1000), eta=1):
    return derive_params(n, Fraction(1, 2), 1, eta).override(N=N, m0=m0, eta0=eta0)


def test_block_maps_exact_identities():
    C = gamlen_gaudet(2, 2)
    signs = SignAssignment.random(C.N, seed=5)
    B = build_embedding(C, signs)
    A = build_averaging(C, signs)
    P = build_projection(C, signs)
    t = len(C.targets)
    assert np.array_equal(A @ B, np.diag([Fraction(1)] * t))
    assert np.array_equal(P @ P, P)
    # every entry stays rational
    assert all(isinstance(v, Fraction) for v in P.flatten().tolist())


def test_degenerate_collection_gives_identity_maps():
    C = gamlen_gaudet(2, 0)
    signs = SignAssignment.constant(C.N)
    B = build_embedding(C, signs)
    A = build_averaging(C, signs)
    eye = np.array(
        [[Fraction(int(i == j)) for j in range(dimension(2))] for i in range(dimension(2))],
        dtype=object,
    )
    assert np.array_equal(B, eye)
    assert np.array_equal(A, eye)


def test_build_maps_reject_bad_collection():
    members = {iv: (iv,) for iv in gamlen_gaudet(1, 0).targets}
    members[DyadicInterval(1, 0)] = (DyadicInterval(0, 0),)
    bad = BlockCollection(1, 1, members)
    signs = SignAssignment.constant(1)
    with pytest.raises(BlockConditionError):
        build_embedding(bad, signs)


def test_float_maps_match_exact_maps():
    C = gamlen_gaudet(1, 2)
    signs = SignAssignment.random(C.N, seed=2)
    B = build_embedding(C, signs)
    A = build_averaging(C, signs)
    np.testing.assert_array_equal(
        embedding_float(C, signs), B.astype(float)
    )
    np.testing.assert_array_equal(
        averaging_float(C, signs), A.astype(float)
    )


def test_embedding_and_averaging_are_contractions_sampled():
    C = gamlen_gaudet(2, 2)
    signs = SignAssignment.random(C.N, seed=3)
    B = embedding_float(C, signs)
    A = averaging_float(C, signs)
    rng = np.random.default_rng(0)
    spaces = [SpaceTag("hp", 1), SpaceTag("hp", 2), SpaceTag("slinf")]
    for space in spaces:
        for _ in range(20):
            f = rng.standard_normal(dimension(C.n))
            g = rng.standard_normal(dimension(C.N))
            vf = space_value_grad_np(f, C.n, space)[0]
            vg = space_value_grad_np(g, C.N, space)[0]
            assert space_value_grad_np(B @ f, C.N, space)[0] <= vf * (1 + 1e-9)
            assert space_value_grad_np(A @ g, C.n, space)[0] <= vg * (1 + 1e-9)


def test_block_diagonal_identity_operator():
    C = gamlen_gaudet(1, 2)
    signs = SignAssignment.random(C.N, seed=1)
    d = block_diagonal(HaarOperator.identity(C.N), C, signs)
    want = np.array([float(C.union_measure(t)) for t in C.targets])
    np.testing.assert_allclose(d, want, rtol=0, atol=0)


def test_compensator_matches_transfer_matrix():
    C = gamlen_gaudet(1, 2)
    signs = SignAssignment.random(C.N, seed=4)
    rng = np.random.default_rng(9)
    d = dimension(C.N)
    gram = np.diag(measure_vector(C.N)) + 1e-3 * rng.uniform(-1, 1, size=(d, d))
    T = HaarOperator(C.N, gram)
    coords, diag = compensator_coordinates(T, C, signs)
    transfer = block_transfer_matrix(T, C, signs)
    # rows of the coordinates pair blocks against T: U T B is the transfer
    np.testing.assert_allclose(
        coords @ T.coefficient_matrix() @ embedding_float(C, signs),
        transfer,
        atol=1e-12,
    )
    np.testing.assert_allclose(np.diagonal(transfer), 1.0, atol=1e-12)
    U = compensator_matrix(T, C, signs)
    assert U.shape == (d, d)
    np.testing.assert_allclose(
        U, embedding_float(C, signs) @ coords, atol=0, rtol=0
    )


def test_compensator_rejects_vanishing_diagonal():
    C = gamlen_gaudet(1, 1)
    signs = SignAssignment.constant(C.N)
    T = HaarOperator(C.N, np.zeros((dimension(C.N), dimension(C.N))))
    with pytest.raises(InsufficientSeparationError):
        compensator_coordinates(T, C, signs)
    with pytest.raises(InsufficientSeparationError):
        block_transfer_matrix(T, C, signs)


def test_invert_on_range_identity():
    rep = invert_on_range(np.eye(3), _desk_params())
    np.testing.assert_array_equal(rep.inverse, np.eye(3))
    assert rep.cond == 1.0
    assert rep.inverse_norm == 1.0
    assert rep.neumann_q is not None and rep.neumann_q < 1
    assert rep.neumann_bound == pytest.approx(1.0 / (1.0 - rep.neumann_q))
    assert rep.inverse_norm <= rep.neumann_bound


def test_invert_on_range_rejects_ill_conditioned():
    with pytest.raises(IllConditionedError):
        invert_on_range(np.array([[1.0, 1.0], [1.0, 1.0]]))
    with pytest.raises(IllConditionedError):
        invert_on_range(np.array([[1.0, 1.0], [1.0, 1.0 + 1e-15]]))


def test_h2_matrix_norm_values():
    assert h2_matrix_norm(np.eye(dimension(1)), 1, 1) == 1.0
    assert h2_matrix_norm(np.diag([2.0, 1.0, 1.0]), 1, 1) == 2.0


def test_sampled_matrix_norm_is_lower_bound():
    C = gamlen_gaudet(1, 2)
    signs = SignAssignment.constant(C.N)
    B = embedding_float(C, signs)
    # the embedding has norm exactly 1 in every space here
    got = sampled_matrix_norm(B, C.N, C.n, SpaceTag("slinf"), samples=32, seed=0)
    assert got == pytest.approx(1.0, abs=1e-12)
    assert got <= 1.0 + 1e-12


def test_assemble_identity_is_exact():
    C = gamlen_gaudet(1, 2)
    params = _desk_params(n=1, N=C.N, m0=2)
    signs = SignAssignment.constant(C.N)
    T = HaarOperator.identity(C.N)
    result = assemble(T, params, C, signs, SpaceTag("hp", 2))
    assert result.residual == 0.0
    assert not result.defect.any()
    np.testing.assert_array_equal(result.embed, embedding_float(C, signs))
    np.testing.assert_array_equal(result.recover, averaging_float(C, signs))
    assert result.embed_norm == 1.0 and result.recover_norm == 1.0
    assert result.product_within_bound
    assert result.residual_kind == "exact-spectral"
    report = verify(result, T)
    assert report.passes and report.residual == 0.0
    assert report.analytic_within_bound


def _perturbed_setup(seed=9):
    C = gamlen_gaudet(1, 2)
    d = dimension(C.N)
    rng = np.random.default_rng(seed)
    E = rng.uniform(-1, 1, size=(d, d))
    np.fill_diagonal(E, 0.0)
    T = HaarOperator(C.N, np.diag(measure_vector(C.N)) + 5e-4 * E)
    eta0 = calibrate_eta0(T, C, quantile=0.9, samples=100, seed=seed)
    found = search_signs(T, C, eta0, budget=500, seed=seed)
    assert found.success
    params = _desk_params(n=1, N=C.N, m0=2, eta0=Fraction(eta0))
    return T, C, params, found.signs


def test_assemble_perturbed_operator():
    T, C, params, signs = _perturbed_setup()
    result = assemble(T, params, C, signs, SpaceTag("hp", 2))
    assert result.residual <= 1e-10
    assert result.norm_kind == "exact-spectral"
    assert result.product_within_bound
    assert result.norm_product <= result.analytic_product_bound * (1 + 1e-12)
    report = verify(result, T)
    assert report.passes


def test_assemble_slinf_uses_sampled_norms():
    T, C, params, signs = _perturbed_setup()
    result = assemble(T, params, C, signs, SpaceTag("slinf"))
    assert result.residual_kind == "entry-l1-upper"
    assert result.norm_kind == "sampled-lower"
    assert result.residual <= 1e-6
    # blocks are unit vectors, so both factors reach norm 1 from below
    assert result.embed_norm >= 1.0 - 1e-12
    assert result.recover_norm >= 1.0 - 1e-9


def test_assemble_dimension_checks():
    C = gamlen_gaudet(1, 2)
    params = _desk_params(n=1, N=C.N, m0=2)
    signs = SignAssignment.constant(C.N)
    with pytest.raises(ValueError):
        assemble(HaarOperator.identity(C.N + 1), params, C, signs, SpaceTag("hp", 2))
    with pytest.raises(ValueError):
        assemble(
            HaarOperator.identity(C.N),
            _desk_params(n=1, N=5, m0=2),
            C,
            signs,
            SpaceTag("hp", 2),
        )
    C2 = gamlen_gaudet(2, 1)  # same N, different target depth
    with pytest.raises(ValueError):
        assemble(
            HaarOperator.identity(C.N),
            params,
            C2,
            SignAssignment.constant(C2.N),
            SpaceTag("hp", 2),
        )


def test_assemble_small_diagonal_rejected():
    C = gamlen_gaudet(1, 2)
    params = _desk_params(n=1, N=C.N, m0=2)
    signs = SignAssignment.constant(C.N)
    T = HaarOperator.identity(C.N).scaled(0.3)  # diagonal ratio 0.3 < 1/2
    with pytest.raises(LargeDiagonalError):
        assemble(T, params, C, signs, SpaceTag("hp", 2))


def test_assemble_bad_collection_rejected():
    C = gamlen_gaudet(1, 2)
    members = dict(C.members)
    members[DyadicInterval(1, 1)] = members[DyadicInterval(1, 0)]
    bad = BlockCollection(1, C.N, members)
    params = _desk_params(n=1, N=C.N, m0=2)
    with pytest.raises(BlockConditionError):
        assemble(
            HaarOperator.identity(C.N),
            params,
            bad,
            SignAssignment.constant(C.N),
            SpaceTag("hp", 2),
        )


def test_assemble_separation_and_sign_gates():
    T, C, params, signs = _perturbed_setup()
    wide = params.override(eta0=Fraction(1, 32))  # separation goes negative
    with pytest.raises(InsufficientSeparationError):
        assemble(T, wide, C, signs, SpaceTag("hp", 2))
    tight = params.override(eta0=Fraction(1, 10**9))
    with pytest.raises(AlmostDiagonalError):
        assemble(T, tight, C, signs, SpaceTag("hp", 2))


def test_scale_equivariance_is_bitwise():
    T, C, params, signs = _perturbed_setup()
    result = assemble(T, params, C, signs, SpaceTag("hp", 2))
    doubled = derive_params(1, 1, 2, 1).override(
        N=C.N, m0=2, eta0=params.eta0 * 2
    )
    result2 = assemble(T.scaled(2.0), doubled, C, signs, SpaceTag("hp", 2))
    assert result2.residual == result.residual
    np.testing.assert_array_equal(result2.defect, result.defect)
    np.testing.assert_array_equal(result2.recover, result.recover * 0.5)
    np.testing.assert_array_equal(result2.embed, result.embed)


def test_verify_detects_tampering():
    T, C, params, signs = _perturbed_setup()
    result = assemble(T, params, C, signs, SpaceTag("hp", 2))
    result.recover[0, 0] += 1e-2
    report = verify(result, T)
    assert report.residual > report.tolerance
    assert not report.residual_ok
    assert not report.passes


def test_default_tolerances():
    assert default_tolerance(SpaceTag("hp", 2)) == 1e-8
    assert default_tolerance(SpaceTag("hp", 1)) == 1e-6
    assert default_tolerance(SpaceTag("slinf")) == 1e-6


def test_result_json_shape():
    C = gamlen_gaudet(1, 1)
    params = _desk_params(n=1, N=C.N, m0=1)
    T = HaarOperator.identity(C.N)
    result = assemble(T, params, C, SignAssignment.constant(C.N), SpaceTag("hp", 2))
    data = result.to_json()
    assert data["embed"]["rows_level"] == C.N
    assert data["embed"]["cols_level"] == 1
    assert data["recover"]["rows_level"] == 1
    assert all(e["value"] != 0.0 for e in data["embed"]["entries"])
    assert data["params"]["m0"] == 1
    assert data["residual"] == 0.0
    assert data["inversion"]["cond"] == 1.0
