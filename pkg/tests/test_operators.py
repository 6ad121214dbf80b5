"""Operators in the Haar pairing convention: checks, norms, file format."""

import json

import numpy as np
import pytest

from haarfactor.dyadic import (
    DyadicInterval,
    HaarVector,
    dimension,
    measure_vector,
    pairing,
)
from haarfactor.norms import SpaceTag
from haarfactor.operators import (
    HaarOperator,
    OperatorFormatError,
    bilinear,
    canonical_text,
    check_large_diagonal,
    elementary_bound_check,
    load_operator,
    op_norm,
    op_norm_exact_h2,
    op_norm_upper,
    operator_digest,
    save_operator,
    sign_normalize,
)


def _random_operator(N, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    d = dimension(N)
    m = measure_vector(N)
    entries = rng.uniform(-1, 1, size=(d, d)) * np.outer(np.sqrt(m), np.sqrt(m))
    return HaarOperator(N, entries * scale)


def test_identity_gram():
    T = HaarOperator.identity(2)
    np.testing.assert_array_equal(T.gram, np.diag(measure_vector(2)))
    f = HaarVector(2, [1.0] * 7)
    assert T.apply(f) == f


def test_gram_shape_validation():
    with pytest.raises(ValueError):
        HaarOperator(2, np.zeros((3, 3)))


def test_bilinear_matches_pairing():
    # <T f, g> through the gram matrix must agree with the pairing of the
    # applied vector
    T = _random_operator(3, seed=0)
    rng = np.random.default_rng(1)
    for _ in range(10):
        f = HaarVector(3, rng.standard_normal(dimension(3)).tolist())
        g = HaarVector(3, rng.standard_normal(dimension(3)).tolist())
        direct = bilinear(T, f, g)
        assert direct == pytest.approx(pairing(T.apply(f), g), rel=1e-12)
        assert T.bilinear(f, g) == direct


def test_adjoint_transposes_pairing():
    T = _random_operator(3, seed=2)
    rng = np.random.default_rng(3)
    f = HaarVector(3, rng.standard_normal(dimension(3)).tolist())
    g = HaarVector(3, rng.standard_normal(dimension(3)).tolist())
    assert bilinear(T, f, g) == pytest.approx(bilinear(T.adjoint(), g, f), rel=1e-12)


def test_coefficient_matrix_roundtrip():
    T = _random_operator(2, seed=4)
    back = HaarOperator.from_coefficient_matrix(2, T.coefficient_matrix())
    np.testing.assert_allclose(back.gram, T.gram, rtol=1e-15)


def test_diagonal_report():
    d = dimension(2)
    gram = np.diag(measure_vector(2) * np.array([1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4]))
    T = HaarOperator(2, gram)
    rep = check_large_diagonal(T, 0.5)
    assert not rep.passes
    assert rep.achieved_delta == pytest.approx(0.4)
    assert rep.worst_interval() == DyadicInterval(2, 3)
    assert check_large_diagonal(T, 0.4).passes


# hand value: diagonal ratios (+2, -3) flip the second column and leave
# the rest alone, giving ratios (+2, +3)
def test_sign_normalize_hand_value():
    m = measure_vector(1)
    gram = np.diag(np.array([2.0, -3.0, 1.0]) * m)
    gram[0, 1] = 0.7
    sn = sign_normalize(HaarOperator(1, gram))
    np.testing.assert_array_equal(sn.signs, [1, -1, 1])
    ratios = np.diagonal(sn.operator.gram) / m
    np.testing.assert_allclose(ratios, [2.0, 3.0, 1.0])
    assert sn.operator.gram[0, 1] == -0.7
    # columns scaled, rows untouched
    assert sn.operator.gram[1, 0] == gram[1, 0]


def test_sign_normalize_zero_diagonal_keeps_plus():
    gram = np.zeros((3, 3))
    sn = sign_normalize(HaarOperator(1, gram))
    np.testing.assert_array_equal(sn.signs, [1, 1, 1])


def test_exact_h2_norm_identity_and_scaling():
    T = HaarOperator.identity(3)
    assert op_norm_exact_h2(T) == pytest.approx(1.0, abs=1e-14)
    assert op_norm_exact_h2(T.scaled(2.5)) == pytest.approx(2.5, rel=1e-14)


def test_exact_h2_norm_rank_one():
    # T = <., h_root> h_root has quadratic-mean norm 1
    N = 2
    gram = np.zeros((7, 7))
    gram[0, 0] = 1.0
    assert op_norm_exact_h2(HaarOperator(N, gram)) == pytest.approx(1.0, rel=1e-14)


def test_op_norm_estimates_bracket_exact():
    for seed in range(5):
        T = _random_operator(3, seed=seed)
        exact = op_norm_exact_h2(T)
        est = op_norm(T, SpaceTag.hp(2))
        assert est.exact
        assert est.value == pytest.approx(exact, rel=1e-12)
        upper = op_norm_upper(T, SpaceTag.hp(2))
        assert exact <= upper * (1 + 1e-12)


def test_op_norm_lower_bounds_below_upper():
    rng_seeds = [11, 12]
    for space in (SpaceTag.hp(1), SpaceTag.hp(3), SpaceTag.slinf(), SpaceTag.hp_dual(3)):
        for seed in rng_seeds:
            T = _random_operator(2, seed=seed)
            est = op_norm(T, space, starts=6, budget=600, seed=0)
            upper = op_norm_upper(T, space)
            assert est.value <= upper * (1 + 1e-9)
            assert est.witness is not None


def test_op_norm_witness_attains_value():
    T = _random_operator(2, seed=13)
    space = SpaceTag.hp(3)
    est = op_norm(T, space, starts=6, budget=600, seed=0)
    from haarfactor.norms import space_value_grad_np

    x = est.witness.as_array()
    num = space_value_grad_np(T.coefficient_matrix() @ x, 2, space)[0]
    den = space_value_grad_np(x, 2, space)[0]
    assert num / den == pytest.approx(est.value, rel=1e-9)


def test_dual_norm_equals_adjoint_norm():
    T = _random_operator(2, seed=14)
    a = op_norm(T, SpaceTag.hp_dual(2))
    b = op_norm(T.adjoint(), SpaceTag.hp(2))
    assert a.value == pytest.approx(b.value, rel=1e-12)


def test_elementary_bound_check():
    T = _random_operator(3, seed=6)
    gamma = op_norm_exact_h2(T)
    rep = elementary_bound_check(T, 2, gamma)
    assert rep.passes
    assert rep.max_ratio <= 1 + 1e-12
    # shrinking gamma below the max ratio must produce violations
    rep_bad = elementary_bound_check(T, 2, gamma * rep.max_ratio / 2)
    assert not rep_bad.passes
    assert rep_bad.violations


def test_elementary_bound_needs_gamma_off_hilbert():
    T = _random_operator(2, seed=7)
    with pytest.raises(ValueError):
        elementary_bound_check(T, 3)
    assert elementary_bound_check(T, 3, gamma=100.0).passes


def test_save_load_text_roundtrip(tmp_path):
    T = _random_operator(2, seed=8)
    path = tmp_path / "op.txt"
    save_operator(T, str(path))
    back = load_operator(str(path))
    assert back.N == 2
    np.testing.assert_array_equal(back.gram, T.gram)


def test_save_load_json_roundtrip(tmp_path):
    T = _random_operator(2, seed=9)
    path = tmp_path / "op.json"
    save_operator(T, str(path))
    data = json.loads(path.read_text())
    assert data["N"] == 2
    back = load_operator(str(path))
    np.testing.assert_array_equal(back.gram, T.gram)


def test_load_rejects_bad_level(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("N 1\nrow=2:0 col=0:0 value=1.0\n")
    with pytest.raises(OperatorFormatError):
        load_operator(str(path))


def test_load_rejects_garbage_line(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("N 1\nrow=0:0 col=0:0 value=not-a-number\n")
    with pytest.raises(OperatorFormatError) as err:
        load_operator(str(path))
    assert "line 2" in str(err.value)


def test_digest_is_content_addressed(tmp_path):
    T = _random_operator(2, seed=10)
    d1 = operator_digest(T)
    assert d1 == operator_digest(HaarOperator(2, T.gram.copy()))
    other = HaarOperator(2, T.gram * 2.0)
    assert operator_digest(other) != d1
    assert len(d1) == 64
    assert canonical_text(T).startswith("N 2")
