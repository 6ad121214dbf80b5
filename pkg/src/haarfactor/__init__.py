"""Finite dyadic Hardy-type spaces and constructive identity factorization.

The package builds the Haar system on [0,1) at a finite resolution, computes
the square-function norms and their duals, checks the compatibility
conditions for block collections, almost-diagonalizes a large-diagonal
operator with random signs, and assembles the pair of factors that push the
identity of a small space through the operator.  Exact rational arithmetic
backs every claim that is checked with zero tolerance.
"""

from .blocks import (
    BlockCollection,
    JonesReport,
    SignAssignment,
    alpha,
    gamlen_gaudet,
    jones_check,
    load_collection,
    load_signs,
    save_collection,
    save_signs,
    synthesize,
)
from .dyadic import (
    CapacityError,
    DyadicInterval,
    HaarVector,
    StepFunction,
    dimension,
    enumerate_intervals,
    haar_to_step,
    interval_at,
    interval_index,
    measure_vector,
    pairing,
    pairing_step,
    square_function,
    square_function_squared,
    step_to_haar,
)
from .factorization import (
    AlmostDiagonalError,
    BlockConditionError,
    FactorizationError,
    FactorizationResult,
    IllConditionedError,
    InsufficientSeparationError,
    LargeDiagonalError,
    Params,
    assemble,
    build_averaging,
    build_embedding,
    build_projection,
    block_transfer_matrix,
    compensator_coordinates,
    compensator_matrix,
    derive_params,
    invert_on_range,
    verify,
)
from .norms import (
    InexactNormError,
    SpaceTag,
    block_norm_closed_form,
    dual_norm_hp,
    hp_power_exact,
    norm,
    norm_hp,
    norm_slinf,
    slinf_squared_exact,
)
from .operators import (
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
from .randomization import (
    EnumerationCapError,
    MomentReport,
    SignSearchResult,
    calibrate_eta0,
    cross_form,
    cross_second_moment,
    deviation_second_moment,
    diagonal_deviation,
    exact_moments,
    mc_moments,
    search_signs,
    union_bound,
    union_bound_below_one,
    variance_bound_check,
)

__version__ = "0.1.0"

__all__ = [
    "AlmostDiagonalError",
    "BlockCollection",
    "BlockConditionError",
    "CapacityError",
    "DyadicInterval",
    "EnumerationCapError",
    "FactorizationError",
    "FactorizationResult",
    "HaarOperator",
    "HaarVector",
    "IllConditionedError",
    "InexactNormError",
    "InsufficientSeparationError",
    "JonesReport",
    "LargeDiagonalError",
    "MomentReport",
    "OperatorFormatError",
    "Params",
    "SignAssignment",
    "SignSearchResult",
    "SpaceTag",
    "StepFunction",
    "alpha",
    "assemble",
    "bilinear",
    "block_norm_closed_form",
    "block_transfer_matrix",
    "build_averaging",
    "build_embedding",
    "build_projection",
    "calibrate_eta0",
    "canonical_text",
    "check_large_diagonal",
    "compensator_coordinates",
    "compensator_matrix",
    "cross_form",
    "cross_second_moment",
    "derive_params",
    "deviation_second_moment",
    "diagonal_deviation",
    "dimension",
    "dual_norm_hp",
    "elementary_bound_check",
    "enumerate_intervals",
    "exact_moments",
    "gamlen_gaudet",
    "haar_to_step",
    "hp_power_exact",
    "interval_at",
    "interval_index",
    "invert_on_range",
    "jones_check",
    "load_collection",
    "load_operator",
    "load_signs",
    "mc_moments",
    "measure_vector",
    "norm",
    "norm_hp",
    "norm_slinf",
    "op_norm",
    "op_norm_exact_h2",
    "op_norm_upper",
    "operator_digest",
    "pairing",
    "pairing_step",
    "save_collection",
    "save_operator",
    "save_signs",
    "search_signs",
    "sign_normalize",
    "slinf_squared_exact",
    "square_function",
    "square_function_squared",
    "step_to_haar",
    "synthesize",
    "union_bound",
    "union_bound_below_one",
    "variance_bound_check",
    "verify",
]
