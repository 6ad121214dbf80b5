"""Experiment driver: config ingestion, operator generation, reports.

Subcommands: run (whole pipeline), formulas (parameter arithmetic), moments
(randomized-form moment table), check-jones (collection validation), gen
(operator files).  Every flag mirrors a config-file key and overrides it;
reports are deterministic functions of (config, seed), so wall-clock timings
go to stdout and never into the report file.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
import time
from dataclasses import dataclass, fields
from fractions import Fraction

import numpy as np

from . import factorization as fz
from .blocks import gamlen_gaudet, jones_check, load_collection
from .dyadic import dimension, measure_vector
from .norms import SpaceTag
from .operators import (
    HaarOperator,
    check_large_diagonal,
    load_operator,
    op_norm_exact_h2,
    op_norm_upper,
    operator_digest,
    save_operator,
    sign_normalize,
)
from .randomization import (
    ENUMERATION_CAP,
    calibrate_eta0,
    exact_moments,
    mc_moments,
    search_signs,
    union_bound,
    variance_bound_check,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIAGONAL = 4
EXIT_JONES = 5
EXIT_SIGN_SEARCH = 6
EXIT_ASSEMBLY = 7
EXIT_VERIFICATION = 8

MAX_MATERIALIZED_LEVEL = 11


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """One run, fully determined: space, parameters, operator source, seed."""

    space: str = "hp"
    p: float = 2.0
    n: int = 2
    N: int | None = None
    m0: int | None = None
    delta: float | None = None
    gamma: float | None = None
    eta: float | None = None
    eta0: float | None = None
    eta0_quantile: float = 0.9
    eta0_samples: int = 200
    seed: int = 0
    budget: int = 10000
    samples: int = 10000
    operator: str | None = None
    generator: str | None = None
    out: str | None = None

    def space_tag(self) -> SpaceTag:
        if self.space == "hp":
            return SpaceTag.hp(self.p)
        if self.space == "hp-dual":
            return SpaceTag.hp_dual(self.p)
        if self.space == "slinf":
            return SpaceTag.slinf()
        raise ConfigError(f"unknown space {self.space!r} (hp, hp-dual, slinf)")

    def validate(self, *, require_delta: bool = True) -> None:
        if (self.operator is None) == (self.generator is None):
            raise ConfigError(
                "exactly one operator source is required: "
                "either 'operator' (file) or 'generator' (spec string)"
            )
        if require_delta and self.delta is None:
            raise ConfigError("delta is required")
        if self.delta is not None and self.delta <= 0:
            raise ConfigError(f"delta must be positive, got {self.delta}")
        self.space_tag()

    def to_json(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_CONFIG_KEYS = {f.name for f in fields(ExperimentConfig)}


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    """Config file first, then any explicitly set flag on top of it."""
    data: dict = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path}: {exc}") from exc
        unknown = set(data) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"config {path}: unknown keys {sorted(unknown)}")
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    try:
        return ExperimentConfig(**data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# operator generation

_GENERATOR_RE = re.compile(r"^([a-z-]+)(?:\(([^)]*)\))?$")


def gen_operator(spec: str, N: int, seed: int, *, p: float = 2.0) -> HaarOperator:
    """Deterministic operator families for experiments.

    identity            the diagonal of interval measures
    diag(c)             c times the identity, achieved diagonal ratio c
    diag-perturb(eps)   Id + eps*R, R with off-diagonal entries on the
                        |K|^(1/p)|K'|^(1-1/p) envelope, zero diagonal,
                        rescaled to unit quadratic-mean operator norm
    dense-random(g)     full random envelope entries, rescaled to norm g
    """
    match = _GENERATOR_RE.match(spec.strip())
    if not match:
        raise ConfigError(f"cannot parse generator spec {spec!r}")
    name, arg = match.group(1), match.group(2)
    if N > MAX_MATERIALIZED_LEVEL:
        raise ConfigError(
            f"N = {N} would materialize a {dimension(N)}x{dimension(N)} matrix; "
            f"the generator caps at N = {MAX_MATERIALIZED_LEVEL}"
        )

    def need_arg() -> float:
        if arg is None or arg.strip() == "":
            raise ConfigError(f"generator {name!r} needs a numeric argument")
        try:
            return float(Fraction(arg.strip()))
        except ValueError as exc:
            raise ConfigError(f"generator argument {arg!r} is not numeric") from exc

    if name == "identity":
        return HaarOperator.identity(N)
    if name == "diag":
        c = need_arg()
        return HaarOperator(N, np.diag(measure_vector(N) * c))
    if name in ("diag-perturb", "dense-random"):
        value = need_arg()
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
        m = measure_vector(N)
        envelope = np.outer(m ** (1.0 - 1.0 / p), m ** (1.0 / p))
        entries = rng.uniform(-1.0, 1.0, size=envelope.shape) * envelope
        if name == "diag-perturb":
            np.fill_diagonal(entries, 0.0)
            raw = HaarOperator(N, entries)
            unit = entries / op_norm_exact_h2(raw)
            return HaarOperator(N, np.diag(m) + value * unit)
        raw = HaarOperator(N, entries)
        return HaarOperator(N, entries * (value / op_norm_exact_h2(raw)))
    raise ConfigError(f"unknown generator {name!r}")


def _resolve_operator(config: ExperimentConfig) -> tuple[HaarOperator, int]:
    if config.operator is not None:
        T = load_operator(config.operator)
        if config.N is not None and config.N != T.N:
            raise ConfigError(
                f"config N = {config.N} but operator file has N = {T.N}"
            )
        return T, T.N
    if config.N is None:
        raise ConfigError("a generator source needs an explicit N")
    return gen_operator(config.generator, config.N, config.seed, p=config.p), config.N


# ---------------------------------------------------------------------------
# report plumbing


def _write_json(path: str | None, payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(text)


def _error_record(stage: str, code: int, message: str) -> dict:
    return {"error": {"stage": stage, "exit_code": code, "message": message}}


class _StageClock:
    """Accumulates wall-clock timings; printed, never written to the report."""

    def __init__(self) -> None:
        self.marks: list[tuple[str, float]] = []
        self._last = time.perf_counter()

    def mark(self, stage: str) -> None:
        now = time.perf_counter()
        self.marks.append((stage, now - self._last))
        self._last = now

    def echo(self) -> None:
        for stage, seconds in self.marks:
            print(f"  {stage}: {seconds:.3f} s")


# ---------------------------------------------------------------------------
# subcommand: run


def run(config: ExperimentConfig) -> int:
    try:
        config.validate()
        space = config.space_tag()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    clock = _StageClock()
    report: dict = {"config": config.to_json()}

    try:
        T, N = _resolve_operator(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    report["operator_digest"] = operator_digest(T)
    clock.mark("operator")

    if space.is_hilbert:
        gamma = config.gamma if config.gamma is not None else op_norm_exact_h2(T)
    else:
        gamma = config.gamma if config.gamma is not None else op_norm_upper(T, space)
    report["gamma"] = {"value": float(gamma), "measured": config.gamma is None}

    derived = fz.derive_params(config.n, config.delta, gamma, config.eta or 1)
    report["derived_reference"] = derived.to_json()
    m0 = config.m0 if config.m0 is not None else derived.m0
    if m0 + config.n > N:
        print(
            f"config error: m0 + n = {m0 + config.n} exceeds N = {N}; "
            "set m0 explicitly for desk-scale runs",
            file=sys.stderr,
        )
        return EXIT_CONFIG

    normalization = sign_normalize(T)
    Ts = normalization.operator
    clock.mark("sign-normalize")

    diagonal = check_large_diagonal(Ts, float(config.delta))
    report["diagonal"] = {
        "requested_delta": diagonal.requested_delta,
        "achieved_delta": diagonal.achieved_delta,
        "worst_interval": diagonal.worst_interval().label,
        "passes": diagonal.passes,
    }
    if not diagonal.passes:
        report.update(
            _error_record(
                "diagonal",
                EXIT_DIAGONAL,
                f"achieved diagonal ratio {diagonal.achieved_delta:.6g} "
                f"< delta = {config.delta}",
            )
        )
        _write_json(config.out, report)
        print("diagonal check failed", file=sys.stderr)
        return EXIT_DIAGONAL
    clock.mark("diagonal")

    collection = gamlen_gaudet(config.n, m0, N)
    jones = jones_check(collection, 1)
    report["jones"] = jones.summary()
    if not jones.passes:
        report.update(
            _error_record("jones", EXIT_JONES, "compatibility conditions failed")
        )
        _write_json(config.out, report)
        print("collection check failed", file=sys.stderr)
        return EXIT_JONES
    clock.mark("blocks")

    if config.eta0 is not None:
        eta0 = Fraction(config.eta0)
        report["eta0"] = {"value": float(eta0), "calibrated": False}
    else:
        measured = calibrate_eta0(
            Ts,
            collection,
            quantile=config.eta0_quantile,
            samples=config.eta0_samples,
            seed=config.seed,
        )
        eta0 = Fraction(measured)
        if eta0 <= 0:
            # an exactly diagonal operator calibrates to zero; the closed
            # formula value is positive and always keeps the separation
            eta0 = derived.eta0
        report["eta0"] = {
            "value": float(eta0),
            "calibrated": True,
            "quantile": config.eta0_quantile,
            "samples": config.eta0_samples,
            "measured_quantile": measured,
        }
    clock.mark("eta0")

    params = derived.override(N=N, m0=m0, eta0=eta0)
    if config.eta is None:
        try:
            params = params.override(eta=params.implied_eta())
        except fz.InsufficientSeparationError as exc:
            report.update(_error_record("assemble", EXIT_ASSEMBLY, str(exc)))
            _write_json(config.out, report)
            print(f"assembly failed: {exc}", file=sys.stderr)
            return EXIT_ASSEMBLY
    report["params"] = params.to_json()

    variance = variance_bound_check(T, collection, space, gamma=gamma)
    report["variance"] = {
        "norm_bound": variance.norm_bound,
        "alpha": float(variance.alpha),
        "all_pass": variance.all_pass,
        "rows": [
            dict(row.report.to_json(), bounds=row.bounds, passes=row.passes)
            for row in variance.rows
        ],
    }
    clock.mark("variance")

    search = search_signs(
        Ts, collection, float(eta0), budget=config.budget, seed=config.seed
    )
    report["sign_search"] = search.to_json()
    if not search.success:
        report.update(
            _error_record(
                "sign-search",
                EXIT_SIGN_SEARCH,
                f"no sign pattern reached eta0 = {float(eta0):.6g} within "
                f"{config.budget} attempts (best {max(search.off_diag_max, search.diag_dev_max):.6g})",
            )
        )
        _write_json(config.out, report)
        print("sign search failed", file=sys.stderr)
        return EXIT_SIGN_SEARCH
    clock.mark("sign-search")

    try:
        result = fz.assemble(T, params, collection, search.signs, space)
    except fz.LargeDiagonalError as exc:
        report.update(_error_record("diagonal", EXIT_DIAGONAL, str(exc)))
        _write_json(config.out, report)
        print(f"diagonal check failed: {exc}", file=sys.stderr)
        return EXIT_DIAGONAL
    except fz.BlockConditionError as exc:
        report.update(_error_record("jones", EXIT_JONES, str(exc)))
        _write_json(config.out, report)
        print(f"collection check failed: {exc}", file=sys.stderr)
        return EXIT_JONES
    except fz.AlmostDiagonalError as exc:
        report.update(_error_record("sign-search", EXIT_SIGN_SEARCH, str(exc)))
        _write_json(config.out, report)
        print(f"sign check failed: {exc}", file=sys.stderr)
        return EXIT_SIGN_SEARCH
    except fz.FactorizationError as exc:
        report.update(_error_record("assemble", EXIT_ASSEMBLY, str(exc)))
        _write_json(config.out, report)
        print(f"assembly failed: {exc}", file=sys.stderr)
        return EXIT_ASSEMBLY
    report["factorization"] = result.to_json()
    clock.mark("assemble")

    verification = fz.verify(result, T, space)
    report["verification"] = verification.to_json()
    report["tolerances"] = {
        "residual": verification.tolerance,
        "dual_norm_rel": 1e-3,
    }
    clock.mark("verify")

    _write_json(config.out, report)
    print(
        f"residual = {verification.residual:.3e} ({verification.residual_kind}), "
        f"norm product = {verification.norm_product:.6g} "
        f"<= {verification.norm_product_bound:.6g}: "
        f"{'ok' if verification.passes else 'FAILED'}"
    )
    clock.mark("report")
    clock.echo()
    if not verification.passes:
        return EXIT_VERIFICATION
    return EXIT_OK


# ---------------------------------------------------------------------------
# subcommand: formulas


def report_formulas(n: int, delta, gamma, eta, *, as_json: bool = False) -> dict:
    params = fz.derive_params(n, delta, gamma, eta)
    bound = union_bound(n, params.m0, float(params.gamma), float(params.eta0))
    q = params.neumann_ratio()
    payload = {
        "n": n,
        "eta0": {"exact": str(params.eta0), "float": float(params.eta0)},
        "m0": params.m0,
        "N": params.N,
        "union_bound": bound,
        "union_bound_below_one": bound < 1.0,
        "neumann_q": float(q),
        "neumann_q_below_one": q < 1,
        "diagonal_margin_positive": params.delta - params.eta0 * 2**n > 0,
        "m0_plus_n_le_N": params.m0 + n <= params.N,
    }
    if as_json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(f"eta0 = {params.eta0} = {float(params.eta0):.6e}")
        print(f"m0   = {params.m0}")
        print(f"N    = {params.N}   (m0 + n = {params.m0 + n})")
        print(f"union bound = {bound:.6e}  (< 1: {bound < 1.0})")
        print(f"inversion ratio q = {float(q):.6e}  (< 1: {q < 1})")
    return payload


# ---------------------------------------------------------------------------
# subcommand: moments


def run_moments(config: ExperimentConfig, csv_path: str | None) -> int:
    try:
        config.validate(require_delta=False)
        space = config.space_tag()
        T, N = _resolve_operator(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    m0 = config.m0 if config.m0 is not None else 0
    if m0 + config.n > N:
        print(f"config error: m0 + n = {m0 + config.n} exceeds N = {N}", file=sys.stderr)
        return EXIT_CONFIG
    collection = gamlen_gaudet(config.n, m0, N)
    gamma = config.gamma
    if gamma is None:
        gamma = op_norm_exact_h2(T) if space.is_hilbert else op_norm_upper(T, space)

    variance = variance_bound_check(T, collection, space, gamma=gamma)
    rows = []
    mismatches = 0
    targets = collection.targets
    for destination in targets:
        for source in targets:
            if source == destination:
                continue
            rows.append(((source, destination), "cross"))
    for target in targets:
        rows.append((target, "deviation"))

    table = []
    for key, kind in rows:
        if kind == "cross":
            m = len(collection.family(key[0])) + len(collection.family(key[1]))
            closed = next(
                r
                for r in variance.rows
                if r.report.kind == "cross"
                and r.report.target == f"{key[0].label}->{key[1].label}"
            )
        else:
            m = len(collection.family(key))
            closed = next(
                r
                for r in variance.rows
                if r.report.kind == "deviation" and r.report.target == key.label
            )
        if m <= ENUMERATION_CAP:
            rep = exact_moments(T, collection, key)
            agree = rep.second_moment == closed.report.second_moment
            mean_zero = rep.mean == 0
        else:
            rep = mc_moments(
                T, collection, key, samples=config.samples, seed=config.seed
            )
            agree = None
            mean_zero = None
        if agree is False or mean_zero is False:
            mismatches += 1
        table.append(
            dict(
                rep.to_json(),
                closed_form=float(closed.report.second_moment),
                bound=closed.report.bound,
                bounds=closed.bounds,
                bound_passes=closed.passes,
                matches_closed_form=agree,
                mean_is_zero=mean_zero,
            )
        )

    payload = {
        "config": config.to_json(),
        "operator_digest": operator_digest(T),
        "alpha": float(variance.alpha),
        "norm_bound": variance.norm_bound,
        "rows": table,
        "all_bounds_pass": variance.all_pass,
        "mismatches": mismatches,
    }
    _write_json(config.out, payload)
    if csv_path is not None:
        header = (
            "pair,kind,method,mean,second_moment,closed_form,bound,passes\n"
        )
        with open(csv_path, "w", encoding="ascii") as fh:
            fh.write(header)
            for row in table:
                fh.write(
                    f"{row['pair']},{row['kind']},{row['method']},"
                    f"{row['mean']['float']!r},{row['second_moment']['float']!r},"
                    f"{row['closed_form']!r},{row['bound']!r},{row['bound_passes']}\n"
                )
    if mismatches or not variance.all_pass:
        print("moment checks FAILED", file=sys.stderr)
        return EXIT_VERIFICATION
    print(f"{len(table)} moment rows, all checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# subcommand: check-jones


def run_check_jones(args: argparse.Namespace) -> int:
    try:
        if args.collection is not None:
            collection = load_collection(args.collection)
        else:
            if args.n is None or args.m0 is None:
                print(
                    "config error: need --collection or both --n and --m0",
                    file=sys.stderr,
                )
                return EXIT_CONFIG
            collection = gamlen_gaudet(args.n, args.m0, args.N)
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = jones_check(collection, args.kappa)
    print(json.dumps(report.summary(), indent=2, sort_keys=True))
    return EXIT_OK if report.passes else EXIT_JONES


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its keys")
    parser.add_argument("--space", choices=["hp", "hp-dual", "slinf"])
    parser.add_argument("--p", type=float)
    parser.add_argument("--n", type=int)
    parser.add_argument("--N", type=int)
    parser.add_argument("--m0", type=int)
    parser.add_argument("--delta", type=float)
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--eta", type=float)
    parser.add_argument("--eta0", type=float)
    parser.add_argument("--eta0-quantile", dest="eta0_quantile", type=float)
    parser.add_argument("--eta0-samples", dest="eta0_samples", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--budget", type=int)
    parser.add_argument("--samples", type=int)
    parser.add_argument("--operator", help="operator file path")
    parser.add_argument("--generator", help="generator spec, e.g. diag-perturb(0.05)")
    parser.add_argument("--out", help="report file path (default: stdout)")


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {
        key: getattr(args, key) for key in _CONFIG_KEYS if hasattr(args, key)
    }
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="haarfactor",
        description="factor the identity of a small Haar system through "
        "a large-diagonal operator, verifying every inequality on the way",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="full pipeline, JSON report")
    _add_config_flags(p_run)

    p_formulas = sub.add_parser("formulas", help="derived constants and flags")
    p_formulas.add_argument("--n", type=int, required=True)
    p_formulas.add_argument("--delta", type=str, required=True)
    p_formulas.add_argument("--gamma", type=str, required=True)
    p_formulas.add_argument("--eta", type=str, required=True)
    p_formulas.add_argument("--json", action="store_true")

    p_moments = sub.add_parser("moments", help="moment table for one operator")
    _add_config_flags(p_moments)
    p_moments.add_argument("--csv", help="also write a CSV table")

    p_jones = sub.add_parser("check-jones", help="validate a block collection")
    p_jones.add_argument("--collection", help="collection file")
    p_jones.add_argument("--n", type=int)
    p_jones.add_argument("--m0", type=int)
    p_jones.add_argument("--N", type=int)
    p_jones.add_argument("--kappa", type=int, default=1)

    p_gen = sub.add_parser("gen", help="generate an operator file")
    p_gen.add_argument("--generator", required=True)
    p_gen.add_argument("--N", type=int, required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--p", type=float, default=2.0)
    p_gen.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        try:
            config = _config_from_args(args)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except OSError as exc:
            print(f"i/o error: {exc}", file=sys.stderr)
            return EXIT_IO
        return run(config)
    if args.command == "formulas":
        try:
            report_formulas(
                args.n,
                Fraction(args.delta),
                Fraction(args.gamma),
                Fraction(args.eta),
                as_json=args.json,
            )
        except (ValueError, ZeroDivisionError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        return EXIT_OK
    if args.command == "moments":
        try:
            config = _config_from_args(args)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except OSError as exc:
            print(f"i/o error: {exc}", file=sys.stderr)
            return EXIT_IO
        return run_moments(config, args.csv)
    if args.command == "check-jones":
        return run_check_jones(args)
    if args.command == "gen":
        try:
            T = gen_operator(args.generator, args.N, args.seed, p=args.p)
            save_operator(T, args.out)
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        except OSError as exc:
            print(f"i/o error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"{args.out}: {operator_digest(T)}")
        return EXIT_OK
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
