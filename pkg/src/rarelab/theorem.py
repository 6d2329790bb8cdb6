"""Monte Carlo verification of the estimator guarantees and the rarity /
dimensionality scaling laws.

Every check runs ``trials`` independent batches, each keyed by
``(seed, trial)``, and reduces them in trial order. Pass/fail decisions are
pure functions of the recorded empirical and closed-form numbers.
"""

import enum
import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import estimators as est
from .estimators import ConstraintError, MixtureSpec
from .parallel import pmap
from .rng import stream

GATE_Z = 4.0
PLANNING_Z = 2.0
VARIANCE_RTOL = 0.10
IS_RELIABLE_RSE = 0.5


class Property(enum.Enum):
    UNBIASEDNESS = "unbiasedness"
    VARIANCE_ORDERING = "variance ordering"
    RHO_FACTOR = "rho factor"
    ASSUMPTION_RESIDUAL = "assumption residual"


@dataclass(frozen=True)
class VerificationReport:
    property: Property
    spec: MixtureSpec
    trials: int
    batch_size: int
    empirical: dict
    closed_form: dict
    tolerance: float
    seed: int
    passed: bool = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "passed", bool(PASS_RULES[self.property](self.empirical, self.closed_form, self.tolerance))
        )

    def to_row(self):
        row = {
            "property": self.property.value,
            "trials": self.trials,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "tolerance": self.tolerance,
            "passed": self.passed,
        }
        row.update({f"spec_{k}": v for k, v in self.spec.to_dict().items()})
        row.update({f"empirical_{k}": v for k, v in self.empirical.items()})
        row.update({f"closed_form_{k}": v for k, v in self.closed_form.items()})
        return row


def _unbiased_pass(emp, cf, z):
    mu = cf["mu"]
    return (
        abs(emp["mu1_grand_mean"] - mu) <= z * cf["mu1_standard_error"]
        and abs(emp["mu2_grand_mean"] - mu) <= z * cf["mu2_standard_error"]
    )


def _within(x, target, rtol):
    if target == 0.0:
        return x == 0.0
    return abs(x / target - 1.0) <= rtol


def _ordering_pass(emp, cf, rtol):
    return (
        emp["var_mu2"] <= emp["var_mu1"] * (1.0 + rtol)
        and _within(emp["var_mu1"], cf["var_mu1"], rtol)
        and _within(emp["var_mu2"], cf["var_mu2"], rtol)
    )


def _rho_pass(emp, cf, rtol):
    # ratio >= 1/rho, written multiplicatively so rho == 1 survives rounding
    return cf["ratio"] * cf["rho_b"] >= 1.0 - 1e-12 and _within(emp["ratio"], cf["ratio"], rtol)


def _residual_pass(emp, cf, z):
    return abs(emp["residual"] - cf["residual"]) <= z * emp["residual_standard_error"]


PASS_RULES = {
    Property.UNBIASEDNESS: _unbiased_pass,
    Property.VARIANCE_ORDERING: _ordering_pass,
    Property.RHO_FACTOR: _rho_pass,
    Property.ASSUMPTION_RESIDUAL: _residual_pass,
}


def _trial_block(spec, batch_size, seed, mu2_estimator, trials):
    out = np.empty((len(trials), 2, spec.dim))
    for k, t in enumerate(trials):
        batch = est.sample_mixture(spec, batch_size, seed, trial=t)
        out[k, 0] = est.estimate_mu1(batch).mean
        out[k, 1] = mu2_estimator(batch).mean
    return out


def batch_means(spec, batch_size, trials, seed, mu2_estimator=est.estimate_mu2, jobs=1):
    """Per-trial estimator means, shape ``(trials, 2, dim)``; index 0 is mu1."""
    if int(trials) < 1 or int(batch_size) < 1:
        raise ConstraintError("trials and batch_size must be positive")
    blocks = [range(s, min(s + 256, trials)) for s in range(0, trials, 256)]
    fn = functools.partial(_trial_block, spec, int(batch_size), seed, mu2_estimator)
    return np.concatenate(pmap(fn, blocks, jobs))


def _check_args(spec, batch_size, trials):
    if not isinstance(spec, MixtureSpec):
        raise ConstraintError("spec must be a MixtureSpec")
    if trials < 100:
        raise ConstraintError(f"need at least 100 trials, got {trials}")
    if batch_size < 2:
        raise ConstraintError(f"batch_size must be >= 2, got {batch_size}")


def _first_coord(spec):
    # scalar summaries track the coordinate with the largest signal
    return int(np.argmax(np.abs(spec.mean_vector)))


def verify_unbiasedness(spec, batch_size, trials, seed, mu2_estimator=est.estimate_mu2, jobs=1, z=GATE_Z):
    """Grand means of both estimators against ``rho_b * mean_b``."""
    _check_args(spec, batch_size, trials)
    cf = est.closed_form_moments(spec)
    j = _first_coord(spec)
    means = batch_means(spec, batch_size, trials, seed, mu2_estimator, jobs)[:, :, j]
    scale = batch_size * trials
    empirical = {
        "mu1_grand_mean": float(means[:, 0].mean()),
        "mu2_grand_mean": float(means[:, 1].mean()),
        "mu1_empirical_standard_error": float(means[:, 0].std(ddof=1) / math.sqrt(trials)),
        "mu2_empirical_standard_error": float(means[:, 1].std(ddof=1) / math.sqrt(trials)),
    }
    closed = {
        "mu": float(cf.mu[j]),
        "mu1_standard_error": math.sqrt(cf.var_mu1_coords[j] / scale),
        "mu2_standard_error": math.sqrt(cf.var_mu2_coords[j] / scale),
    }
    return VerificationReport(Property.UNBIASEDNESS, spec, trials, batch_size, empirical, closed, z, seed)


def _across_trial(spec, batch_size, trials, seed, jobs):
    means = batch_means(spec, batch_size, trials, seed, jobs=jobs)
    # trace of the across-trial covariance, to match the closed-form trace
    v1 = float(np.var(means[:, 0], axis=0, ddof=1).sum())
    v2 = float(np.var(means[:, 1], axis=0, ddof=1).sum())
    return v1, v2


def verify_variance_ordering(spec, batch_size, trials, seed, jobs=1, rtol=VARIANCE_RTOL):
    """Across-trial variances of both estimators against ``sigma^2 / batch``."""
    _check_args(spec, batch_size, trials)
    cf = est.closed_form_moments(spec)
    v1, v2 = _across_trial(spec, batch_size, trials, seed, jobs)
    empirical = {"var_mu1": v1, "var_mu2": v2}
    closed = {"var_mu1": cf.var_mu1 / batch_size, "var_mu2": cf.var_mu2 / batch_size}
    return VerificationReport(Property.VARIANCE_ORDERING, spec, trials, batch_size, empirical, closed, rtol, seed)


def verify_rho_factor(spec, batch_size, trials, seed, jobs=1, rtol=VARIANCE_RTOL):
    """Variance ratio ``Var(mu1)/Var(mu2)`` against ``1/rho_b``.

    Only meaningful when squared gradients are independent of the critical
    event; other specs are rejected.
    """
    if not spec.assumption_satisfied:
        raise ConstraintError(
            "rho factor needs E[|X|^2 1_B] = E[|X|^2] P(B); "
            f"spec has var_a={spec.var_a}, var_b={spec.var_b}, |m|^2/dim="
            f"{float(spec.mean_vector @ spec.mean_vector) / spec.dim}"
        )
    _check_args(spec, batch_size, trials)
    cf = est.closed_form_moments(spec)
    v1, v2 = _across_trial(spec, batch_size, trials, seed, jobs)
    empirical = {"var_mu1": v1, "var_mu2": v2, "ratio": v1 / v2 if v2 > 0 else math.inf}
    closed = {"ratio": cf.ratio, "rho_b": spec.rho_b, "inverse_rho": 1.0 / spec.rho_b}
    return VerificationReport(Property.RHO_FACTOR, spec, trials, batch_size, empirical, closed, rtol, seed)


def verify_assumption(spec, n, seed, z=GATE_Z):
    """Empirical independence residual against its exact mixture value."""
    batch = est.sample_mixture(spec, n, seed)
    resid, se = est.assumption_residual(batch)
    empirical = {"residual": resid, "residual_standard_error": se}
    closed = {"residual": est.assumption_residual_closed_form(spec)}
    return VerificationReport(Property.ASSUMPTION_RESIDUAL, spec, 1, n, empirical, closed, z, seed)


def required_sample_size(spec, relative_error, confidence_z=PLANNING_Z, kind=est.EstimatorKind.MU1):
    """Batch size for which ``z * SE <= relative_error * |mu|``."""
    if not relative_error > 0:
        raise ConstraintError("relative_error must be positive")
    cf = est.closed_form_moments(spec)
    signal = float(cf.mu @ cf.mu)
    if signal == 0.0:
        raise ConstraintError("relative error is undefined for a zero mean")
    var = cf.var_mu1 if est.EstimatorKind(kind) is est.EstimatorKind.MU1 else cf.var_mu2
    x = confidence_z**2 * var / (relative_error**2 * signal)
    # strip last-ulp noise so e.g. 7999600.000000001 does not round up
    return max(1, math.ceil(x * (1.0 - 1e-12)))


@dataclass(frozen=True)
class ScalingCurve:
    x_values: tuple
    y_values: tuple
    fitted_slope: float
    intercept: float
    fit_r2: float
    axes: str
    reliable: tuple = ()

    def __post_init__(self):
        if len(self.x_values) != len(self.y_values):
            raise ConstraintError("x_values and y_values differ in length")
        if any(b <= a for a, b in zip(self.x_values, self.x_values[1:])):
            raise ConstraintError("x_values must be strictly increasing")
        if not self.reliable:
            object.__setattr__(self, "reliable", (True,) * len(self.x_values))

    @property
    def slope_defined(self):
        return math.isfinite(self.fitted_slope)


def ols_fit(x, y):
    """Slope, intercept and R^2 of an ordinary least-squares line."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size < 2:
        return math.nan, math.nan, math.nan
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), min(max(r2, 0.0), 1.0)


def longtail_curve(rho_grid, var_a, relative_error, z=PLANNING_Z, kind=est.EstimatorKind.MU1, mean_b=1.0):
    """Required batch size against event frequency, fitted on log-log axes.

    Each grid point uses the independence-satisfying spec with critical mean
    ``mean_b`` and ``var_b = var_a - mean_b**2``.
    """
    rho = np.asarray(sorted(rho_grid), dtype=float)
    if rho.size == 0:
        raise ConstraintError("empty rho grid")
    if np.any(rho <= 0) or np.any(rho > 0.5):
        raise ConstraintError("rho grid must lie in (0, 0.5]")
    var_b = var_a - mean_b**2
    if var_b < 0:
        raise ConstraintError("var_a must be at least mean_b**2 to satisfy independence")
    n = [
        required_sample_size(MixtureSpec(float(r), (mean_b,), var_a, var_b), relative_error, z, kind)
        for r in rho
    ]
    slope, icpt, r2 = ols_fit(np.log(rho), np.log(n))
    return ScalingCurve(tuple(rho.tolist()), tuple(float(v) for v in n), slope, icpt, r2, "loglog")


def is_second_moment_exact(dim, shift):
    """``E_q[w^2]`` for target ``N(0, I)`` and proposal ``N(shift*1, I)``."""
    return math.exp(dim * shift**2)


def _is_trial(dim, shift, n, seed, trial):
    rng = stream(seed, "is-dim", dim, trial)
    x = shift + rng.standard_normal((n, dim))
    # log w = log N(x;0,I) - log N(x;shift,I)
    log_w = -shift * x.sum(axis=1) + 0.5 * dim * shift**2
    return float(np.exp(2.0 * log_w).sum())


def is_second_moment(dim, shift, n, trials, seed, jobs=1):
    """Monte Carlo ``E_q[w^2]`` over ``n * trials`` proposal draws."""
    if n < 1 or trials < 1:
        raise ConstraintError("n and trials must be positive")
    fn = functools.partial(_is_trial, dim, shift, n, seed)
    return float(sum(pmap(fn, range(trials), jobs)) / (n * trials))


def is_relative_standard_error(dim, shift, total):
    """Relative SE of the ``w^2`` sample mean: ``sqrt((E[w^4]/E[w^2]^2 - 1) / total)``."""
    return math.sqrt(math.expm1(4.0 * dim * shift**2) / total)


def is_dimension_sweep(dim_grid, shift_per_dim, n, trials, seed, jobs=1):
    """Log second moment of the likelihood ratio against dimension.

    A point is flagged unreliable when the relative standard error of its
    estimate exceeds ``IS_RELIABLE_RSE`` at this budget. Flagged points stay
    in the curve and in the fit; their downward bias is part of what the
    sweep shows.
    """
    dims = [int(d) for d in dim_grid]
    if not dims or any(d < 1 for d in dims):
        raise ConstraintError("dimension grid must hold positive integers")
    if shift_per_dim < 0:
        raise ConstraintError("shift_per_dim must be non-negative")
    if n < 1 or trials < 1:
        raise ConstraintError("n and trials must be positive")
    ys = [math.log(is_second_moment(d, shift_per_dim, n, trials, seed, jobs)) for d in dims]
    ok = [is_relative_standard_error(d, shift_per_dim, n * trials) <= IS_RELIABLE_RSE for d in dims]
    slope, icpt, r2 = ols_fit(dims, ys)
    return ScalingCurve(tuple(dims), tuple(ys), slope, icpt, r2, "semilogy", tuple(ok))
