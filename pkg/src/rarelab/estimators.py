"""Event-labelled gradient samples, the two-component mixture model and the
full-population / critical-only Monte Carlo gradient estimators.

A gradient sample ``X`` carries a label saying whether the underlying draw
belonged to the normal event (zero-mean contribution) or to the rare
critical event. Labels are attributes of the draw, never a function of the
value of ``X``.

Multi-dimensional conventions: variances are per-coordinate Bessel-corrected
variances summed over coordinates (trace), and SNR is ``||mu||^2 / trace``.
"""

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import stream


class ConstraintError(ValueError):
    """Raised when a model object violates its invariants."""


class EventLabel(enum.Enum):
    NORMAL = "normal"
    CRITICAL = "critical"


class EstimatorKind(enum.Enum):
    MU1 = "mu1"
    MU2 = "mu2"


@dataclass(frozen=True)
class LabeledSample:
    value: np.ndarray
    label: EventLabel

    def __post_init__(self):
        v = np.atleast_1d(np.asarray(self.value, dtype=float))
        if v.ndim != 1:
            raise ConstraintError("sample value must be a vector")
        if not np.all(np.isfinite(v)):
            raise ConstraintError("sample value must be finite")
        object.__setattr__(self, "value", v)

    @property
    def critical(self):
        return self.label is EventLabel.CRITICAL


class SampleBatch:
    """Column storage for a batch of labelled samples.

    ``values`` has shape ``(n, dim)`` and ``critical`` is a boolean mask of
    length ``n``. Iterating yields :class:`LabeledSample` objects.
    """

    def __init__(self, values, critical):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        critical = np.asarray(critical, dtype=bool)
        if values.ndim != 2 or critical.shape != (values.shape[0],):
            raise ConstraintError(
                f"values {values.shape} and labels {critical.shape} do not line up"
            )
        if not np.all(np.isfinite(values)):
            raise ConstraintError("sample values must be finite")
        values.flags.writeable = False
        critical.flags.writeable = False
        self.values = values
        self.critical = critical

    @classmethod
    def from_samples(cls, samples):
        samples = list(samples)
        if not samples:
            return cls(np.empty((0, 1)), np.empty(0, dtype=bool))
        dims = {s.value.shape[0] for s in samples}
        if len(dims) != 1:
            raise ConstraintError(f"mixed sample dimensions {sorted(dims)}")
        return cls(
            np.stack([s.value for s in samples]),
            np.array([s.critical for s in samples]),
        )

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]

    def __len__(self):
        return self.n

    def __iter__(self):
        for v, c in zip(self.values, self.critical):
            yield LabeledSample(v.copy(), EventLabel.CRITICAL if c else EventLabel.NORMAL)

    def __getitem__(self, i):
        return LabeledSample(
            self.values[i].copy(),
            EventLabel.CRITICAL if self.critical[i] else EventLabel.NORMAL,
        )

    def __eq__(self, other):
        if not isinstance(other, SampleBatch):
            return NotImplemented
        return np.array_equal(self.values, other.values) and np.array_equal(
            self.critical, other.critical
        )


def as_batch(samples):
    if isinstance(samples, SampleBatch):
        return samples
    return SampleBatch.from_samples(samples)


@dataclass(frozen=True)
class MixtureSpec:
    """Sampling distribution: with probability ``rho_b`` a critical draw
    ``N(mean_b, var_b I)``, otherwise a normal draw ``N(0, var_a I)``.

    ``component="uniform"`` swaps both Gaussians for uniforms with the same
    mean and variance.
    """

    rho_b: float
    mean_b: tuple
    var_a: float
    var_b: float
    component: str = "gaussian"
    dim: int = field(init=False)

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean_b, dtype=float))
        if m.ndim != 1 or m.size == 0:
            raise ConstraintError("mean_b must be a non-empty vector")
        object.__setattr__(self, "mean_b", tuple(float(x) for x in m))
        object.__setattr__(self, "dim", m.size)
        if not (0.0 < self.rho_b <= 1.0):
            raise ConstraintError(f"rho_b must lie in (0, 1], got {self.rho_b}")
        if not np.all(np.isfinite(m)):
            raise ConstraintError("mean_b must be finite")
        if not np.any(m != 0.0):
            raise ConstraintError("mean_b must not be all-zero")
        if not (self.var_a >= 0.0 and self.var_b >= 0.0):
            raise ConstraintError("var_a and var_b must be non-negative")
        if not (math.isfinite(self.var_a) and math.isfinite(self.var_b)):
            raise ConstraintError("var_a and var_b must be finite")
        if self.component not in ("gaussian", "uniform"):
            raise ConstraintError(f"unknown component family {self.component!r}")

    @classmethod
    def satisfying(cls, rho_b, mean_b, var_b, component="gaussian"):
        """Spec whose normal-component variance makes ``E[|X|^2 | B] = E[|X|^2]``."""
        m = np.atleast_1d(np.asarray(mean_b, dtype=float))
        var_a = var_b + float(m @ m) / m.size
        return cls(rho_b, tuple(m), var_a, var_b, component)

    @property
    def mean_vector(self):
        return np.array(self.mean_b)

    @property
    def assumption_satisfied(self):
        m2 = float(self.mean_vector @ self.mean_vector)
        lhs = self.dim * self.var_a
        rhs = self.dim * self.var_b + m2
        return math.isclose(lhs, rhs, rel_tol=1e-12, abs_tol=1e-12)

    def to_dict(self):
        return {
            "rho_b": self.rho_b,
            "mean_b": list(self.mean_b),
            "var_a": self.var_a,
            "var_b": self.var_b,
            "component": self.component,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            rho_b=float(d["rho_b"]),
            mean_b=tuple(np.atleast_1d(d["mean_b"])),
            var_a=float(d["var_a"]),
            var_b=float(d["var_b"]),
            component=d.get("component", "gaussian"),
        )


@dataclass(frozen=True)
class GradientEstimate:
    mean: np.ndarray
    sample_variance: float
    n: int
    kind: EstimatorKind
    degenerate: bool = False

    @property
    def standard_error(self):
        return math.sqrt(self.sample_variance / self.n)


@dataclass(frozen=True)
class ClosedFormMoments:
    mu: np.ndarray
    var_mu1: float
    var_mu2: float
    snr_mu1: float
    snr_mu2: float
    ratio: float
    var_mu1_coords: np.ndarray
    var_mu2_coords: np.ndarray


def _draw_component(rng, component, n, mean, var):
    if component == "gaussian":
        return mean + math.sqrt(var) * rng.standard_normal((n, mean.size))
    half = math.sqrt(3.0 * var)
    return mean + rng.uniform(-half, half, size=(n, mean.size))


def sample_mixture(spec, n, seed, trial=0):
    """Draw ``n`` labelled samples from ``spec``.

    The stream is keyed by ``(seed, trial)``, so ``trial`` selects an
    independent replicate without touching any other.
    """
    if not isinstance(spec, MixtureSpec):
        raise ConstraintError("spec must be a MixtureSpec")
    if int(n) < 1:
        raise ConstraintError(f"n must be >= 1, got {n}")
    n = int(n)
    rng = stream(seed, "mixture", trial)
    critical = rng.random(n) < spec.rho_b
    values = _draw_component(rng, spec.component, n, np.zeros(spec.dim), spec.var_a)
    k = int(critical.sum())
    if k:
        values[critical] = _draw_component(rng, spec.component, k, spec.mean_vector, spec.var_b)
    return SampleBatch(values, critical)


def _trace_variance(contrib):
    n = contrib.shape[0]
    if n < 2:
        return 0.0
    return float(np.var(contrib, axis=0, ddof=1).sum())


def _estimate(contrib, kind):
    n = contrib.shape[0]
    return GradientEstimate(
        mean=contrib.mean(axis=0),
        sample_variance=_trace_variance(contrib),
        n=n,
        kind=kind,
        degenerate=n < 2,
    )


def estimate_mu1(samples):
    """Full-population estimator: plain average of every gradient sample."""
    batch = as_batch(samples)
    if batch.n == 0:
        raise ConstraintError("cannot estimate from an empty batch")
    return _estimate(batch.values, EstimatorKind.MU1)


def estimate_mu2(samples):
    """Critical-only estimator.

    Normal samples contribute zero but still count in the divisor, so the
    mean is ``sum(critical values) / n`` with ``n`` the full batch size.
    """
    batch = as_batch(samples)
    if batch.n == 0:
        raise ConstraintError("cannot estimate from an empty batch")
    contrib = np.where(batch.critical[:, None], batch.values, 0.0)
    return _estimate(contrib, EstimatorKind.MU2)


def closed_form_moments(spec):
    rho = spec.rho_b
    m = spec.mean_vector
    second_b = spec.var_b + m**2
    var1 = (1.0 - rho) * spec.var_a + rho * second_b - (rho * m) ** 2
    var2 = rho * second_b - (rho * m) ** 2
    # per-coordinate values can round slightly negative when rho == 1
    var1 = np.maximum(var1, 0.0)
    var2 = np.maximum(var2, 0.0)
    mu = rho * m
    signal = float(mu @ mu)
    v1, v2 = float(var1.sum()), float(var2.sum())
    return ClosedFormMoments(
        mu=mu,
        var_mu1=v1,
        var_mu2=v2,
        snr_mu1=signal / v1 if v1 > 0 else math.inf,
        snr_mu2=signal / v2 if v2 > 0 else math.inf,
        ratio=v1 / v2 if v2 > 0 else math.inf,
        var_mu1_coords=var1,
        var_mu2_coords=var2,
    )


def assumption_residual_closed_form(spec):
    """Exact signed ``E[|X|^2 1_B] - E[|X|^2] E[1_B]`` for the mixture."""
    rho = spec.rho_b
    m2 = float(spec.mean_vector @ spec.mean_vector)
    sq_b = spec.dim * spec.var_b + m2
    sq_a = spec.dim * spec.var_a
    return rho * (1.0 - rho) * (sq_b - sq_a)


def _assumption_terms(batch):
    sq = np.einsum("ij,ij->i", batch.values, batch.values)
    ind = batch.critical.astype(float)
    return sq, ind


def assumption_residual(samples):
    """Signed empirical residual and its delta-method standard error."""
    batch = as_batch(samples)
    if batch.n == 0:
        raise ConstraintError("cannot check the assumption on an empty batch")
    sq, ind = _assumption_terms(batch)
    e_sq_ind = float(np.mean(sq * ind))
    e_sq = float(np.mean(sq))
    rho = float(np.mean(ind))
    resid = e_sq_ind - e_sq * rho
    if batch.n < 2:
        return resid, 0.0
    influence = (sq * ind - e_sq_ind) - rho * (sq - e_sq) - e_sq * (ind - rho)
    return resid, float(np.std(influence, ddof=1) / math.sqrt(batch.n))


def check_assumption(samples):
    """``|E^[|X|^2 1_B] - E^[|X|^2] E^[1_B]|`` over the batch."""
    return abs(assumption_residual(samples)[0])


def snr(estimate, true_mu):
    """Signal-to-noise ratio ``|true_mu|^2 / sample_variance``."""
    if not estimate.sample_variance > 0:
        raise ConstraintError("zero sample variance: SNR undefined for a degenerate batch")
    mu = np.atleast_1d(np.asarray(true_mu, dtype=float))
    return float(mu @ mu) / estimate.sample_variance
