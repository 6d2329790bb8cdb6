"""Score-function gradients on driving episodes, full-population or
restricted to critical episodes, plus a finite-difference oracle and a plain
gradient-ascent trainer.

An episode contributes ``(return - baseline) * sum_t d log pi(a_t|s_t)/d theta``.
Filtered modes zero the contributions of normal episodes but still divide by
the whole batch size. ``FILTERED_WINDOW`` also zeroes per-step score terms
outside the critical window.
"""

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import driving
from .estimators import ConstraintError, EstimatorKind, EventLabel, GradientEstimate
from .rng import derive_seed

GATE_Z = 4.0


class GradientMode(enum.Enum):
    FULL = "full"
    FILTERED_EPISODE = "filtered_episode"
    FILTERED_WINDOW = "filtered_window"


def summary_from_trajectories(trajectories):
    """Build an :class:`~rarelab.driving.EpisodeSummary` from trajectory objects."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ConstraintError("empty trajectory batch")
    codes = {driving.Outcome.UNEVENTFUL: 0, driving.Outcome.NEAR_MISS: 1, driving.Outcome.CRASH: 2}
    rets, outs, full, win, conf = [], [], [], [], []
    for tr in trajectories:
        label, window = driving.classify_trajectory(tr)
        scores = np.array([s.log_policy_gradient for s in tr.steps])
        rets.append(tr.total_return)
        outs.append(codes[tr.outcome])
        full.append(scores.sum(axis=0))
        if label is EventLabel.CRITICAL:
            win.append(scores[window[0] : window[1] + 1].sum(axis=0))
        else:
            win.append(np.zeros(scores.shape[1]))
        conf.append(tr.conflict_onset is not None)
    return driving.EpisodeSummary(
        np.array(rets), np.array(outs), np.array(full), np.array(win), np.array(conf)
    )


def episode_contributions(summary, baseline, mode):
    """Per-episode gradient contributions, shape ``(n, 3)``."""
    mode = GradientMode(mode)
    adv = summary.total_return - baseline
    if mode is GradientMode.FULL:
        return adv[:, None] * summary.score_sum
    keep = summary.critical[:, None]
    scores = summary.score_sum if mode is GradientMode.FILTERED_EPISODE else summary.window_score_sum
    return np.where(keep, adv[:, None] * scores, 0.0)


def reinforce_gradient(trajectories, policy, baseline, mode):
    """REINFORCE estimate from an on-policy batch.

    ``trajectories`` is a list of :class:`~rarelab.driving.Trajectory` or an
    already reduced :class:`~rarelab.driving.EpisodeSummary`.
    """
    if isinstance(trajectories, driving.EpisodeSummary):
        summary = trajectories
    else:
        summary = summary_from_trajectories(trajectories)
    if summary.n == 0:
        raise ConstraintError("empty trajectory batch")
    if summary.score_sum.shape[1] != len(policy.theta):
        raise ConstraintError(
            f"score dimension {summary.score_sum.shape[1]} does not match policy dimension {len(policy.theta)}"
        )
    contrib = episode_contributions(summary, baseline, mode)
    n = contrib.shape[0]
    var = float(np.var(contrib, axis=0, ddof=1).sum()) if n > 1 else 0.0
    kind = EstimatorKind.MU1 if GradientMode(mode) is GradientMode.FULL else EstimatorKind.MU2
    return GradientEstimate(contrib.mean(axis=0), var, n, kind, degenerate=n < 2)


def mean_return(config, policy, episodes, seed, jobs=1):
    return float(driving.rollout_returns(config, policy, episodes, seed, jobs).mean())


def finite_difference_gradient(config, policy, epsilon, episodes, seed, jobs=1):
    """Central differences of the Monte Carlo mean return.

    ``epsilon`` is a scalar or one step per coordinate. Every perturbed
    policy replays the same episode noise (common random numbers), so only
    the policy's effect on the return survives.
    """
    theta = policy.vector
    eps = np.broadcast_to(np.asarray(epsilon, dtype=float), theta.shape)
    if not np.all(eps > 0):
        raise ConstraintError("epsilon must be positive")
    steps = np.diag(eps)
    policies = [driving.PolicyParams(theta + s) for s in steps] + [driving.PolicyParams(theta - s) for s in steps]
    means = driving.mean_returns(config, policies, episodes, seed, jobs)
    up, down = means[: theta.size], means[theta.size :]
    return (up - down) / (2.0 * eps)


@dataclass(frozen=True)
class GradientComparison:
    """Full vs critical-episode gradient statistics across independent batches."""

    config: driving.EnvConfig
    policy: driving.PolicyParams
    baseline: float
    batch: int
    trials: int
    seed: int
    full_mean: np.ndarray
    filtered_mean: np.ndarray
    full_standard_error: np.ndarray
    filtered_standard_error: np.ndarray
    difference_standard_error: np.ndarray
    var_full: float
    var_filtered: float
    critical_fraction: float
    z: float = GATE_Z
    band: tuple = (0.5, 2.0)
    passed: bool = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "passed", bool(self.means_agree and self.ratio_in_band))

    @property
    def variance_ratio(self):
        return self.var_full / self.var_filtered if self.var_filtered > 0 else math.inf

    @property
    def ratio_times_rho(self):
        return self.variance_ratio * self.critical_fraction

    @property
    def mean_gap_in_se(self):
        # both estimators see the same episodes, so the SE is that of the paired difference
        return np.abs(self.full_mean - self.filtered_mean) / self.difference_standard_error

    @property
    def means_agree(self):
        return bool(np.all(self.mean_gap_in_se <= self.z))

    @property
    def ratio_in_band(self):
        lo, hi = self.band
        return bool(lo <= self.ratio_times_rho <= hi)

    def to_row(self):
        row = {
            "baseline": self.baseline,
            "batch": self.batch,
            "trials": self.trials,
            "seed": self.seed,
            "critical_fraction": self.critical_fraction,
            "var_full": self.var_full,
            "var_filtered": self.var_filtered,
            "variance_ratio": self.variance_ratio,
            "inverse_critical_fraction": 1.0 / self.critical_fraction if self.critical_fraction else math.inf,
            "ratio_times_rho": self.ratio_times_rho,
            "means_agree": self.means_agree,
            "ratio_in_band": self.ratio_in_band,
            "passed": self.passed,
        }
        for j in range(self.full_mean.size):
            row[f"full_mean_{j}"] = float(self.full_mean[j])
            row[f"filtered_mean_{j}"] = float(self.filtered_mean[j])
            row[f"mean_gap_se_{j}"] = float(self.mean_gap_in_se[j])
        return row


def gradient_variance_comparison(config, policy, baseline, batch, trials, seed, jobs=1):
    """Compare the full and critical-episode estimators over ``trials`` batches.

    Trial ``k`` is episodes ``k*batch .. (k+1)*batch - 1`` of the stream
    keyed by ``seed``. The across-trial variance of each batch mean is
    summed over coordinates.
    """
    if batch < 2 or trials < 2:
        raise ConstraintError("need batch >= 2 and trials >= 2")
    summary = driving.rollout_summary(config, policy, batch * trials, seed, jobs)
    per_trial = {}
    for mode in (GradientMode.FULL, GradientMode.FILTERED_EPISODE):
        c = episode_contributions(summary, baseline, mode)
        per_trial[mode] = c.reshape(trials, batch, -1).mean(axis=1)
    full, filt = per_trial[GradientMode.FULL], per_trial[GradientMode.FILTERED_EPISODE]
    return GradientComparison(
        config=config,
        policy=policy,
        baseline=float(baseline),
        batch=batch,
        trials=trials,
        seed=seed,
        full_mean=full.mean(axis=0),
        filtered_mean=filt.mean(axis=0),
        full_standard_error=full.std(axis=0, ddof=1) / math.sqrt(trials),
        filtered_standard_error=filt.std(axis=0, ddof=1) / math.sqrt(trials),
        difference_standard_error=(full - filt).std(axis=0, ddof=1) / math.sqrt(trials),
        var_full=float(full.var(axis=0, ddof=1).sum()),
        var_filtered=float(filt.var(axis=0, ddof=1).sum()),
        critical_fraction=float(summary.critical.mean()),
    )


class DivergenceError(RuntimeError):
    """Parameters left the configured bound; ``curve`` holds the iterations run so far."""

    def __init__(self, message, curve=None):
        super().__init__(message)
        self.curve = curve


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    theta: np.ndarray
    batch_crash_rate: float
    eval_crash_rate: float
    baseline: float
    gradient: GradientEstimate


@dataclass(frozen=True)
class LearningCurve:
    mode: GradientMode
    records: tuple

    @property
    def eval_crash_rates(self):
        return np.array([r.eval_crash_rate for r in self.records])

    def iterations_to_reach(self, target):
        """First iteration whose evaluation crash rate is at or below ``target``."""
        for r in self.records:
            if r.eval_crash_rate <= target:
                return r.iteration
        return None

    def to_rows(self):
        rows = []
        for r in self.records:
            row = {
                "mode": self.mode.value,
                "iteration": r.iteration,
                "batch_crash_rate": r.batch_crash_rate,
                "eval_crash_rate": r.eval_crash_rate,
                "baseline": r.baseline,
                "gradient_variance": r.gradient.sample_variance,
            }
            for j, v in enumerate(r.theta):
                row[f"theta_{j}"] = float(v)
            for j, v in enumerate(r.gradient.mean):
                row[f"gradient_{j}"] = float(v)
            rows.append(row)
        return rows


def evaluation_crash_rate(config, policy, episodes, seed, jobs=1):
    """Crash rate computed as ``conflict_prob * P(crash | conflict)``.

    Crashes need a conflict, so forcing one in every evaluation episode and
    rescaling gives the same expectation with far less noise.
    """
    if config.conflict_prob == 0.0:
        return 0.0
    forced = driving.EnvConfig(**{**config.to_dict(), "conflict_prob": 1.0})
    summ = driving.rollout_summary(forced, policy, episodes, seed, jobs)
    return config.conflict_prob * float(summ.crashed.mean())


def train(
    config,
    policy0,
    mode,
    baseline,
    iterations,
    batch,
    learning_rate,
    seed,
    eval_episodes=2000,
    theta_bound=1e3,
    jobs=1,
):
    """Plain gradient ascent on expected return.

    ``baseline=None`` uses the mean return of the previous iteration's batch
    (zero before the first). Iteration ``k`` draws its batch from
    ``derive_seed(seed, "train", k)``; every evaluation reuses one fixed
    episode set so crash-rate changes reflect the policy, not resampling.
    """
    if iterations < 1:
        raise ConstraintError("iterations must be >= 1")
    if learning_rate < 0:
        raise ConstraintError("learning_rate must be non-negative")
    mode = GradientMode(mode)
    theta = policy0.vector.copy()
    eval_seed = derive_seed(seed, "eval")
    running = 0.0
    records = []
    for k in range(iterations):
        policy = driving.PolicyParams(theta)
        b = running if baseline is None else float(baseline)
        summ = driving.rollout_summary(config, policy, batch, derive_seed(seed, "train", k), jobs)
        grad = reinforce_gradient(summ, policy, b, mode)
        records.append(
            IterationRecord(
                iteration=k,
                theta=theta.copy(),
                batch_crash_rate=float(summ.crashed.mean()),
                eval_crash_rate=evaluation_crash_rate(config, policy, eval_episodes, eval_seed, jobs),
                baseline=b,
                gradient=grad,
            )
        )
        running = float(summ.total_return.mean())
        theta = theta + learning_rate * grad.mean
        if not np.all(np.isfinite(theta)) or np.linalg.norm(theta) > theta_bound:
            raise DivergenceError(
                f"|theta| = {np.linalg.norm(theta):.3g} exceeds {theta_bound} after iteration {k} "
                f"(mode={mode.value}, gradient={grad.mean})",
                LearningCurve(mode, tuple(records)),
            )
    return LearningCurve(mode, tuple(records))
