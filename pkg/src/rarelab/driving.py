"""One-dimensional car-following episodes with a rare lead-vehicle hard brake.

The ego vehicle follows a lead car at equal speed. With probability
``conflict_prob`` per episode the lead starts braking at ``lead_decel`` at a
step drawn uniformly from the first half of the horizon, down to
``lead_final_speed``. Each step the ego policy brakes (deceleration
``ego_decel``) with probability

    sigmoid(theta[0] * (gap_critical - gap) / gap_scale
            + theta[1] * closing_speed / speed_scale + theta[2])

and otherwise coasts. The two scales only condition the parameters; setting
both to 1 gives the raw-unit policy. An episode ends early if the gap reaches zero.

Transition at step ``t`` (state index ``t`` -> ``t + 1``)::

    v_ego  <- max(v_ego - brake * ego_decel * dt, 0)
    v_lead <- max(v_lead - lead_decel * dt, lead_final_speed)   (t >= onset)
    gap    <- gap + (v_lead - v_ego) * dt

Rewards are ``crash_reward`` on the crashing step plus, on every live step,
``shaping_scale * xi`` with ``xi ~ N(0, 1)`` drawn independently of the
state and action. That disturbance has zero mean for every policy, so it
leaves the objective unchanged while giving normal episodes gradient
contributions with zero mean and positive variance.

All randomness for a batch (conflict draw, onset step, action uniforms,
disturbance) is drawn up front from streams keyed by ``(seed, chunk)``, so
the same seed replays the same exogenous noise under any policy. That is
what the finite-difference oracle relies on.
"""

import enum
import functools
import math
from dataclasses import asdict, dataclass

import numba
import numpy as np
from scipy.special import expit

from .estimators import ConstraintError, EventLabel
from .parallel import pmap
from .rng import stream

CHUNK = 4096
N_PARAMS = 3


class Outcome(enum.Enum):
    UNEVENTFUL = "uneventful"
    NEAR_MISS = "near_miss"
    CRASH = "crash"


@dataclass(frozen=True)
class EnvConfig:
    conflict_prob: float = 0.01
    horizon: int = 100
    dt: float = 0.1
    init_gap: float = 30.0
    init_speed: float = 20.0
    lead_decel: float = 6.0
    lead_final_speed: float = 5.0
    ego_decel: float = 8.0
    near_miss_gap: float = 1.0
    gap_critical: float = 10.0
    gap_scale: float = 30.0
    speed_scale: float = 20.0
    crash_reward: float = -1.0
    shaping_scale: float = 0.0

    def __post_init__(self):
        problems = []
        if not (0.0 <= self.conflict_prob <= 1.0):
            problems.append(f"conflict_prob={self.conflict_prob} outside [0, 1]")
        if self.horizon < 10:
            problems.append(f"horizon={self.horizon} < 10")
        if not self.dt > 0:
            problems.append(f"dt={self.dt} must be positive")
        if not (self.init_gap > self.near_miss_gap > 0):
            problems.append("need init_gap > near_miss_gap > 0")
        if self.init_speed <= 0 or self.lead_decel < 0 or self.ego_decel < 0:
            problems.append("speeds and decelerations must be positive")
        if not (0.0 <= self.lead_final_speed <= self.init_speed):
            problems.append("lead_final_speed must lie in [0, init_speed]")
        if not (self.gap_scale > 0 and self.speed_scale > 0):
            problems.append("feature scales must be positive")
        if self.shaping_scale < 0:
            problems.append("shaping_scale must be non-negative")
        if problems:
            raise ConstraintError("invalid EnvConfig: " + "; ".join(problems))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class PolicyParams:
    theta: tuple

    def __post_init__(self):
        t = np.asarray(self.theta, dtype=float).ravel()
        if t.size != N_PARAMS:
            raise ConstraintError(f"policy needs {N_PARAMS} parameters, got {t.size}")
        if not np.all(np.isfinite(t)):
            raise ConstraintError("policy parameters must be finite")
        object.__setattr__(self, "theta", tuple(float(x) for x in t))

    @property
    def vector(self):
        return np.array(self.theta)

    def brake_probability(self, config, gap, closing):
        th = self.theta
        z = th[0] * (config.gap_critical - gap) / config.gap_scale + th[1] * closing / config.speed_scale + th[2]
        return expit(z)


@dataclass
class EpisodeNoise:
    conflict: np.ndarray  # (n,) bool
    onset: np.ndarray  # (n,) int, meaningful where conflict
    action_u: np.ndarray  # (n, horizon)
    disturbance: object  # (n, horizon) array, or None when shaping is off

    @property
    def n(self):
        return self.conflict.shape[0]


def draw_noise(config, n, rng):
    h = config.horizon
    conflict = rng.random(n) < config.conflict_prob
    onset = rng.integers(0, h // 2, size=n)
    action_u = rng.random((n, h))
    # drawn last so skipping it leaves the other draws unchanged
    disturbance = rng.standard_normal((n, h)) if config.shaping_scale > 0 else None
    return EpisodeNoise(conflict, onset, action_u, disturbance)


def chunk_noise(config, seed, chunk, n=CHUNK):
    """First ``n`` episodes of chunk ``chunk``; a full chunk is always drawn so
    episode ``i`` does not depend on how many episodes are requested."""
    if not 0 < n <= CHUNK:
        raise ConstraintError(f"a chunk holds 1..{CHUNK} episodes, got {n}")
    full = draw_noise(config, CHUNK, stream(seed, "episodes", chunk))
    if n == CHUNK:
        return full
    dist = None if full.disturbance is None else full.disturbance[:n]
    return EpisodeNoise(full.conflict[:n], full.onset[:n], full.action_u[:n], dist)


@dataclass
class Rollout:
    """Arrays for a batch of episodes; steps after a crash are masked out."""

    gap: np.ndarray  # (n, h+1)
    v_ego: np.ndarray  # (n, h+1)
    v_lead: np.ndarray  # (n, h+1)
    action: np.ndarray  # (n, h) bool
    score: np.ndarray  # (n, h, 3), d log pi / d theta
    reward: np.ndarray  # (n, h)
    live: np.ndarray  # (n, h) bool
    crash_step: np.ndarray  # (n,) int, -1 if none
    conflict: np.ndarray
    onset: np.ndarray


def _physics(config, policy):
    th = policy.theta
    return np.array(
        [
            th[0], th[1], th[2],
            config.gap_critical, config.ego_decel, config.lead_decel, config.lead_final_speed,
            config.shaping_scale, config.crash_reward, config.dt,
            1.0 / config.gap_scale, 1.0 / config.speed_scale,
        ]
    )


@numba.njit(cache=True, inline="always")
def _brake_prob(ph, f0, f1):
    return 1.0 / (1.0 + math.exp(-(ph[0] * f0 + ph[1] * f1 + ph[2])))


@numba.njit(cache=True, inline="always")
def _advance(ph, brake, g, e, lv, lead_braking):
    dt = ph[9]
    e_next = max(e - ph[4] * dt, 0.0) if brake else e
    l_next = max(lv - ph[5] * dt, ph[6]) if lead_braking else lv
    return g + (l_next - e_next) * dt, e_next, l_next


@numba.njit(cache=True)
def _record_kernel(ph, conflict, onset, action_u, disturbance, gap, ve, vl, action, score, reward, live, crash_step):
    n, h = action_u.shape
    for i in range(n):
        alive = True
        for t in range(h):
            g = gap[i, t]
            e = ve[i, t]
            lv = vl[i, t]
            if not alive:
                gap[i, t + 1] = g
                ve[i, t + 1] = e
                vl[i, t + 1] = lv
                continue
            f0 = (ph[3] - g) * ph[10]
            f1 = (e - lv) * ph[11]
            p = _brake_prob(ph, f0, f1)
            a = action_u[i, t] < p
            r = (1.0 if a else 0.0) - p
            score[i, t, 0] = r * f0
            score[i, t, 1] = r * f1
            score[i, t, 2] = r
            action[i, t] = a
            live[i, t] = True
            g_next, e_next, l_next = _advance(ph, a, g, e, lv, conflict[i] and t >= onset[i])
            ve[i, t + 1] = e_next
            vl[i, t + 1] = l_next
            gap[i, t + 1] = g_next
            reward[i, t] = ph[7] * disturbance[i, t]
            if g_next <= 0.0:
                reward[i, t] += ph[8]
                crash_step[i] = t
                alive = False


@numba.njit(cache=True)
def _return_kernel(ph, init_gap, init_speed, conflict, onset, action_u, disturbance, out):
    n, h = action_u.shape
    for i in range(n):
        g = init_gap
        e = init_speed
        lv = init_speed
        total = 0.0
        for t in range(h):
            p = _brake_prob(ph, (ph[3] - g) * ph[10], (e - lv) * ph[11])
            g, e, lv = _advance(ph, action_u[i, t] < p, g, e, lv, conflict[i] and t >= onset[i])
            total += ph[7] * disturbance[i, t]
            if g <= 0.0:
                total += ph[8]
                break
        out[i] = total


def _disturbance(noise, n, h):
    return noise.disturbance if noise.disturbance is not None else np.zeros((n, h))


def simulate(config, policy, noise):
    """Roll out ``noise.n`` episodes, recording every step."""
    n, h = noise.n, config.horizon
    gap = np.empty((n, h + 1))
    ve = np.empty((n, h + 1))
    vl = np.empty((n, h + 1))
    gap[:, 0] = config.init_gap
    ve[:, 0] = config.init_speed
    vl[:, 0] = config.init_speed
    action = np.zeros((n, h), dtype=bool)
    score = np.zeros((n, h, N_PARAMS))
    reward = np.zeros((n, h))
    live = np.zeros((n, h), dtype=bool)
    crash_step = np.full(n, -1, dtype=np.int64)
    _record_kernel(
        _physics(config, policy), noise.conflict, noise.onset.astype(np.int64), noise.action_u,
        _disturbance(noise, n, h), gap, ve, vl, action, score, reward, live, crash_step,
    )
    return Rollout(gap, ve, vl, action, score, reward, live, crash_step, noise.conflict.copy(), noise.onset.copy())


def simulate_returns(config, policy, noise):
    """Episode returns only; same dynamics as :func:`simulate` without the bookkeeping."""
    n, h = noise.n, config.horizon
    out = np.empty(n)
    _return_kernel(
        _physics(config, policy), float(config.init_gap), float(config.init_speed), noise.conflict,
        noise.onset.astype(np.int64), noise.action_u, _disturbance(noise, n, h), out,
    )
    return out


def outcomes(config, roll):
    """Outcome codes per episode: 0 uneventful, 1 near miss, 2 crash."""
    code = np.zeros(roll.gap.shape[0], dtype=int)
    code[roll.gap[:, 1:].min(axis=1) < config.near_miss_gap] = 1
    code[roll.crash_step >= 0] = 2
    return code


_OUTCOME_CODES = (Outcome.UNEVENTFUL, Outcome.NEAR_MISS, Outcome.CRASH)


def window_bounds(config, roll, code):
    """Inclusive critical-window step range per episode; ``(-1, -1)`` if none.

    Starts at the conflict onset. Ends at the crash step, or at the first
    step after the minimum gap where the gap is back above
    ``near_miss_gap`` (the last step if that never happens).
    """
    n, h = roll.live.shape
    start = np.full(n, -1)
    end = np.full(n, -1)
    crit = code > 0
    start[crit] = roll.onset[crit]
    crash = code == 2
    end[crash] = roll.crash_step[crash]
    near = np.flatnonzero(code == 1)
    if near.size:
        g = roll.gap[near, 1:]  # g[:, k] is the gap after step k
        kmin = g.argmin(axis=1)
        after = (np.arange(h)[None, :] > kmin[:, None]) & (g > config.near_miss_gap)
        has = after.any(axis=1)
        end[near] = np.where(has, after.argmax(axis=1), h - 1)
    return start, end


@dataclass(frozen=True)
class Step:
    gap: float
    ego_speed: float
    lead_speed: float
    brake: bool
    log_policy_gradient: np.ndarray
    reward: float


@dataclass(frozen=True)
class Trajectory:
    steps: tuple
    outcome: Outcome
    conflict_onset: object  # int or None
    critical_window: object  # (start, end) or None
    final_gap: float
    near_miss_gap: float

    @property
    def length(self):
        return len(self.steps)

    @property
    def gaps(self):
        return np.array([s.gap for s in self.steps] + [self.final_gap])

    @property
    def total_return(self):
        return float(sum(s.reward for s in self.steps))

    @property
    def score_sum(self):
        return np.sum([s.log_policy_gradient for s in self.steps], axis=0)


def trajectories_from_rollout(config, roll):
    code = outcomes(config, roll)
    start, end = window_bounds(config, roll, code)
    out = []
    for i in range(roll.live.shape[0]):
        length = int(roll.live[i].sum())
        steps = tuple(
            Step(
                float(roll.gap[i, t]),
                float(roll.v_ego[i, t]),
                float(roll.v_lead[i, t]),
                bool(roll.action[i, t]),
                roll.score[i, t].copy(),
                float(roll.reward[i, t]),
            )
            for t in range(length)
        )
        onset = int(roll.onset[i]) if roll.conflict[i] else None
        window = (int(start[i]), int(end[i])) if start[i] >= 0 else None
        out.append(
            Trajectory(
                steps, _OUTCOME_CODES[code[i]], onset, window, float(roll.gap[i, length]), config.near_miss_gap
            )
        )
    return out


def run_episode(config, policy, seed):
    """Simulate one episode; deterministic in ``seed``."""
    noise = draw_noise(config, 1, stream(seed, "episode"))
    return trajectories_from_rollout(config, simulate(config, policy, noise))[0]


def classify_trajectory(traj):
    """Event label and critical window for a finished trajectory.

    Crashes and near misses are critical; everything else is normal.
    """
    if traj.outcome is Outcome.UNEVENTFUL:
        return EventLabel.NORMAL, None
    if traj.conflict_onset is None:
        raise ConstraintError(f"{traj.outcome.value} trajectory without a conflict onset")
    last = traj.length - 1
    if traj.outcome is Outcome.CRASH:
        return EventLabel.CRITICAL, (traj.conflict_onset, last)
    gaps = traj.gaps[1:]  # gaps[k] follows step k
    kmin = int(np.argmin(gaps))
    end = last
    for k in range(kmin + 1, traj.length):
        if gaps[k] > traj.near_miss_gap:
            end = k
            break
    return EventLabel.CRITICAL, (traj.conflict_onset, end)


@dataclass
class EpisodeSummary:
    """Per-episode reductions of a batch, in episode order."""

    total_return: np.ndarray  # (n,)
    outcome: np.ndarray  # (n,) codes 0/1/2
    score_sum: np.ndarray  # (n, 3) over all live steps
    window_score_sum: np.ndarray  # (n, 3) over the critical window only
    conflict: np.ndarray  # (n,) bool

    @property
    def n(self):
        return self.total_return.shape[0]

    @property
    def critical(self):
        return self.outcome > 0

    @property
    def crashed(self):
        return self.outcome == 2

    @classmethod
    def concat(cls, parts):
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in cls.__dataclass_fields__))


@numba.njit(cache=True)
def _score_sums(score, start, end):
    n, h, k = score.shape
    full = np.zeros((n, k))
    window = np.zeros((n, k))
    for i in range(n):
        for t in range(h):
            for j in range(k):
                v = score[i, t, j]
                full[i, j] += v
                if start[i] <= t <= end[i]:
                    window[i, j] += v
    return full, window


def summarize_rollout(config, roll):
    code = outcomes(config, roll)
    start, end = window_bounds(config, roll, code)
    full, window = _score_sums(roll.score, start.astype(np.int64), end.astype(np.int64))
    return EpisodeSummary(
        total_return=roll.reward.sum(axis=1),
        outcome=code,
        score_sum=full,
        window_score_sum=window,
        conflict=roll.conflict,
    )


def _chunk_summary(config, policy, seed, episodes, chunk):
    size = min(CHUNK, episodes - chunk * CHUNK)
    return summarize_rollout(config, simulate(config, policy, chunk_noise(config, seed, chunk, size)))


def rollout_summary(config, policy, episodes, seed, jobs=1):
    """Summaries for ``episodes`` episodes keyed by ``seed``.

    Episodes are generated in fixed-size chunks, each with its own stream, so
    episode ``i`` is the same for any ``episodes > i`` and any ``jobs``.
    """
    if episodes < 1:
        raise ConstraintError("episodes must be >= 1")
    chunks = range(math.ceil(episodes / CHUNK))
    fn = functools.partial(_chunk_summary, config, policy, seed, episodes)
    return EpisodeSummary.concat(pmap(fn, chunks, jobs))


def _chunk_returns(config, policy, seed, episodes, chunk):
    size = min(CHUNK, episodes - chunk * CHUNK)
    return simulate_returns(config, policy, chunk_noise(config, seed, chunk, size))


def rollout_returns(config, policy, episodes, seed, jobs=1):
    """Episode returns for the same episodes as :func:`rollout_summary`."""
    if episodes < 1:
        raise ConstraintError("episodes must be >= 1")
    chunks = range(math.ceil(episodes / CHUNK))
    fn = functools.partial(_chunk_returns, config, policy, seed, episodes)
    return np.concatenate(pmap(fn, chunks, jobs))


def _chunk_return_sums(config, policies, seed, episodes, chunk):
    size = min(CHUNK, episodes - chunk * CHUNK)
    noise = chunk_noise(config, seed, chunk, size)
    return np.array([simulate_returns(config, p, noise).sum() for p in policies])


def mean_returns(config, policies, episodes, seed, jobs=1):
    """Mean return of each policy over one shared set of episodes.

    The exogenous noise of every chunk is drawn once and replayed for all
    policies, so this is the common-random-numbers comparison at the cost of
    a single noise draw.
    """
    if episodes < 1:
        raise ConstraintError("episodes must be >= 1")
    policies = list(policies)
    chunks = range(math.ceil(episodes / CHUNK))
    fn = functools.partial(_chunk_return_sums, config, policies, seed, episodes)
    return np.sum(pmap(fn, chunks, jobs), axis=0) / episodes


@dataclass(frozen=True)
class RateEstimate:
    rate: float
    low: float
    high: float
    episodes: int
    events: int


def wilson_interval(events, n, z=1.96):
    p = events / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, centre - half), min(1.0, centre + half)


def crash_rate(config, policy, episodes, seed, z=1.96, jobs=1):
    """Monte Carlo crash frequency with a Wilson score interval."""
    summ = rollout_summary(config, policy, episodes, seed, jobs)
    k = int(summ.crashed.sum())
    low, high = wilson_interval(k, episodes, z)
    return RateEstimate(k / episodes, low, high, episodes, k)
