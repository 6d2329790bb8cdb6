import numpy as np
import pytest

from rarelab import driving
from rarelab import policy_gradient as pg
from rarelab.driving import EnvConfig, PolicyParams
from rarelab.estimators import ConstraintError, EstimatorKind
from rarelab.policy_gradient import GradientMode

GOLDEN = PolicyParams((0.9, 6.0, -2.5))


@pytest.fixture(scope="module")
def mixed_batch():
    cfg = EnvConfig(conflict_prob=0.3, shaping_scale=0.3)
    roll = driving.simulate(cfg, GOLDEN, driving.chunk_noise(cfg, 12, 0, 400))
    return cfg, driving.trajectories_from_rollout(cfg, roll), driving.summarize_rollout(cfg, roll)


class TestContributions:
    def test_trajectories_and_summary_agree(self, mixed_batch):
        _, trajs, summ = mixed_batch
        for mode in GradientMode:
            a = pg.reinforce_gradient(trajs, GOLDEN, 0.1, mode)
            b = pg.reinforce_gradient(summ, GOLDEN, 0.1, mode)
            np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)
            assert a.sample_variance == pytest.approx(b.sample_variance)

    def test_full_mode_definition(self, mixed_batch):
        _, trajs, _ = mixed_batch
        b = -0.2
        expected = np.mean([(t.total_return - b) * t.score_sum for t in trajs], axis=0)
        g = pg.reinforce_gradient(trajs, GOLDEN, b, GradientMode.FULL)
        np.testing.assert_allclose(g.mean, expected, atol=1e-12)
        assert g.kind is EstimatorKind.MU1 and g.n == len(trajs)

    def test_filtered_divides_by_whole_batch(self, mixed_batch):
        _, trajs, summ = mixed_batch
        crit = [t for t in trajs if t.outcome is not driving.Outcome.UNEVENTFUL]
        assert 0 < len(crit) < len(trajs)
        expected = np.sum([(t.total_return - 0.05) * t.score_sum for t in crit], axis=0) / len(trajs)
        g = pg.reinforce_gradient(summ, GOLDEN, 0.05, GradientMode.FILTERED_EPISODE)
        np.testing.assert_allclose(g.mean, expected, atol=1e-12)

    def test_normal_episodes_contribute_zero(self, mixed_batch):
        _, _, summ = mixed_batch
        for mode in (GradientMode.FILTERED_EPISODE, GradientMode.FILTERED_WINDOW):
            c = pg.episode_contributions(summ, 0.3, mode)
            assert np.all(c[~summ.critical] == 0.0)

    def test_window_is_subset_of_episode(self, mixed_batch):
        cfg, trajs, summ = mixed_batch
        t = next(t for t in trajs if t.outcome is driving.Outcome.CRASH and t.critical_window[0] > 0)
        s, e = t.critical_window
        expected = t.total_return * np.sum([st.log_policy_gradient for st in t.steps[s : e + 1]], axis=0)
        single = pg.reinforce_gradient([t], GOLDEN, 0.0, GradientMode.FILTERED_WINDOW)
        np.testing.assert_allclose(single.mean, expected, atol=1e-12)
        assert single.degenerate

    def test_dimension_mismatch(self, mixed_batch):
        _, _, summ = mixed_batch
        bad = driving.EpisodeSummary(
            summ.total_return, summ.outcome, summ.score_sum[:, :2], summ.window_score_sum[:, :2], summ.conflict
        )
        with pytest.raises(ConstraintError):
            pg.reinforce_gradient(bad, GOLDEN, 0.0, GradientMode.FULL)

    def test_empty(self):
        with pytest.raises(ConstraintError):
            pg.reinforce_gradient([], GOLDEN, 0.0, GradientMode.FULL)

    def test_zero_baseline_uneventful_only_gives_zero(self):
        cfg = EnvConfig(conflict_prob=0.0)
        summ = driving.rollout_summary(cfg, GOLDEN, 500, seed=1)
        for mode in GradientMode:
            assert np.all(pg.reinforce_gradient(summ, GOLDEN, 0.0, mode).mean == 0.0)


class TestFiniteDifference:
    cfg = EnvConfig(conflict_prob=1.0)

    def test_scalar_and_vector_epsilon(self):
        a = pg.finite_difference_gradient(self.cfg, GOLDEN, 0.1, 3000, seed=2)
        b = pg.finite_difference_gradient(self.cfg, GOLDEN, [0.1, 0.1, 0.1], 3000, seed=2)
        np.testing.assert_array_equal(a, b)

    def test_matches_one_sided_means(self):
        eps = np.array([0.2, 0.1, 0.05])
        g = pg.finite_difference_gradient(self.cfg, GOLDEN, eps, 3000, seed=2)
        th = GOLDEN.vector
        up = pg.mean_return(self.cfg, PolicyParams(th + [0, 0, 0.05]), 3000, seed=2)
        down = pg.mean_return(self.cfg, PolicyParams(th - [0, 0, 0.05]), 3000, seed=2)
        assert g[2] == pytest.approx((up - down) / 0.1, rel=1e-9)

    def test_bad_epsilon(self):
        with pytest.raises(ConstraintError):
            pg.finite_difference_gradient(self.cfg, GOLDEN, [0.1, 0.0, 0.1], 100, seed=1)

    def test_reinforce_agrees_small(self):
        summ = driving.rollout_summary(self.cfg, GOLDEN, 40000, seed=5)
        b = float(summ.total_return.mean())
        c = pg.episode_contributions(summ, b, GradientMode.FULL)
        rf, se = c.mean(axis=0), c.std(axis=0, ddof=1) / np.sqrt(summ.n)
        fd = pg.finite_difference_gradient(self.cfg, GOLDEN, [0.15, 0.15, 0.03], 200000, seed=6)
        # the finite-difference estimate has its own noise, a few percent at this size
        assert np.all(np.abs(rf - fd) <= 4 * se + 0.03 * np.abs(fd))


class TestComparison:
    def test_small_comparison(self):
        cfg = EnvConfig(conflict_prob=0.2, shaping_scale=0.3)
        cmp = pg.gradient_variance_comparison(cfg, PolicyParams((0.9, 3.0, -2.0)), -0.1, 100, 50, seed=3)
        assert cmp.var_full > cmp.var_filtered > 0
        assert cmp.means_agree
        row = cmp.to_row()
        assert row["variance_ratio"] == pytest.approx(cmp.var_full / cmp.var_filtered)
        assert set(row) >= {"full_mean_0", "filtered_mean_2", "ratio_times_rho"}

    def test_validation(self):
        with pytest.raises(ConstraintError):
            pg.gradient_variance_comparison(EnvConfig(), GOLDEN, 0.0, 1, 10, seed=1)


class TestTraining:
    cfg = EnvConfig(conflict_prob=0.05, shaping_scale=0.3)

    def test_deterministic(self):
        a = pg.train(self.cfg, GOLDEN, "filtered_window", None, 3, 2000, 50.0, seed=1, eval_episodes=300)
        b = pg.train(self.cfg, GOLDEN, "filtered_window", None, 3, 2000, 50.0, seed=1, eval_episodes=300)
        assert a.to_rows() == b.to_rows()
        assert len(a.records) == 3 and a.mode is GradientMode.FILTERED_WINDOW

    def test_zero_rate_keeps_parameters(self):
        c = pg.train(self.cfg, GOLDEN, "full", 0.0, 2, 500, 0.0, seed=1, eval_episodes=200)
        assert all(np.array_equal(r.theta, GOLDEN.vector) for r in c.records)
        assert c.eval_crash_rates[0] == c.eval_crash_rates[1]

    def test_divergence_keeps_partial_curve(self):
        with pytest.raises(pg.DivergenceError) as info:
            pg.train(self.cfg, GOLDEN, "full", None, 5, 2000, 1e6, seed=1, eval_episodes=200, theta_bound=20.0)
        assert len(info.value.curve.records) >= 1

    def test_iterations_to_reach(self):
        recs = tuple(
            pg.IterationRecord(k, np.zeros(3), 0.0, rate, 0.0, None) for k, rate in enumerate([0.4, 0.3, 0.1, 0.05])
        )
        curve = pg.LearningCurve(GradientMode.FULL, recs)
        assert curve.iterations_to_reach(0.2) == 2
        assert curve.iterations_to_reach(0.01) is None

    def test_evaluation_rate_scaling(self):
        r = pg.evaluation_crash_rate(EnvConfig(conflict_prob=0.01), GOLDEN, 2000, seed=4)
        r1 = pg.evaluation_crash_rate(EnvConfig(conflict_prob=1.0), GOLDEN, 2000, seed=4)
        assert r == pytest.approx(0.01 * r1)
        assert pg.evaluation_crash_rate(EnvConfig(conflict_prob=0.0), GOLDEN, 10, seed=4) == 0.0

    def test_validation(self):
        with pytest.raises(ConstraintError):
            pg.train(self.cfg, GOLDEN, "full", None, 0, 10, 1.0, seed=1)
        with pytest.raises(ValueError):
            pg.train(self.cfg, GOLDEN, "everything", None, 1, 10, 1.0, seed=1)
