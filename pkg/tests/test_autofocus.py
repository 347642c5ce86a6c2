import math
import numpy as np
import pytest
from app.core.autofocus import (
    AXIS_ORDER, Compensation, Stage, StageSchedule, _ordered_axes, compensate, constrained_objective, fine_tune,
    nelder_mead_1d, optimize_trajectory
)
from app.core.fdk import Reconstructor
from app.core.geometry import as_effective, compose
from app.core.iqm import TvMetric, make_metric
from app.core.motion import curves_from_splines, motion_from_splines, zero_splines
from app.utils.errors import ConfigurationError, DivergenceError, ShapeError

N_NODES = 10


@pytest.fixture
def reconstructor(slice_set, projections, trajectory):
    return Reconstructor(slice_set, projections, trajectory)


@pytest.fixture
def moved(trajectory):
    """Scan geometry with a tz bump around the middle of the scan"""
    truth = zero_splines(N_NODES, trajectory.n_views).with_node('tz', 5, 2.0)
    return truth, compose(trajectory, motion_from_splines(truth, trajectory.n_views))


class TestNelderMead:
    """Tests for the one-dimensional downhill simplex"""

    def test_quadratic_minimum(self):
        x = nelder_mead_1d(lambda v: (v - 3.0) ** 2, 0.0, 1.0, 100)
        assert x == pytest.approx(3.0, abs=1e-2)

    def test_full_output(self):
        x, value = nelder_mead_1d(lambda v: (v + 1.0) ** 2 + 0.5, 0.0, 0.5, 100, full_output=True)
        assert x == pytest.approx(-1.0, abs=1e-2)
        assert value == pytest.approx(0.5, abs=1e-3)

    def test_zero_iterations_keep_start(self):
        assert nelder_mead_1d(lambda v: v * v, 2.0, 1.0, 0, full_output=True) == (2.0, None)

    def test_non_finite_objective(self):
        with pytest.raises(DivergenceError):
            nelder_mead_1d(lambda v: math.nan, 0.0, 1.0, 10)


class TestSchedule:
    """Tests for optimization stage schedules"""

    def test_default(self):
        schedule = StageSchedule.default()
        assert schedule.to_list() == [[1.0, 2]] * 3 + [[0.5, 100]] * 2
        assert schedule.tail().to_list() == [[0.5, 100]]

    def test_from_list(self):
        schedule = StageSchedule.from_list([[2, 3]], tolerance=0.01)
        assert schedule.stages == (Stage(2.0, 3),)
        assert schedule.tolerance == 0.01

    def test_invalid_stages(self):
        with pytest.raises(ConfigurationError):
            Stage(0.0, 2)
        with pytest.raises(ConfigurationError):
            StageSchedule(stages=())
        with pytest.raises(ConfigurationError):
            StageSchedule(stages=((1.0, 2),), tolerance=0.0)

    def test_axis_order(self):
        assert _ordered_axes(['rz', 'tx', 'tz']) == ('tz', 'tx', 'rz')
        assert _ordered_axes(AXIS_ORDER[::-1]) == AXIS_ORDER
        with pytest.raises(ConfigurationError):
            _ordered_axes(['yaw'])
        with pytest.raises(ConfigurationError):
            _ordered_axes([])


class TestCompensation:
    """Tests for the candidate objective"""

    def test_zero_candidate_keeps_geometry(self, reconstructor, moved, markers):
        _, base = moved
        objective = Compensation(make_metric('Gt', markers=markers), reconstructor, base)
        eff = objective.geometry(zero_splines(N_NODES, base.n_views))
        assert np.allclose(eff.matrices, base.matrices, atol=1e-12)

    def test_exact_inverse_cancels_motion(self, reconstructor, moved, markers):
        truth, base = moved
        objective = Compensation(make_metric('Gt', markers=markers), reconstructor, base)
        assert objective(zero_splines(N_NODES, base.n_views)) > 0.1
        assert objective(truth.negated()) == pytest.approx(0.0, abs=1e-9)

    def test_mask_shape(self, reconstructor, trajectory, markers):
        with pytest.raises(ShapeError):
            Compensation(make_metric('Gt', markers=markers), reconstructor, trajectory, mask=np.ones(3, bool))

    def test_masked_nodes_are_fixed(self, reconstructor, trajectory, markers):
        mask = np.zeros(trajectory.n_views, dtype=bool)
        mask[40:50] = True
        objective = Compensation(make_metric('Gt', markers=markers), reconstructor, trajectory, mask)
        m = zero_splines(N_NODES, trajectory.n_views)
        assert objective.node_is_free(m, 4)
        assert not objective.node_is_free(m, 9)
        candidate = m.with_node('tx', 0, 3.0)
        assert not np.any(objective.curves(candidate).values[:, ~mask])

    def test_constrained_objective(self, reconstructor, moved, markers):
        truth, base = moved
        metric = make_metric('Gt', markers=markers)
        mask = np.ones(base.n_views, dtype=bool)
        assert constrained_objective(metric, mask, truth.negated(), reconstructor, base) == pytest.approx(0.0, abs=1e-9)

    def test_foreign_reconstructor(self, slice_set, projections, trajectory, markers, intrinsics):
        from app.core.geometry import Intrinsics, build_short_scan
        other = build_short_scan(Intrinsics(sid=800.0, sdd=1200.0, nu=64, nv=48, du=3.2, dv=3.2), 90)
        with pytest.raises(ShapeError):
            Compensation(make_metric('Gt', markers=markers), Reconstructor(slice_set, projections, trajectory), other)


class TestOptimization:
    """Tests for node-sequential trajectory estimation"""

    def test_static_scan_stays_static(self, reconstructor, trajectory, markers):
        schedule = StageSchedule.from_list([[1.0, 3]])
        result = optimize_trajectory(make_metric('Gt', markers=markers), reconstructor, as_effective(trajectory),
                                     zero_splines(N_NODES, trajectory.n_views), ['tz'], schedule)
        assert result.score == 0.0
        assert not np.any(result.splines.values)
        assert not result.trace['accepted'].any()
        assert result.filter_count == 1

    @pytest.mark.slow
    def test_oracle_recovers_motion(self, reconstructor, moved, markers):
        truth, base = moved
        metric = make_metric('Gt', markers=markers)
        initial = Compensation(metric, reconstructor, base)(zero_splines(N_NODES, base.n_views))
        schedule = StageSchedule.from_list([[1.0, 20], [0.5, 20], [0.5, 20]])
        result = compensate(metric, reconstructor, base, N_NODES, ['tz'], schedule)
        assert result.score < 0.2 * initial
        assert np.all(np.diff(result.trace['best'].to_numpy()) <= 0)
        assert result.splines.node('tz', 5) == pytest.approx(-2.0, abs=0.5)
        assert result.axes == ('tz',)
        assert result.slices is not None

    def test_masked_out_scan_is_not_optimized(self, reconstructor, moved, markers):
        _, base = moved
        mask = np.zeros(base.n_views, dtype=bool)
        result = optimize_trajectory(make_metric('Gt', markers=markers), reconstructor, base,
                                     zero_splines(N_NODES, base.n_views), ['tz'],
                                     StageSchedule.from_list([[1.0, 3]]), mask)
        assert result.trace.empty
        assert not np.any(result.splines.values)

    def test_fine_tune_appends_stage(self, reconstructor, moved, markers):
        _, base = moved
        metric = make_metric('Gt', markers=markers)
        schedule = StageSchedule.from_list([[1.0, 2], [0.5, 2]])
        first = optimize_trajectory(metric, reconstructor, base, zero_splines(N_NODES, base.n_views), ['tz'],
                                    StageSchedule.from_list([[1.0, 2]]))
        tuned = fine_tune(first, metric, reconstructor, base, schedule)
        assert tuned.metric == 'Gt+'
        assert tuned.trace['stage'].max() == first.trace['stage'].max() + 1
        assert tuned.score <= first.score
        assert tuned.elapsed >= first.elapsed

    def test_mask_needs_learned_metric(self, reconstructor, trajectory):
        with pytest.raises(ConfigurationError):
            compensate(TvMetric(), reconstructor, trajectory, N_NODES, ['tz'], use_mask=True)

    @pytest.mark.slow
    def test_image_metric_does_not_get_worse(self, reconstructor, moved):
        _, base = moved
        metric = TvMetric()
        result = compensate(metric, reconstructor, base, 5, ['tz'], StageSchedule.from_list([[1.0, 2]]))
        initial = metric(reconstructor.reconstruct(base), base).score
        assert result.score <= initial

    @pytest.mark.slow
    def test_false_positive_flags_do_not_hurt_recovery(self, reconstructor, moved, markers):
        truth, base = moved
        metric = make_metric('Gt', markers=markers)
        m0 = zero_splines(N_NODES, base.n_views)
        initial = Compensation(metric, reconstructor, base)(m0)
        schedule = StageSchedule.from_list([[1.0, 20], [0.5, 20]])
        moving = curves_from_splines(truth, base.n_views).axis('tz') != 0
        exact = optimize_trajectory(metric, reconstructor, base, m0, ['tz'], schedule, moving)
        flagged = optimize_trajectory(metric, reconstructor, base, m0, ['tz', 'rx'], schedule,
                                      np.ones(base.n_views, dtype=bool))
        assert exact.score < 0.2 * initial
        assert flagged.score < 0.2 * initial
        assert np.max(np.abs(flagged.curves.axis('rx'))) <= 0.1
        assert np.max(np.abs(flagged.splines.values[:, [0, 1, N_NODES - 1]])) <= 0.1
