"""
Trajectory estimation by node-sequential downhill simplex.

A candidate compensation is a spline set m; its curves t(m) define per-view
rigid transforms C that are appended to the (possibly moved) scan geometry,
giving P . M . C. Each stage sweeps the requested axes in the fixed order
(tz, tx, ty, rx, ry, rz) and, within an axis, the nodes in order, running a
one-dimensional simplex on one node value at a time.
"""
import logging
import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.optimize import minimize

from app.core.fdk import Reconstructor, SliceTriplets
from app.core.geometry import EffectiveTrajectory, as_effective, compose
from app.core.iqm import LearnedMetric, Metric, soft_classify
from app.core.motion import MotionCurves, MotionSplineSet, annihilating_motion, curves_from_splines
from app.utils.errors import ConfigurationError, DivergenceError, ShapeError

logger = logging.getLogger(__name__)

AXIS_ORDER = ('tz', 'tx', 'ty', 'rx', 'ry', 'rz')
CONVERGENCE_TOLERANCE = 1e-3
# Akima node k shapes the curve on (x[k-3], x[k+3])
NODE_SUPPORT = 3


@dataclass(frozen=True)
class Stage:
    step: float
    max_iter: int

    def __post_init__(self):
        if not self.step > 0:
            raise ConfigurationError(f'stage step must be positive, got {self.step}')
        if self.max_iter < 0:
            raise ConfigurationError(f'stage iterations must be non-negative, got {self.max_iter}')


@dataclass(frozen=True)
class StageSchedule:
    stages: Tuple[Stage, ...]
    tolerance: float = CONVERGENCE_TOLERANCE

    def __post_init__(self):
        stages = tuple(s if isinstance(s, Stage) else Stage(*s) for s in self.stages)
        if not stages:
            raise ConfigurationError('a schedule needs at least one stage')
        if not self.tolerance > 0:
            raise ConfigurationError(f'tolerance must be positive, got {self.tolerance}')
        object.__setattr__(self, 'stages', stages)

    @classmethod
    def default(cls):
        return cls(stages=(Stage(1.0, 2),) * 3 + (Stage(0.5, 100),) * 2)

    @classmethod
    def from_list(cls, stages, tolerance=CONVERGENCE_TOLERANCE):
        return cls(stages=tuple(Stage(float(step), int(max_iter)) for step, max_iter in stages), tolerance=tolerance)

    def tail(self):
        """The last stage alone, used for fine-tuning"""
        return StageSchedule(stages=self.stages[-1:], tolerance=self.tolerance)

    def to_list(self):
        return [[s.step, s.max_iter] for s in self.stages]


def nelder_mead_1d(f, x0, step, max_iter, tol=CONVERGENCE_TOLERANCE, full_output=False):
    """
    Downhill simplex on the two-vertex simplex {x0, x0 + step}. Stops after
    max_iter iterations or once the simplex is narrower than tol.
    """
    x0 = float(x0)
    if max_iter == 0:
        return (x0, None) if full_output else x0
    trace = []

    def objective(x):
        value = float(f(float(x[0])))
        trace.append((float(x[0]), value))
        if not math.isfinite(value):
            raise DivergenceError(f'objective is not finite at {x[0]}', trace=trace[-10:])
        return value

    result = minimize(objective, np.array([x0]), method='Nelder-Mead',
                      options={'initial_simplex': np.array([[x0], [x0 + step]]), 'maxiter': max_iter,
                               'xatol': tol, 'fatol': np.inf})
    x = float(result.x[0])
    return (x, float(result.fun)) if full_output else x


@dataclass
class CompensationResult:
    splines: MotionSplineSet
    motion: Tuple
    curves: MotionCurves
    eff: EffectiveTrajectory
    slices: Optional[SliceTriplets]
    score: float
    trace: pd.DataFrame
    elapsed: float
    metric: str
    axes: Tuple[str, ...]
    mask: Optional[np.ndarray] = None
    filter_count: int = 1


class Compensation:
    """Objective for candidate spline sets against one set of projections"""

    def __init__(self, metric: Metric, reconstructor: Reconstructor, base, mask=None):
        self.metric = metric
        self.reconstructor = reconstructor
        self.base = as_effective(base)
        if self.base.base is not reconstructor.trajectory and not np.array_equal(
                self.base.base.matrices, reconstructor.trajectory.matrices):
            raise ShapeError('base geometry and reconstructor use different trajectories')
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)
        if self.mask is not None and self.mask.shape != (self.base.n_views,):
            raise ShapeError(f'mask must have {self.base.n_views} entries, got {self.mask.shape}')
        self.evaluations = 0

    def curves(self, m: MotionSplineSet) -> MotionCurves:
        curves = curves_from_splines(m, self.base.n_views)
        return curves if self.mask is None else curves.masked(self.mask)

    def geometry(self, m: MotionSplineSet) -> EffectiveTrajectory:
        return compose(self.base, annihilating_motion(self.curves(m)))

    def evaluate(self, m: MotionSplineSet):
        eff = self.geometry(m)
        slices = self.reconstructor.reconstruct(eff) if self.metric.needs_reconstruction else None
        self.evaluations += 1
        return self.metric(slices, eff).score, eff, slices

    def __call__(self, m: MotionSplineSet):
        return self.evaluate(m)[0]

    def node_is_free(self, m: MotionSplineSet, index):
        """False when every view the node can reach is masked out"""
        if self.mask is None:
            return True
        positions = m.positions
        lo = positions[max(0, index - NODE_SUPPORT)]
        hi = positions[min(positions.size - 1, index + NODE_SUPPORT)]
        views = np.arange(self.base.n_views)
        return bool(np.any(self.mask[(views > lo) & (views < hi)]))


def constrained_objective(metric: Metric, mask, m: MotionSplineSet, reconstructor: Reconstructor, base):
    """Metric score with the candidate curves forced to zero on mask-negative views"""
    return Compensation(metric, reconstructor, base, mask)(m)


def learned_mask(metric: LearnedMetric, slices: SliceTriplets, threshold=0.1):
    """Motion-affected views predicted from the uncompensated reconstruction"""
    _, r2, r3, r4 = metric.model.predict(slices)
    return soft_classify(r2, r3, r4, threshold)


def _ordered_axes(axes):
    axes = tuple(axes)
    unknown = set(axes) - set(AXIS_ORDER)
    if unknown:
        raise ConfigurationError(f'unknown motion axes: {sorted(unknown)}')
    ordered = tuple(axis for axis in AXIS_ORDER if axis in axes)
    if not ordered:
        raise ConfigurationError('at least one axis must be optimized')
    return ordered


def optimize_trajectory(metric: Metric, reconstructor: Reconstructor, base, m0: MotionSplineSet,
                        axes: Sequence[str], schedule: StageSchedule = None, mask=None,
                        stage_offset=0) -> CompensationResult:
    """
    Estimate the annihilating spline set minimizing the metric. A node keeps
    its new value only when it improves the best score.
    """
    schedule = schedule or StageSchedule.default()
    axes = _ordered_axes(axes)
    objective = Compensation(metric, reconstructor, base, mask)
    started = time.perf_counter()
    m = m0
    best = objective(m)
    rows = []
    logger.info('optimizing %s over %s with %d stages, initial score %.6g',
                metric.name, ','.join(axes), len(schedule.stages), best)
    for stage_index, stage in enumerate(schedule.stages, start=stage_offset):
        largest_change = 0.0
        for axis in axes:
            for node in range(m.n_nodes):
                if not objective.node_is_free(m, node):
                    continue
                x0 = m.node(axis, node)
                current = m

                def node_objective(x):
                    return objective(current.with_node(axis, node, x))

                x, score = nelder_mead_1d(node_objective, x0, stage.step, stage.max_iter,
                                          schedule.tolerance, full_output=True)
                accepted = score is not None and score < best
                if accepted:
                    m = m.with_node(axis, node, x)
                    best = score
                    largest_change = max(largest_change, abs(x - x0))
                rows.append({'stage': stage_index, 'axis': axis, 'node': node,
                             'evaluations': objective.evaluations, 'value': m.node(axis, node),
                             'candidate': x, 'score': score if score is not None else best,
                             'best': best, 'accepted': accepted})
        logger.info('stage %d (step %.3g, %d iterations): best %.6g, largest node change %.4g',
                    stage_index, stage.step, stage.max_iter, best, largest_change)
        if largest_change < schedule.tolerance:
            logger.info('converged after stage %d', stage_index)
            break

    score, eff, slices = objective.evaluate(m)
    if slices is None:
        slices = reconstructor.reconstruct(eff)
    curves = objective.curves(m)
    return CompensationResult(
        splines=m, motion=annihilating_motion(curves), curves=curves, eff=eff, slices=slices,
        score=score, trace=pd.DataFrame(rows), elapsed=time.perf_counter() - started,
        metric=metric.name, axes=axes, mask=objective.mask, filter_count=reconstructor.filter_count,
    )


def fine_tune(result: CompensationResult, second_metric: Metric, reconstructor: Reconstructor, base,
              schedule: StageSchedule = None) -> CompensationResult:
    """One more stage from the previous estimate, scored by a second metric"""
    schedule = (schedule or StageSchedule.default()).tail()
    offset = int(result.trace['stage'].max()) + 1 if len(result.trace) else 0
    tuned = optimize_trajectory(second_metric, reconstructor, base, result.splines, result.axes,
                                schedule, result.mask, stage_offset=offset)
    tuned.trace = pd.concat([result.trace, tuned.trace], ignore_index=True)
    tuned.elapsed += result.elapsed
    tuned.metric = f'{result.metric}+'
    return tuned


def compensate(metric: Metric, reconstructor: Reconstructor, base, n_nodes, axes, schedule=None,
               second_metric: Optional[Metric] = None, use_mask=False, threshold=0.1) -> CompensationResult:
    """
    Full pipeline: optional learned-metric mask computed once on the
    uncompensated reconstruction, the staged optimization from zero, then the
    optional fine-tuning stage.
    """
    base = as_effective(base)
    mask = None
    if use_mask:
        if not isinstance(metric, LearnedMetric):
            raise ConfigurationError('the motion mask needs the learned metric')
        mask = learned_mask(metric, reconstructor.reconstruct(base), threshold)
        logger.info('motion mask flags %d of %d views', int(mask.sum()), mask.size)
    m0 = MotionSplineSet.zeros(n_nodes, base.n_views)
    result = optimize_trajectory(metric, reconstructor, base, m0, axes, schedule, mask)
    if second_metric is not None:
        result = fine_tune(result, second_metric, reconstructor, base, schedule)
    return result
