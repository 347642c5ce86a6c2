"""
Motion-estimation benchmark.

Every cell applies a fixed scenario motion to one axis of one phantom's scan,
estimates the annihilating trajectory with one metric and scores the result
by its residual misalignment and by SSIM against the motion-free
reconstruction.
"""
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from app.core.autofocus import StageSchedule, compensate
from app.core.fdk import Reconstructor, SliceSet, SliceTriplets, parker_safe_range
from app.core.geometry import AXES, Trajectory, as_effective, compose
from app.core.iqm import BoneWindow, make_metric, slices_ssim
from app.core.motion import MotionCurves, MotionSplineSet, curves_from_splines, motion_from_splines, uniform_positions
from app.core.phantom import Phantom, render_projections
from app.core.rpe import MarkerSet, mean_rpe
from app.utils.errors import ConfigurationError, DegenerateConfigurationError

logger = logging.getLogger(__name__)

METRICS = ('None', 'Ent', 'Ent+', 'Tv', 'Tv+', 'Cnn', 'Cnn+', 'Gt')
FINE_TUNE_METRIC = {'Ent+': 'Tv', 'Tv+': 'Ent', 'Cnn+': 'Ent'}
MASKED_METRICS = ('Cnn', 'Cnn+')
CELL_KEYS = ['scenario', 'axis', 'metric', 'phantom']
# Wall-clock columns; every other column is fixed by the seed and config
TIMING_COLUMNS = ['runtime']


@dataclass(frozen=True)
class Scenario:
    name: str
    motion_nodes: int
    annihilation_nodes: int
    amplitude: float
    shape: str = 'single'

    def __post_init__(self):
        if self.shape not in ('single', 'multi'):
            raise ConfigurationError(f'unknown scenario shape: {self.shape}')
        if self.motion_nodes < 2 or self.annihilation_nodes < 2:
            raise ConfigurationError('scenario node counts must be at least 2')


SCENARIOS = {
    'A': Scenario('A', motion_nodes=20, annihilation_nodes=20, amplitude=2.0, shape='single'),
    'B': Scenario('B', motion_nodes=17, annihilation_nodes=40, amplitude=5.0, shape='multi'),
}


def _bump(u, shape):
    if shape == 'single':
        return np.sin(math.pi * u) ** 2
    return np.sin(math.pi * u) * np.sin(3.0 * math.pi * u)


def scenario_motion(sc: Scenario, n_views, axis='tz', safe_range=None) -> MotionSplineSet:
    """
    Deterministic bump on one axis inside a window of a third of the views,
    centred in the safe range. The largest node value equals the amplitude.
    """
    if axis not in AXES:
        raise ConfigurationError(f'unknown motion axis: {axis}')
    positions = uniform_positions(sc.motion_nodes, n_views)
    spacing = positions[1] - positions[0]
    lo, hi = safe_range if safe_range is not None else (0.0, n_views - 1.0)
    length = math.ceil(n_views / 3)
    start = (lo + hi - length) / 2.0
    inside = (positions - spacing >= start) & (positions + spacing <= start + length)
    if not np.any(inside):
        raise ConfigurationError(f'scenario {sc.name}: no node fits inside the motion window')
    shape = _bump((positions[inside] - start) / length, sc.shape)
    values = np.zeros((len(AXES), positions.size))
    values[AXES.index(axis), inside] = sc.amplitude * shape / np.max(np.abs(shape))
    return MotionSplineSet(positions=positions, values=values, window=(float(start), float(start + length)))


def misalignment_curves(estimate: MotionCurves, truth: MotionCurves, axes=None):
    """Mean absolute residual t_hat + t_gt over views and the active axes"""
    if axes is None:
        axes = [a for a in AXES if np.any(truth.axis(a)) or np.any(estimate.axis(a))]
    if not axes:
        return 0.0
    residual = np.stack([estimate.axis(a) + truth.axis(a) for a in axes])
    return float(np.mean(np.abs(residual)))


def misalignment(m_hat: MotionSplineSet, m_gt: MotionSplineSet, n_views, axes=None):
    return misalignment_curves(curves_from_splines(m_hat, n_views), curves_from_splines(m_gt, n_views), axes)


@dataclass
class BenchRow:
    scenario: str
    axis: str
    metric: str
    phantom: str
    misalignment: float
    ssim: float
    ssim_voi: float
    mrpe: float
    runtime: float
    evaluations: int = 0


@dataclass
class BenchConfig:
    trajectory: Trajectory
    slices: SliceSet
    markers: MarkerSet
    schedule: StageSchedule = field(default_factory=StageSchedule.default)
    window_fractions: Sequence[float] = (0.25, 1.0)
    bins: int = 256
    model: Optional[object] = None
    threshold: float = 0.1
    noise_sigma: float = 0.0
    seed: int = 0
    workers: int = 1
    threads: int = 1
    all_axes: bool = False


@dataclass
class BenchmarkResult:
    rows: pd.DataFrame
    curves: Dict[tuple, dict]

    def summary(self):
        return summarize(self.rows)

    def table(self):
        """Rows without wall-clock columns; identical across seeded re-runs"""
        return self.rows.drop(columns=TIMING_COLUMNS)

    def timings(self):
        return self.rows[CELL_KEYS + TIMING_COLUMNS]


def summarize(rows: pd.DataFrame):
    """Per (scenario, axis, metric) means over phantoms"""
    grouped = rows.groupby(CELL_KEYS[:3], sort=False)
    summary = grouped[['misalignment', 'ssim', 'ssim_voi', 'mrpe', 'runtime']].mean()
    summary['phantoms'] = grouped.size()
    return summary.reset_index()


def voi_mask(slices: SliceSet, ph: Phantom) -> Optional[SliceTriplets]:
    if not ph.voi:
        return None
    centre = np.asarray(ph.voi['center'], dtype=np.float64)
    radius = float(ph.voi['radius'])
    world = slices.world()
    return SliceTriplets(**{o: np.linalg.norm(world[o] - centre, axis=-1) <= radius for o in world})


def _ssim_pair(slices, reference, mask):
    score = slices_ssim(slices, reference)
    score_voi = float('nan')
    if mask is not None:
        try:
            score_voi = slices_ssim(slices, reference, mask)
        except DegenerateConfigurationError:
            logger.warning('volume of interest does not intersect the slices')
    return score, score_voi


def _metric(name, window, config: BenchConfig):
    key = name.rstrip('+')
    if key == 'Cnn' and config.model is None:
        raise ConfigurationError(f'metric {name} needs a trained model')
    return make_metric(key, window=window, markers=config.markers, model=config.model)


def run_cell(sc: Scenario, axis, metric_name, ph: Phantom, raw, static: SliceTriplets, config: BenchConfig):
    """One benchmark cell; returns the row and the curves for plotting"""
    trajectory = config.trajectory
    n_views = trajectory.n_views
    m_gt = scenario_motion(sc, n_views, axis, parker_safe_range(trajectory))
    corrupted = compose(trajectory, motion_from_splines(m_gt, n_views))
    truth = curves_from_splines(m_gt, n_views)
    mask = voi_mask(config.slices, ph)
    reconstructor = Reconstructor(config.slices, raw, trajectory, config.threads)
    started = time.perf_counter()
    if metric_name == 'None':
        slices = reconstructor.reconstruct(corrupted)
        estimate = MotionCurves(np.zeros_like(truth.values))
        eff, evaluations = corrupted, 0
    else:
        low, high = config.window_fractions
        window = BoneWindow.from_phantom(ph, low, high, config.bins)
        metric = _metric(metric_name, window, config)
        second = _metric(FINE_TUNE_METRIC[metric_name], window, config) if metric_name in FINE_TUNE_METRIC else None
        axes = AXES if config.all_axes else (axis,)
        result = compensate(metric, reconstructor, corrupted, sc.annihilation_nodes, axes, config.schedule,
                            second_metric=second, use_mask=metric_name in MASKED_METRICS,
                            threshold=config.threshold)
        slices, estimate, eff = result.slices, result.curves, result.eff
        evaluations = int(result.trace['evaluations'].max()) if len(result.trace) else 0
    runtime = time.perf_counter() - started
    score, score_voi = _ssim_pair(slices, static, mask)
    row = BenchRow(scenario=sc.name, axis=axis, metric=metric_name, phantom=ph.name,
                   misalignment=misalignment_curves(estimate, truth, [axis] if not config.all_axes else None),
                   ssim=score, ssim_voi=score_voi, mrpe=mean_rpe(eff, config.markers), runtime=runtime,
                   evaluations=evaluations)
    logger.info('cell %s/%s/%s/%s: misalignment %.4f, SSIM %.2f', sc.name, axis, metric_name, ph.name,
                row.misalignment, row.ssim)
    return row, {'motion': truth.axis(axis), 'annihilating': estimate.axis(axis)}


def run_benchmark(scenarios: Sequence[Scenario], axes: Sequence[str], metrics: Sequence[str],
                  phantoms: List[Phantom], config: BenchConfig) -> BenchmarkResult:
    """All (scenario, axis, metric, phantom) cells, run in a work pool; rows keep submission order"""
    unknown = [m for m in metrics if m not in METRICS]
    if unknown:
        raise ConfigurationError(f'unknown metrics: {unknown}')
    if any(m.startswith('Cnn') for m in metrics) and config.model is None:
        raise ConfigurationError('Cnn metrics need a trained model')
    if not phantoms:
        raise ConfigurationError('the benchmark needs at least one phantom')
    if config.model is not None:
        # workers share the model; predict never changes its mode
        config.model.eval()
    static_eff = as_effective(config.trajectory)
    prepared = []
    for index, ph in enumerate(phantoms):
        raw = render_projections(ph, config.trajectory, config.noise_sigma, seed=config.seed + index,
                                 threads=config.threads)
        static = Reconstructor(config.slices, raw, config.trajectory, config.threads).reconstruct(static_eff)
        prepared.append((ph, raw, static))

    cells = [(sc, axis, metric, ph, raw, static)
             for sc in scenarios for axis in axes for metric in metrics for ph, raw, static in prepared]
    logger.info('running %d benchmark cells with %d workers', len(cells), config.workers)
    with ThreadPoolExecutor(max_workers=max(1, config.workers)) as pool:
        futures = [pool.submit(run_cell, *cell, config) for cell in cells]
        outcomes = [future.result() for future in futures]
    rows = pd.DataFrame([asdict(row) for row, _ in outcomes])
    curves = {(row.scenario, row.axis, row.metric, row.phantom): curve for row, curve in outcomes}
    return BenchmarkResult(rows=rows, curves=curves)
