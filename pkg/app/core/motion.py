"""
Akima-spline motion model.

A rigid motion (or the trajectory annihilating it) is described by six
splines, one per axis, sharing M nodes placed over the view indices
0..N-1. Evaluating the splines at every view yields the 6xN motion curves.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.interpolate import Akima1DInterpolator

from app.core.geometry import AXES, RigidMotion
from app.utils.errors import ConfigurationError, DomainError, ShapeError

logger = logging.getLogger(__name__)

DOMAIN_TOLERANCE = 1e-9


@dataclass(frozen=True, eq=False)
class AkimaSpline:
    positions: np.ndarray
    values: np.ndarray
    _interpolator: object = field(init=False, repr=False)

    def __post_init__(self):
        positions = np.array(self.positions, dtype=np.float64)
        values = np.array(self.values, dtype=np.float64)
        if positions.ndim != 1 or positions.shape != values.shape:
            raise ShapeError('spline positions and values must be 1-D arrays of equal length')
        if positions.size < 2:
            raise ConfigurationError('an Akima spline needs at least 2 nodes')
        if np.any(np.diff(positions) <= 0):
            raise ConfigurationError('spline node positions must be strictly increasing')
        positions.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, 'positions', positions)
        object.__setattr__(self, 'values', values)
        interpolator = None
        if positions.size > 2:
            interpolator = Akima1DInterpolator(positions, values)
        object.__setattr__(self, '_interpolator', interpolator)

    def __call__(self, x):
        return akima_eval(self, x)


def akima_eval(s: AkimaSpline, x):
    """Evaluate the spline at view index x (scalar or array) inside the node range"""
    x_arr = np.asarray(x, dtype=np.float64)
    lo, hi = s.positions[0], s.positions[-1]
    if np.any(x_arr < lo - DOMAIN_TOLERANCE) or np.any(x_arr > hi + DOMAIN_TOLERANCE):
        raise DomainError(f'spline evaluated outside [{lo}, {hi}]')
    x_arr = np.clip(x_arr, lo, hi)
    if s._interpolator is None:
        out = np.interp(x_arr, s.positions, s.values)
    else:
        out = s._interpolator(x_arr)
        # Interpolation is exact at the nodes
        hit = np.searchsorted(s.positions, x_arr)
        hit = np.clip(hit, 0, s.positions.size - 1)
        on_node = s.positions[hit] == x_arr
        out = np.where(on_node, s.values[hit], out)
    return float(out) if np.ndim(x) == 0 else out


def uniform_positions(n_nodes, n_views):
    if n_nodes < 2:
        raise ConfigurationError(f'need at least 2 spline nodes, got {n_nodes}')
    return np.linspace(0.0, n_views - 1.0, n_nodes)


@dataclass(frozen=True, eq=False)
class MotionSplineSet:
    """m in R^{6xM}: node values per axis (rows ordered as AXES) on shared positions"""
    positions: np.ndarray
    values: np.ndarray
    window: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        positions = np.array(self.positions, dtype=np.float64)
        values = np.array(self.values, dtype=np.float64)
        if values.shape != (len(AXES), positions.size):
            raise ShapeError(f'node values must have shape (6, {positions.size}), got {values.shape}')
        if positions.size < 2 or np.any(np.diff(positions) <= 0):
            raise ConfigurationError('spline node positions must be strictly increasing (>= 2 nodes)')
        positions.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, 'positions', positions)
        object.__setattr__(self, 'values', values)

    @classmethod
    def zeros(cls, n_nodes, n_views):
        return cls(positions=uniform_positions(n_nodes, n_views), values=np.zeros((len(AXES), n_nodes)))

    @property
    def n_nodes(self):
        return self.positions.size

    def spline(self, axis):
        return AkimaSpline(self.positions, self.values[AXES.index(axis)])

    def node(self, axis, index):
        return float(self.values[AXES.index(axis), index])

    def with_node(self, axis, index, value):
        values = self.values.copy()
        values[AXES.index(axis), index] = value
        return MotionSplineSet(self.positions, values, self.window)

    def with_values(self, values):
        return MotionSplineSet(self.positions, values, self.window)

    def negated(self):
        return MotionSplineSet(self.positions, -self.values, self.window)

    def active_axes(self):
        return tuple(axis for axis, row in zip(AXES, self.values) if np.any(row))

    def to_dict(self):
        data = {
            'positions': self.positions.tolist(),
            'values': {axis: row.tolist() for axis, row in zip(AXES, self.values)},
        }
        if self.window is not None:
            data['window'] = list(self.window)
        return data

    @classmethod
    def from_dict(cls, data):
        positions = np.asarray(data['positions'], dtype=np.float64)
        values = np.zeros((len(AXES), positions.size))
        for axis, row in data.get('values', {}).items():
            if axis not in AXES:
                raise ConfigurationError(f'unknown motion axis: {axis}')
            values[AXES.index(axis)] = row
        window = tuple(data['window']) if data.get('window') is not None else None
        return cls(positions=positions, values=values, window=window)


@dataclass(frozen=True, eq=False)
class MotionCurves:
    """t(m) in R^{6xN}"""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != len(AXES):
            raise ShapeError(f'motion curves must have shape (6, N), got {values.shape}')
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def n_views(self):
        return self.values.shape[1]

    def axis(self, name):
        return self.values[AXES.index(name)]

    def masked(self, keep_views):
        """Zero the curves on views where keep_views is False"""
        return MotionCurves(np.where(np.asarray(keep_views, dtype=bool)[None, :], self.values, 0.0))


def zero_splines(n_nodes, n_views) -> MotionSplineSet:
    return MotionSplineSet.zeros(n_nodes, n_views)


def curves_from_splines(m: MotionSplineSet, n_views: int) -> MotionCurves:
    if abs(m.positions[0]) > DOMAIN_TOLERANCE or abs(m.positions[-1] - (n_views - 1)) > DOMAIN_TOLERANCE:
        raise DomainError(f'spline nodes span [{m.positions[0]}, {m.positions[-1]}], '
                          f'expected [0, {n_views - 1}]')
    views = np.arange(n_views, dtype=np.float64)
    curves = np.zeros((len(AXES), n_views))
    for row, axis in enumerate(AXES):
        if np.any(m.values[row]):
            curves[row] = akima_eval(m.spline(axis), views)
    return MotionCurves(curves)


def annihilating_motion(t: MotionCurves):
    """Per-view rigid transforms C(t(m)) realizing the candidate compensation"""
    return tuple(RigidMotion.from_axes(column) for column in t.values.T)


def motion_from_splines(m: MotionSplineSet, n_views: int):
    return annihilating_motion(curves_from_splines(m, n_views))


def random_motion(axis, amplitude, n_nodes, n_views, seed, safe_range=None) -> MotionSplineSet:
    """
    Random misalignment of a single axis confined to a window of a third of
    the views placed inside the Parker-safe view range.

    Only nodes at least one node spacing inside the window are perturbed, so
    the interpolated curve itself vanishes outside the window.
    """
    if axis not in AXES:
        raise ConfigurationError(f'unknown motion axis: {axis}')
    if amplitude < 0:
        raise ConfigurationError(f'amplitude must be non-negative, got {amplitude}')
    positions = uniform_positions(n_nodes, n_views)
    spacing = positions[1] - positions[0]
    lo, hi = safe_range if safe_range is not None else (0.0, n_views - 1.0)
    length = math.ceil(n_views / 3)
    if hi - lo < length:
        raise ConfigurationError(f'a {length}-view window does not fit the Parker-safe range [{lo}, {hi}]')

    rng = np.random.default_rng(seed)
    start = rng.uniform(lo, hi - length)
    inside = (positions - spacing >= start) & (positions + spacing <= start + length)
    if not np.any(inside):
        raise ConfigurationError(f'no spline node fits inside the {length}-view window '
                                 f'with {n_nodes} nodes over {n_views} views')
    values = np.zeros((len(AXES), n_nodes))
    values[AXES.index(axis), inside] = rng.uniform(-amplitude, amplitude, size=int(inside.sum()))
    logger.debug('random motion on %s: window [%.1f, %.1f], %d nodes', axis, start, start + length,
                 int(inside.sum()))
    return MotionSplineSet(positions=positions, values=values, window=(float(start), float(start + length)))
