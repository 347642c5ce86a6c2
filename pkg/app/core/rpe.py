"""
Reprojection error of virtual markers.

The markers never appear in the images. They only measure how far a moved
geometry projects a fixed set of points from where the calibrated geometry
puts them, which makes the error independent of the scanned object.
"""
import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import pandas as pd
from scipy.spatial.transform import Rotation

from app.core.geometry import (AXES, EffectiveTrajectory, ProjectionMatrix, RigidMotion,
                               as_effective, motion_to_matrix, normalize_matrix, project_points)
from app.utils.errors import ConfigurationError, DegenerateConfigurationError, ShapeError

logger = logging.getLogger(__name__)

MIN_MARKERS = 6
DEFAULT_MARKER_RADII = (30.0, 60.0, 90.0)
VARIANTS = {
    'all': AXES,
    'in-plane': ('rz', 'tx', 'ty'),
    'out-plane': ('rx', 'ry', 'tz'),
}


@dataclass(frozen=True, eq=False)
class MarkerSet:
    points: np.ndarray
    radii: Tuple[float, ...] = ()

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] not in (3, 4):
            raise ShapeError(f'markers must be (K, 3) or (K, 4), got {points.shape}')
        if points.shape[1] == 3:
            points = np.hstack([points, np.ones((points.shape[0], 1))])
        if points.shape[0] < MIN_MARKERS:
            raise DegenerateConfigurationError(f'at least {MIN_MARKERS} markers are needed, got {points.shape[0]}')
        points.setflags(write=False)
        object.__setattr__(self, 'points', points)

    def __len__(self):
        return self.points.shape[0]

    @property
    def cartesian(self):
        return self.points[:, :3]


def fibonacci_sphere(n, radius):
    """
    Near-uniform lattice of n points on a sphere. An even count is built as
    antipodal pairs so the lattice centroid is the sphere centre.
    """
    golden = math.pi * (3.0 - math.sqrt(5.0))
    m = n // 2 if n % 2 == 0 else n
    i = np.arange(m)
    z = 1.0 - (2.0 * i + 1.0) / m
    r = np.sqrt(1.0 - z * z)
    points = np.stack([r * np.cos(golden * i), r * np.sin(golden * i), z], axis=1)
    if n % 2 == 0:
        points = np.concatenate([points, -points])
    return radius * points


def generate_markers(radii=DEFAULT_MARKER_RADII, per_sphere=30, seed=None) -> MarkerSet:
    """Fibonacci lattices on concentric spheres, each randomly oriented when seeded"""
    if not radii or min(radii) <= 0:
        raise ConfigurationError(f'marker radii must be positive, got {radii}')
    if per_sphere < 1:
        raise ConfigurationError(f'need at least one marker per sphere, got {per_sphere}')
    rng = np.random.default_rng(seed) if seed is not None else None
    spheres = []
    for radius in radii:
        points = fibonacci_sphere(per_sphere, float(radius))
        if rng is not None:
            points = Rotation.from_quat(rng.normal(size=4)).apply(points)
            # Restore the exact radius lost to rounding in the rotation
            points *= radius / np.linalg.norm(points, axis=1, keepdims=True)
        spheres.append(points)
    return MarkerSet(points=np.concatenate(spheres), radii=tuple(float(r) for r in radii))


def _matrix(p):
    return p.p if isinstance(p, ProjectionMatrix) else normalize_matrix(p)


def _offsets_mm(p, p_tilde, points, pitch):
    uv, _ = project_points(_matrix(p), points)
    uv_tilde, _ = project_points(_matrix(p_tilde), points)
    return (uv_tilde - uv) * np.asarray(pitch, dtype=np.float64)


def marker_rpe(p, p_tilde, a, pitch=(1.0, 1.0)):
    """Squared detector distance (mm^2) between the two projections of one marker"""
    a = np.asarray(a, dtype=np.float64)
    if a.shape == (3,):
        a = np.append(a, 1.0)
    offset = _offsets_mm(p, p_tilde, a[None, :], pitch)[0]
    return float(offset @ offset)


def view_rpe(p, p_tilde, markers: MarkerSet, pitch=(1.0, 1.0), rms=True):
    """
    Reprojection error of one view in mm: the root of the mean squared marker
    error, or the plain mean marker distance when rms is False.
    """
    offsets = _offsets_mm(p, p_tilde, markers.points, pitch)
    squared = np.einsum('ki,ki->k', offsets, offsets)
    return float(math.sqrt(squared.mean())) if rms else float(np.sqrt(squared).mean())


@dataclass(frozen=True, eq=False)
class RpeProfile:
    values: np.ndarray
    variant: str = 'all'

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f'unknown RPE variant: {self.variant}')
        values = np.array(self.values, dtype=np.float64)
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    @property
    def mean(self):
        return float(self.values.mean())

    def __len__(self):
        return self.values.size

    def to_frame(self):
        return pd.DataFrame({'view': np.arange(self.values.size), 'rpe': self.values, 'variant': self.variant})


def rpe_profile(eff: EffectiveTrajectory, markers: MarkerSet, variant='all', rms=True) -> RpeProfile:
    """Per-view RPE of P_i . M_i against P_i, with M_i restricted to the variant's axes"""
    if variant not in VARIANTS:
        raise ConfigurationError(f'unknown RPE variant: {variant}')
    eff = as_effective(eff)
    keep = VARIANTS[variant]
    masked = [m.masked(keep) for m in eff.motion]
    moving = np.array([not m.is_identity for m in masked])
    values = np.zeros(eff.n_views)
    if np.any(moving):
        base = eff.base.matrices[moving]
        motions = np.stack([motion_to_matrix(m) for m, move in zip(masked, moving) if move])
        moved = normalize_matrix(np.einsum('nij,njk->nik', base, motions))
        pitch = np.array([eff.intrinsics.du, eff.intrinsics.dv])
        uv, _ = project_points(base, markers.points)
        uv_moved, _ = project_points(moved, markers.points)
        offsets = (uv_moved - uv) * pitch
        squared = np.einsum('nki,nki->nk', offsets, offsets)
        values[moving] = np.sqrt(squared.mean(axis=1)) if rms else np.sqrt(squared).mean(axis=1)
    return RpeProfile(values=values, variant=variant)


def rpe_profiles(eff: EffectiveTrajectory, markers: MarkerSet, rms=True):
    return {variant: rpe_profile(eff, markers, variant, rms) for variant in VARIANTS}


def profiles_frame(profiles):
    """Long table of per-view RPE, one block per variant"""
    return pd.concat([profile.to_frame() for profile in profiles.values()], ignore_index=True)


def mean_rpe(eff: EffectiveTrajectory, markers: MarkerSet, rms=True):
    return rpe_profile(eff, markers, 'all', rms).mean


def view_motion_rpe(p, motion: RigidMotion, markers: MarkerSet, pitch):
    """RPE of a single view moved by a rigid motion"""
    moved = normalize_matrix(_matrix(p) @ motion_to_matrix(motion))
    return view_rpe(p, moved, markers, pitch)


def _similarity(points):
    """Hartley normalization: centroid at the origin, mean distance sqrt(dim)"""
    dim = points.shape[1]
    centroid = points.mean(axis=0)
    spread = np.linalg.norm(points - centroid, axis=1).mean()
    if spread <= 0:
        raise DegenerateConfigurationError('all correspondences coincide')
    scale = math.sqrt(dim) / spread
    transform = np.eye(dim + 1)
    transform[:dim, :dim] *= scale
    transform[:dim, dim] = -scale * centroid
    return transform


def solve_projection_from_markers(points3d, points2d, rank_tolerance=1e-10) -> ProjectionMatrix:
    """Least-squares projection matrix from marker correspondences (normalized DLT)"""
    points3d = np.asarray(points3d, dtype=np.float64)
    points2d = np.asarray(points2d, dtype=np.float64)
    if points3d.ndim == 2 and points3d.shape[1] == 4:
        points3d = points3d[:, :3] / points3d[:, 3:]
    if points3d.ndim != 2 or points3d.shape[1] != 3 or points2d.shape != (points3d.shape[0], 2):
        raise ShapeError(f'expected (K, 3) and (K, 2) correspondences, got {points3d.shape} and {points2d.shape}')
    k = points3d.shape[0]
    if k < MIN_MARKERS:
        raise DegenerateConfigurationError(f'at least {MIN_MARKERS} correspondences are needed, got {k}')

    t3 = _similarity(points3d)
    t2 = _similarity(points2d)
    x = (np.hstack([points3d, np.ones((k, 1))])) @ t3.T
    d = (np.hstack([points2d, np.ones((k, 1))])) @ t2.T
    rows = np.zeros((2 * k, 12))
    rows[0::2, 0:4] = x
    rows[0::2, 8:12] = -d[:, 0:1] * x
    rows[1::2, 4:8] = x
    rows[1::2, 8:12] = -d[:, 1:2] * x
    _, singular, vt = np.linalg.svd(rows)
    if singular[-2] <= rank_tolerance * singular[0]:
        raise DegenerateConfigurationError('marker configuration does not determine a unique projection')
    normalized = vt[-1].reshape(3, 4)
    matrix = np.linalg.solve(t2, normalized @ t3)
    logger.debug('solved projection from %d markers, condition %.3g', k, singular[0] / singular[-2])
    return ProjectionMatrix(matrix)
