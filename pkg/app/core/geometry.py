"""
Projective cone-beam geometry.

World coordinates are millimetres with the isocenter at the origin and the
scanner rotating about +z. At scan angle 0 the source sits on the -y axis,
the detector u axis runs along +x and the v axis along -z. Every projection
matrix is stored scale-normalized: the third row of its left 3x3 block has
unit norm and the isocenter has positive depth, so the homogeneous depth w
of a point is its distance from the source along the principal ray.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from app.utils.errors import (ConfigurationError, PointBehindSourceError,
                              ShapeError, DegenerateConfigurationError)

logger = logging.getLogger(__name__)

MIN_DEPTH = 1e-9
AXES = ('tx', 'ty', 'tz', 'rx', 'ry', 'rz')
ISOCENTER = np.array([0.0, 0.0, 0.0, 1.0])


def _frozen(array):
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class Intrinsics:
    """Detector and source distances of a flat-panel C-arm"""
    sid: float
    sdd: float
    nu: int
    nv: int
    du: float
    dv: float
    cu: Optional[float] = None
    cv: Optional[float] = None

    def __post_init__(self):
        if not self.sid > 0:
            raise ConfigurationError(f'sid must be positive, got {self.sid}')
        if not self.sdd > self.sid:
            raise ConfigurationError(f'sdd ({self.sdd}) must exceed sid ({self.sid})')
        if self.nu < 2 or self.nv < 2:
            raise ConfigurationError(f'detector needs at least 2x2 pixels, got {self.nu}x{self.nv}')
        if not (self.du > 0 and self.dv > 0):
            raise ConfigurationError(f'pixel pitch must be positive, got ({self.du}, {self.dv})')
        # Principal point defaults to the detector centre in pixel-centre indexing
        if self.cu is None:
            object.__setattr__(self, 'cu', (self.nu - 1) / 2.0)
        if self.cv is None:
            object.__setattr__(self, 'cv', (self.nv - 1) / 2.0)

    @property
    def fan_angle(self):
        """Full fan angle in degrees"""
        return math.degrees(2.0 * math.atan(self.nu * self.du / 2.0 / self.sdd))

    @property
    def magnification(self):
        return self.sdd / self.sid

    def camera_matrix(self):
        return np.array([
            [self.sdd / self.du, 0.0, self.cu],
            [0.0, self.sdd / self.dv, self.cv],
            [0.0, 0.0, 1.0],
        ])

    def to_dict(self):
        return {
            'sid': self.sid, 'sdd': self.sdd, 'nu': self.nu, 'nv': self.nv,
            'du': self.du, 'dv': self.dv, 'cu': self.cu, 'cv': self.cv,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(**{key: data[key] for key in ('sid', 'sdd', 'nu', 'nv', 'du', 'dv')},
                   cu=data.get('cu'), cv=data.get('cv'))


def normalize_matrix(p):
    """Scale a 3x4 matrix (or a stack of them) to the canonical normalization"""
    p = np.asarray(p, dtype=np.float64)
    norm = np.linalg.norm(p[..., 2, :3], axis=-1)
    if np.any(norm <= 0):
        raise DegenerateConfigurationError('projection matrix has a zero depth row')
    p = p / norm[..., None, None]
    sign = np.where(p[..., 2, 3] < 0, -1.0, 1.0)
    return p * sign[..., None, None]


@dataclass(frozen=True, eq=False)
class ProjectionMatrix:
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.shape != (3, 4):
            raise ShapeError(f'projection matrix must be 3x4, got {p.shape}')
        if np.linalg.matrix_rank(p[:, :3]) < 3:
            raise DegenerateConfigurationError('left 3x3 block of projection matrix is singular')
        object.__setattr__(self, 'p', _frozen(normalize_matrix(p)))

    @property
    def source(self):
        return source_position(self)

    def to_list(self):
        return self.p.tolist()


@dataclass(frozen=True)
class RigidMotion:
    """Euler angles in degrees and translations in mm"""
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    def __post_init__(self):
        values = (self.rx, self.ry, self.rz, self.tx, self.ty, self.tz)
        if not all(math.isfinite(v) for v in values):
            raise ConfigurationError(f'rigid motion parameters must be finite, got {values}')

    @classmethod
    def from_axes(cls, values):
        """Build from a mapping or a 6-vector ordered as AXES"""
        if isinstance(values, dict):
            return cls(**{axis: float(values.get(axis, 0.0)) for axis in AXES})
        return cls(**dict(zip(AXES, (float(v) for v in values))))

    def as_axes(self):
        return np.array([getattr(self, axis) for axis in AXES])

    def masked(self, keep):
        return RigidMotion(**{axis: (getattr(self, axis) if axis in keep else 0.0) for axis in AXES})

    @property
    def is_identity(self):
        return not np.any(self.as_axes())


def rotation_matrix(rx, ry, rz):
    """Rz . Ry . Rx for angles in degrees"""
    return Rotation.from_euler('ZYX', (rz, ry, rx), degrees=True).as_matrix()


def motion_to_matrix(m: RigidMotion):
    """R = Rz Ry Rx about the isocenter, followed by the translation"""
    matrix = np.eye(4)
    matrix[:3, :3] = rotation_matrix(m.rx, m.ry, m.rz)
    matrix[:3, 3] = (m.tx, m.ty, m.tz)
    return matrix


def matrix_to_motion(matrix):
    # At gimbal lock scipy zeroes the third angle (rx)
    matrix = np.asarray(matrix, dtype=np.float64)
    rz, ry, rx = Rotation.from_matrix(matrix[:3, :3]).as_euler('ZYX', degrees=True)
    return RigidMotion(rx=float(rx), ry=float(ry), rz=float(rz),
                       tx=float(matrix[0, 3]), ty=float(matrix[1, 3]), tz=float(matrix[2, 3]))


def project_point(p: Union[ProjectionMatrix, np.ndarray], a) -> Tuple[float, float]:
    """Dehomogenized detector position (u, v) in pixels of a homogeneous point"""
    matrix = p.p if isinstance(p, ProjectionMatrix) else np.asarray(p, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    if a.shape == (3,):
        a = np.append(a, 1.0)
    x, y, w = matrix @ a
    if w <= MIN_DEPTH:
        raise PointBehindSourceError(f'point {a.tolist()} has depth {w:.3g} under the projection')
    return x / w, y / w


def project_points(matrices, points):
    """
    Project K homogeneous points under one or many matrices.

    matrices: (3, 4) or (N, 3, 4); points: (K, 4).
    Returns (..., K, 2) pixel coordinates and the (..., K) depths.
    """
    matrices = np.asarray(matrices, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    hom = np.einsum('...ij,kj->...ki', matrices, points)
    depth = hom[..., 2]
    if np.any(depth <= MIN_DEPTH):
        raise PointBehindSourceError('at least one point lies at or behind the source')
    return hom[..., :2] / depth[..., None], depth


def source_position(p):
    matrix = p.p if isinstance(p, ProjectionMatrix) else np.asarray(p, dtype=np.float64)
    return -np.linalg.solve(matrix[:, :3], matrix[:, 3])


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Calibrated short-scan trajectory P = (P_0, ..., P_N-1)"""
    views: Tuple[Tuple[ProjectionMatrix, float], ...]
    intrinsics: Intrinsics
    matrices: np.ndarray = field(init=False, repr=False, compare=False)
    angles: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'views', tuple(self.views))
        if len(self.views) < 2:
            raise ConfigurationError('a trajectory needs at least two views')
        angles = np.array([angle for _, angle in self.views], dtype=np.float64)
        if np.any(np.diff(angles) <= 0):
            raise ConfigurationError('scan angles must be strictly increasing')
        object.__setattr__(self, 'angles', _frozen(angles))
        object.__setattr__(self, 'matrices', _frozen(np.stack([p.p for p, _ in self.views])))

    @property
    def n_views(self):
        return len(self.views)

    @property
    def span(self):
        return float(self.angles[-1] - self.angles[0])

    @property
    def angular_step(self):
        """Mean angular increment in radians"""
        return math.radians(self.span / (self.n_views - 1))

    def __len__(self):
        return self.n_views

    def __getitem__(self, index):
        return self.views[index][0]

    def to_dict(self):
        return {
            'intrinsics': self.intrinsics.to_dict(),
            'views': [{'angle': float(angle), 'matrix': p.to_list()} for p, angle in self.views],
        }

    @classmethod
    def from_dict(cls, data):
        views = [(ProjectionMatrix(np.array(view['matrix'])), float(view['angle']))
                 for view in data['views']]
        return cls(views=tuple(views), intrinsics=Intrinsics.from_dict(data['intrinsics']))


@dataclass(frozen=True, eq=False)
class EffectiveTrajectory:
    """E = P o M, kept decomposable into the calibration and the per-view motion"""
    base: Trajectory
    motion: Tuple[RigidMotion, ...]
    composed: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'motion', tuple(self.motion))
        if len(self.motion) != self.base.n_views:
            raise ShapeError(f'{len(self.motion)} motions given for {self.base.n_views} views')
        motions = np.stack([motion_to_matrix(m) for m in self.motion])
        composed = normalize_matrix(np.einsum('nij,njk->nik', self.base.matrices, motions))
        object.__setattr__(self, 'composed', _frozen(composed))

    @property
    def intrinsics(self):
        return self.base.intrinsics

    @property
    def n_views(self):
        return self.base.n_views

    @property
    def matrices(self):
        return self.composed

    @property
    def angles(self):
        return self.base.angles

    @property
    def angular_step(self):
        return self.base.angular_step

    def motion_matrices(self):
        return np.stack([motion_to_matrix(m) for m in self.motion])

    @property
    def is_static(self):
        return all(m.is_identity for m in self.motion)


def build_short_scan(intrinsics: Intrinsics, n_views: int, start_angle: float = 0.0) -> Trajectory:
    """Circular short scan over 180 degrees plus the fan angle"""
    if n_views < 2:
        raise ConfigurationError(f'short scan needs at least 2 views, got {n_views}')
    span = 180.0 + intrinsics.fan_angle
    angles = start_angle + np.linspace(0.0, span, n_views)
    k = intrinsics.camera_matrix()
    views = []
    for angle in angles:
        beta = math.radians(angle)
        c, s = math.cos(beta), math.sin(beta)
        source = np.array([intrinsics.sid * s, -intrinsics.sid * c, 0.0])
        z_cam = np.array([-s, c, 0.0])
        x_cam = np.array([c, s, 0.0])
        y_cam = np.cross(z_cam, x_cam)
        rotation = np.stack([x_cam, y_cam, z_cam])
        extrinsic = np.hstack([rotation, (-rotation @ source)[:, None]])
        views.append((ProjectionMatrix(k @ extrinsic), float(angle)))
    logger.debug('built short scan: %d views over %.2f deg', n_views, span)
    return Trajectory(views=tuple(views), intrinsics=intrinsics)


def compose(base: Union[Trajectory, EffectiveTrajectory],
            motion: Sequence[RigidMotion]) -> EffectiveTrajectory:
    """Element-wise composition P_i . M_i of a trajectory with a motion list"""
    motion = tuple(motion)
    if len(motion) != base.n_views:
        raise ShapeError(f'{len(motion)} motions given for {base.n_views} views')
    if isinstance(base, EffectiveTrajectory):
        combined = tuple(
            previous if extra.is_identity else
            matrix_to_motion(motion_to_matrix(previous) @ motion_to_matrix(extra))
            for previous, extra in zip(base.motion, motion)
        )
        return EffectiveTrajectory(base=base.base, motion=combined)
    return EffectiveTrajectory(base=base, motion=motion)


def identity_motion(n_views):
    return tuple(RigidMotion() for _ in range(n_views))


def as_effective(trajectory: Union[Trajectory, EffectiveTrajectory]) -> EffectiveTrajectory:
    """Wrap a calibrated trajectory as the motion-free effective trajectory"""
    if isinstance(trajectory, EffectiveTrajectory):
        return trajectory
    return EffectiveTrajectory(base=trajectory, motion=identity_motion(trajectory.n_views))
