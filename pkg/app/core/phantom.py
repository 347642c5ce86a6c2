"""
Analytic ellipsoid head phantom.

Densities are additive linear attenuation coefficients in 1/mm, so nested
ellipsoids with negative density carve cavities out of their parents.
Projections are exact line integrals; the voxelized ground truth samples the
same indicator sum at voxel centres.
"""
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Tuple

import numpy as np

from app.core.geometry import Trajectory, rotation_matrix, source_position
from app.utils.errors import ConfigurationError, DomainError, StorageError

logger = logging.getLogger(__name__)

CLINICAL_VOXEL_SPACING = 0.84


@dataclass(frozen=True, eq=False)
class Ellipsoid:
    center: Tuple[float, float, float]
    semi_axes: Tuple[float, float, float]
    density: float
    angles: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    rotation: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.semi_axes) != 3 or min(self.semi_axes) <= 0:
            raise ConfigurationError(f'ellipsoid semi-axes must be three positive values, got {self.semi_axes}')
        object.__setattr__(self, 'center', tuple(float(c) for c in self.center))
        object.__setattr__(self, 'semi_axes', tuple(float(a) for a in self.semi_axes))
        object.__setattr__(self, 'angles', tuple(float(a) for a in self.angles))
        rotation = rotation_matrix(*self.angles)
        rotation.setflags(write=False)
        object.__setattr__(self, 'rotation', rotation)

    @property
    def volume(self):
        a, b, c = self.semi_axes
        return 4.0 / 3.0 * math.pi * a * b * c

    def to_dict(self):
        return {'center': list(self.center), 'semi_axes': list(self.semi_axes),
                'angles': list(self.angles), 'density': self.density}

    def scaled(self, factors, shift=(0.0, 0.0, 0.0)):
        factors = np.asarray(factors, dtype=np.float64)
        return Ellipsoid(center=tuple(np.asarray(self.center) * factors + shift),
                         semi_axes=tuple(np.asarray(self.semi_axes) * factors),
                         density=self.density, angles=self.angles)


@dataclass(frozen=True, eq=False)
class Phantom:
    ellipsoids: Tuple[Ellipsoid, ...]
    metal: Tuple[Ellipsoid, ...] = ()
    name: str = 'phantom'
    voi: Optional[dict] = None

    def __post_init__(self):
        object.__setattr__(self, 'ellipsoids', tuple(self.ellipsoids))
        object.__setattr__(self, 'metal', tuple(self.metal))
        if not self.ellipsoids:
            raise ConfigurationError('a phantom needs at least one ellipsoid')

    @property
    def components(self):
        return self.ellipsoids + self.metal

    @property
    def bounding_radius(self):
        return max(float(np.linalg.norm(e.center)) + max(e.semi_axes) for e in self.components)

    @property
    def inscribed_radius(self):
        """Radius of the largest isocentred sphere inside the outermost component"""
        outer = max(self.ellipsoids, key=lambda e: float(np.prod(e.semi_axes)))
        return max(0.0, min(outer.semi_axes) - float(np.linalg.norm(outer.center)))

    @property
    def max_attenuation(self):
        """Largest attenuation found at the component centres and just inside their surfaces"""
        points = []
        for e in self.components:
            points.append(e.center)
            for axis in range(3):
                step = 0.97 * e.semi_axes[axis] * e.rotation[:, axis]
                points.extend([np.add(e.center, step), np.subtract(e.center, step)])
        return float(np.max(sample(self, np.array(points))))

    def to_dict(self):
        data = {'name': self.name, 'ellipsoids': [e.to_dict() for e in self.ellipsoids],
                'metal': [{'center': list(m.center), 'radius': m.semi_axes[0], 'density': m.density}
                          for m in self.metal]}
        if self.voi is not None:
            data['voi'] = dict(self.voi)
        return data


def phantom_from_dict(data, scale=1.0):
    """Build a phantom from its definition record, scaling all lengths"""
    try:
        ellipsoids = [
            Ellipsoid(center=tuple(scale * np.asarray(e['center'], dtype=np.float64)),
                      semi_axes=tuple(scale * np.asarray(e['semi_axes'], dtype=np.float64)),
                      density=float(e['density']),
                      angles=tuple(e.get('angles', (0.0, 0.0, 0.0))))
            for e in data['ellipsoids']
        ]
        metal = [
            Ellipsoid(center=tuple(scale * np.asarray(m['center'], dtype=np.float64)),
                      semi_axes=(scale * float(m['radius']),) * 3,
                      density=float(m['density']))
            for m in data.get('metal', [])
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f'invalid phantom definition: {exc}') from exc
    voi = None
    if data.get('voi'):
        voi = {'center': [scale * c for c in data['voi']['center']],
               'radius': scale * float(data['voi']['radius'])}
    return Phantom(ellipsoids=tuple(ellipsoids), metal=tuple(metal),
                   name=data.get('name', 'phantom'), voi=voi)


def load_phantom_definition(path=None):
    if path is None:
        text = resources.files('app.data').joinpath('default_phantom.json').read_text()
    else:
        try:
            with open(path) as handle:
                text = handle.read()
        except OSError as exc:
            raise StorageError(f'cannot read phantom definition {path}: {exc}') from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f'phantom definition {path} is not valid JSON: {exc}') from exc


def default_head_phantom(scale=0.5):
    return phantom_from_dict(load_phantom_definition(), scale=scale)


def phantom_variant(base: Phantom, seed, jitter=0.06):
    """
    Seeded anatomical variation of a phantom: an anisotropic head size
    change, density changes and displaced small features.
    """
    rng = np.random.default_rng(seed)
    factors = 1.0 + rng.uniform(-jitter, jitter, size=3)
    radius = base.bounding_radius
    ellipsoids = []
    for e in base.ellipsoids:
        shift = np.zeros(3)
        if max(e.semi_axes) < 0.15 * radius:
            shift = rng.normal(0.0, jitter * 0.25 * radius, size=3)
        density = e.density * (1.0 + rng.uniform(-jitter, jitter) / 2.0)
        varied = e.scaled(factors, shift)
        ellipsoids.append(Ellipsoid(varied.center, varied.semi_axes, density, varied.angles))
    metal = tuple(m.scaled(factors) for m in base.metal)
    voi = None
    if base.voi is not None:
        voi = {'center': list(np.asarray(base.voi['center']) * factors), 'radius': base.voi['radius']}
    return Phantom(ellipsoids=tuple(ellipsoids), metal=metal, name=f'{base.name}-v{seed}', voi=voi)


def line_integrals(ph: Phantom, sources, directions):
    """
    Attenuation line integrals along rays starting at the sources.

    sources: (3,) or (R, 3); directions: (R, 3) unit vectors.
    """
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    sources = np.broadcast_to(np.asarray(sources, dtype=np.float64), directions.shape)
    norms = np.linalg.norm(directions, axis=-1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        raise DomainError('ray directions must be unit vectors')
    total = np.zeros(directions.shape[0])
    for e in ph.components:
        semi = np.asarray(e.semi_axes)
        # Local frame: q = R^T (x - c) / semi
        p = ((sources - e.center) @ e.rotation) / semi
        d = (directions @ e.rotation) / semi
        a = np.einsum('ij,ij->i', d, d)
        b = np.einsum('ij,ij->i', p, d)
        c = np.einsum('ij,ij->i', p, p) - 1.0
        disc = b * b - a * c
        hit = disc > 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        t_near = (-b - root) / a
        t_far = (-b + root) / a
        chord = np.where(hit, np.clip(t_far, 0.0, None) - np.clip(t_near, 0.0, None), 0.0)
        total += e.density * chord
    return total


def line_integral(ph: Phantom, src, direction):
    return float(line_integrals(ph, np.asarray(src, dtype=np.float64), np.asarray(direction)[None, :])[0])


def pixel_rays(p, intrinsics):
    """Source position and unit ray directions through every detector pixel centre"""
    matrix = np.asarray(p)
    u, v = np.meshgrid(np.arange(intrinsics.nu, dtype=np.float64),
                       np.arange(intrinsics.nv, dtype=np.float64))
    pixels = np.stack([u, v, np.ones_like(u)], axis=-1).reshape(-1, 3)
    directions = np.linalg.solve(matrix[:, :3], pixels.T).T
    directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
    return source_position(matrix), directions


def render_projections(ph: Phantom, traj: Trajectory, noise_sigma=0.0, seed=None, threads=1):
    """Analytic DRR stack of shape (N, nv, nu)"""
    intrinsics = traj.intrinsics
    if ph.bounding_radius >= intrinsics.sid:
        raise ConfigurationError(f'phantom radius {ph.bounding_radius:.1f} mm reaches the source orbit')

    def render_view(matrix):
        source, directions = pixel_rays(matrix, intrinsics)
        return line_integrals(ph, source, directions).reshape(intrinsics.nv, intrinsics.nu)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        stack = np.stack(list(pool.map(render_view, traj.matrices)))
    logger.info('rendered %d projections of %s (%dx%d)', traj.n_views, ph.name, intrinsics.nv, intrinsics.nu)
    if noise_sigma > 0:
        stack = add_noise(stack, noise_sigma, seed)
    return stack


def add_noise(stack, sigma, seed):
    rng = np.random.default_rng(seed)
    return stack + rng.normal(0.0, sigma, size=stack.shape)


def sample(ph: Phantom, points):
    """Sum of densities of all components containing each point; points (..., 3)"""
    points = np.asarray(points, dtype=np.float64)
    values = np.zeros(points.shape[:-1])
    for e in ph.components:
        q = ((points - e.center) @ e.rotation) / np.asarray(e.semi_axes)
        values += np.where(np.einsum('...i,...i->...', q, q) <= 1.0, e.density, 0.0)
    return values


@dataclass(frozen=True)
class VoxelGrid:
    dims: Tuple[int, int, int]
    spacing: float = CLINICAL_VOXEL_SPACING
    origin: Optional[Tuple[float, float, float]] = None

    def __post_init__(self):
        if not self.spacing > 0:
            raise ConfigurationError(f'voxel spacing must be positive, got {self.spacing}')
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigurationError(f'grid dims must be three positive counts, got {self.dims}')
        object.__setattr__(self, 'dims', tuple(int(d) for d in self.dims))
        if self.origin is None:
            # Centred on the isocenter
            origin = tuple(-(d - 1) / 2.0 * self.spacing for d in self.dims)
            object.__setattr__(self, 'origin', origin)

    @property
    def extent(self):
        return tuple(d * self.spacing for d in self.dims)

    @property
    def voxel_volume(self):
        return self.spacing ** 3

    def axis(self, index):
        return self.origin[index] + self.spacing * np.arange(self.dims[index])

    def coordinates(self):
        """World coordinates of voxel centres, shape (nz, ny, nx, 3)"""
        z, y, x = np.meshgrid(self.axis(2), self.axis(1), self.axis(0), indexing='ij')
        return np.stack([x, y, z], axis=-1)


def voxelize(ph: Phantom, grid: VoxelGrid):
    """Ground-truth volume of shape (nz, ny, nx)"""
    return sample(ph, grid.coordinates())
