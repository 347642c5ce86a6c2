"""
Short-scan FDK reconstruction onto the nine-slice set.

The projections are weighted and filtered exactly once; every candidate
geometry afterwards only changes the back-projection. The Reconstructor keeps
one back-projected contribution per view, so a candidate that alters only a
few views re-projects only those.
"""
import hashlib
import logging
import math
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Tuple

import numpy as np
from scipy import fft

from app.core.geometry import EffectiveTrajectory, Intrinsics, Trajectory, as_effective
from app.core.phantom import CLINICAL_VOXEL_SPACING, VoxelGrid, sample
from app.utils.errors import ConfigurationError, ShapeError, StateError

logger = logging.getLogger(__name__)

ORIENTATIONS = ('ax', 'co', 'sa')
SLICE_OFFSETS = (-0.2, 0.0, 0.2)
CLINICAL_VOLUME_DIMS = (216, 256, 70)
PARKER_SAFE_WEIGHT = 0.99
# Parker pairs sum to one, so the half-weighted full-orbit integral doubles
REDUNDANCY_FACTOR = 2.0


@dataclass(frozen=True, eq=False)
class FilteredStack:
    data: np.ndarray
    cosine_weighted: bool = False
    parker_weighted: bool = False
    ramp_filtered: bool = False

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ShapeError(f'projection stack must be (N, nv, nu), got {data.shape}')
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @property
    def is_filtered(self):
        return self.cosine_weighted and self.parker_weighted and self.ramp_filtered

    @property
    def digest(self):
        return hashlib.sha256(self.data.tobytes()).hexdigest()


def _as_stack(stack):
    return stack if isinstance(stack, FilteredStack) else FilteredStack(stack)


def detector_offsets(intrinsics: Intrinsics):
    """Physical (u, v) offsets in mm of the pixel centres from the principal point"""
    u = (np.arange(intrinsics.nu) - intrinsics.cu) * intrinsics.du
    v = (np.arange(intrinsics.nv) - intrinsics.cv) * intrinsics.dv
    return u, v


def cosine_weight(stack, intrinsics: Intrinsics) -> FilteredStack:
    stack = _as_stack(stack)
    if stack.cosine_weighted:
        raise StateError('projection stack is already cosine weighted')
    u, v = detector_offsets(intrinsics)
    weights = intrinsics.sdd / np.sqrt(intrinsics.sdd ** 2 + u[None, :] ** 2 + v[:, None] ** 2)
    return replace(stack, data=stack.data * weights[None], cosine_weighted=True)


def parker_weight(beta, u_mm, intrinsics: Intrinsics):
    """
    Parker weight of the ray at scan angle beta (radians from the scan start)
    through the detector column at offset u_mm.

    Redundant rays are (beta, g) and (beta + pi - 2 g, -g) with
    g = atan(u / sdd); the wedge formulas take the fan angle in the
    rotation sense, which is -g for this detector orientation.
    """
    half_fan = math.atan(intrinsics.nu * intrinsics.du / 2.0 / intrinsics.sdd)
    beta = np.asarray(beta, dtype=np.float64)
    gamma = -np.arctan(np.asarray(u_mm, dtype=np.float64) / intrinsics.sdd)
    entering = beta < 2.0 * (half_fan - gamma)
    exiting = beta > math.pi - 2.0 * gamma
    w_in = np.sin(math.pi / 4.0 * beta / (half_fan - gamma)) ** 2
    remaining = np.clip(math.pi + 2.0 * half_fan - beta, 0.0, None)
    w_out = np.sin(math.pi / 4.0 * remaining / (half_fan + gamma)) ** 2
    weights = np.where(entering, w_in, np.where(exiting, w_out, 1.0))
    return np.clip(weights, 0.0, 1.0)


def parker_weights(trajectory: Trajectory):
    """W in R^{N x nu}; the weights do not depend on the detector row"""
    intrinsics = trajectory.intrinsics
    required = 180.0 + intrinsics.fan_angle
    if trajectory.span < required - 1e-9:
        raise ConfigurationError(f'scan span {trajectory.span:.3f} deg is shorter than '
                                 f'180 deg + fan angle ({required:.3f} deg)')
    beta = np.radians(trajectory.angles - trajectory.angles[0])
    u, _ = detector_offsets(intrinsics)
    return parker_weight(beta[:, None], u[None, :], intrinsics)


def parker_safe_range(trajectory: Trajectory, threshold=PARKER_SAFE_WEIGHT):
    """First and last view whose mean Parker weight exceeds the threshold"""
    means = parker_weights(trajectory).mean(axis=1)
    safe = np.flatnonzero(means > threshold)
    if safe.size == 0:
        raise ConfigurationError('no view is free of Parker redundancy weighting')
    return int(safe[0]), int(safe[-1])


def apply_parker(stack, trajectory: Trajectory) -> FilteredStack:
    stack = _as_stack(stack)
    if stack.parker_weighted:
        raise StateError('projection stack is already Parker weighted')
    weights = parker_weights(trajectory)
    return replace(stack, data=stack.data * weights[:, None, :], parker_weighted=True)


def ramp_kernel(n, du):
    """Spatial band-limited kernel of the |eta|/2 ramp sampled at offsets n (in pixels)"""
    n = np.asarray(n)
    kernel = np.zeros(n.shape, dtype=np.float64)
    kernel[n == 0] = 1.0 / (8.0 * du ** 2)
    odd = (n % 2) == 1
    kernel[odd] = -1.0 / (2.0 * math.pi ** 2 * n[odd].astype(np.float64) ** 2 * du ** 2)
    return kernel


def ramp_filter(stack, du=None):
    """
    Row-wise ramp filtering. Rows are zero-padded to the next power of two of
    at least twice their length; the spectrum of the spatial band-limited
    kernel is applied and the result is scaled by the pixel pitch.
    """
    if isinstance(stack, FilteredStack):
        if stack.ramp_filtered:
            raise StateError('projection stack is already ramp filtered')
        if not stack.cosine_weighted:
            raise StateError('ramp filtering requires a cosine-weighted stack')
        data = stack.data
    else:
        data = np.asarray(stack, dtype=np.float64)
    if du is None:
        raise ConfigurationError('ramp filtering needs the detector pixel pitch')
    nu = data.shape[-1]
    padded = 1 << int(math.ceil(math.log2(2 * nu)))
    offsets = np.concatenate([np.arange(0, padded // 2 + 1), np.arange(-padded // 2 + 1, 0)])
    spectrum = fft.rfft(ramp_kernel(offsets, du)).real
    rows = fft.rfft(data, n=padded, axis=-1)
    filtered = fft.irfft(rows * spectrum, n=padded, axis=-1)[..., :nu] * du
    if isinstance(stack, FilteredStack):
        return replace(stack, data=filtered, ramp_filtered=True)
    return filtered


def filter_stack(raw, trajectory: Trajectory) -> FilteredStack:
    intrinsics = trajectory.intrinsics
    raw = _as_stack(raw)
    if raw.data.shape != (trajectory.n_views, intrinsics.nv, intrinsics.nu):
        raise ShapeError(f'stack shape {raw.data.shape} does not match trajectory '
                         f'({trajectory.n_views}, {intrinsics.nv}, {intrinsics.nu})')
    stack = cosine_weight(raw, intrinsics)
    stack = apply_parker(stack, trajectory)
    return ramp_filter(stack, du=intrinsics.du)


@dataclass(frozen=True, eq=False)
class Slice:
    orientation: str
    offset: float
    coords: np.ndarray

    @property
    def shape(self):
        return self.coords.shape[:2]


@dataclass(frozen=True, eq=False)
class SliceSet:
    """Nine slices: three axial, three coronal and three sagittal"""
    slices: Tuple[Slice, ...]
    spacing: float
    points: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, 'slices', tuple(self.slices))
        if len(self.slices) != 9:
            raise ShapeError(f'a slice set holds nine slices, got {len(self.slices)}')
        for orientation in ORIENTATIONS:
            shapes = {s.shape for s in self.slices if s.orientation == orientation}
            if len(shapes) != 1:
                raise ShapeError(f'{orientation} slices must share one shape')
        points = np.concatenate([s.coords.reshape(-1, 4) for s in self.slices])
        if not np.all(np.isfinite(points)):
            raise ShapeError('slice coordinates must be finite')
        points.setflags(write=False)
        object.__setattr__(self, 'points', points)

    def shape(self, orientation):
        return next(s.shape for s in self.slices if s.orientation == orientation)

    def dims(self):
        return {orientation: self.shape(orientation) for orientation in ORIENTATIONS}

    def split(self, values):
        """Regroup a flat per-point vector into SliceTriplets"""
        groups = {orientation: [] for orientation in ORIENTATIONS}
        start = 0
        for s in self.slices:
            count = s.shape[0] * s.shape[1]
            groups[s.orientation].append(values[start:start + count].reshape(s.shape))
            start += count
        return SliceTriplets(**{o: np.stack(groups[o]) for o in ORIENTATIONS})

    def world(self):
        """Cartesian coordinates grouped like SliceTriplets"""
        groups = {orientation: [] for orientation in ORIENTATIONS}
        for s in self.slices:
            groups[s.orientation].append(s.coords[..., :3])
        return {o: np.stack(groups[o]) for o in ORIENTATIONS}


def desk_grid(scale=0.5, spacing=CLINICAL_VOXEL_SPACING):
    """Volume grid with the slice pixel counts scaled down, voxel size kept"""
    dims = tuple(max(2, int(round(d * scale))) for d in CLINICAL_VOLUME_DIMS)
    return VoxelGrid(dims=dims, spacing=spacing)


def make_slice_set(grid: VoxelGrid, offsets=SLICE_OFFSETS) -> SliceSet:
    """
    Place the triplets at fractions of the volume extent along each normal:
    axial planes are (x rows, y columns), coronal (z, x), sagittal (z, y).
    """
    x, y, z = grid.axis(0), grid.axis(1), grid.axis(2)
    extent = grid.extent
    centre = [grid.origin[i] + (grid.dims[i] - 1) / 2.0 * grid.spacing for i in range(3)]
    slices = []
    for fraction in offsets:
        depth = centre[2] + fraction * extent[2]
        xx, yy = np.meshgrid(x, y, indexing='ij')
        slices.append(Slice('ax', depth, _homogeneous(xx, yy, np.full_like(xx, depth))))
    for fraction in offsets:
        depth = centre[1] + fraction * extent[1]
        zz, xx = np.meshgrid(z, x, indexing='ij')
        slices.append(Slice('co', depth, _homogeneous(xx, np.full_like(xx, depth), zz)))
    for fraction in offsets:
        depth = centre[0] + fraction * extent[0]
        zz, yy = np.meshgrid(z, y, indexing='ij')
        slices.append(Slice('sa', depth, _homogeneous(np.full_like(yy, depth), yy, zz)))
    return SliceSet(slices=tuple(slices), spacing=grid.spacing)


def _homogeneous(x, y, z):
    return np.stack([x, y, z, np.ones_like(x)], axis=-1)


@dataclass(frozen=True, eq=False)
class SliceTriplets:
    ax: np.ndarray
    co: np.ndarray
    sa: np.ndarray

    def __iter__(self):
        for orientation in ORIENTATIONS:
            yield from getattr(self, orientation)

    def orientation(self, name):
        return getattr(self, name)

    def flat(self):
        return np.concatenate([getattr(self, o).ravel() for o in ORIENTATIONS])

    def map(self, func):
        return SliceTriplets(**{o: func(getattr(self, o)) for o in ORIENTATIONS})

    def dims(self):
        return {o: getattr(self, o).shape[1:] for o in ORIENTATIONS}


def _bilinear(image, u, v):
    nv, nu = image.shape
    inside = (u >= 0) & (u <= nu - 1) & (v >= 0) & (v <= nv - 1)
    u0 = np.clip(np.floor(u), 0, nu - 2).astype(np.intp)
    v0 = np.clip(np.floor(v), 0, nv - 2).astype(np.intp)
    fu = np.clip(u - u0, 0.0, 1.0)
    fv = np.clip(v - v0, 0.0, 1.0)
    value = ((1 - fu) * (1 - fv) * image[v0, u0] + fu * (1 - fv) * image[v0, u0 + 1]
             + (1 - fu) * fv * image[v0 + 1, u0] + fu * fv * image[v0 + 1, u0 + 1])
    return np.where(inside, value, 0.0)


def view_contribution(matrix, points, projection, scale):
    """Distance-weighted, bilinearly sampled contribution of one view"""
    hom = points @ matrix.T
    depth = hom[:, 2]
    safe = depth > 0
    depth = np.where(safe, depth, 1.0)
    u = hom[:, 0] / depth
    v = hom[:, 1] / depth
    # U(P, a) = (w0 / w(a))^2 with w0 the isocenter depth
    weight = (matrix[2, 3] / depth) ** 2
    return np.where(safe, scale * weight * _bilinear(projection, u, v), 0.0)


def backprojection_scale(eff):
    intrinsics = eff.intrinsics
    return REDUNDANCY_FACTOR * eff.angular_step * intrinsics.sdd / intrinsics.sid


def _check_backprojection(eff, filtered):
    if not isinstance(filtered, FilteredStack) or not filtered.is_filtered:
        raise StateError('back-projection needs a cosine, Parker and ramp filtered stack')
    if filtered.data.shape[0] != eff.n_views:
        raise ShapeError(f'{filtered.data.shape[0]} projections for {eff.n_views} views')


def backproject_points(points, eff, filtered: FilteredStack, threads=1):
    eff = as_effective(eff)
    _check_backprojection(eff, filtered)
    scale = backprojection_scale(eff)

    def contribute(index):
        return view_contribution(eff.matrices[index], points, filtered.data[index], scale)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        contributions = np.stack(list(pool.map(contribute, range(eff.n_views))))
    return contributions.sum(axis=0)


def backproject(slices: SliceSet, eff: EffectiveTrajectory, filtered: FilteredStack, threads=1) -> SliceTriplets:
    return slices.split(backproject_points(slices.points, eff, filtered, threads))


class Reconstructor:
    """
    Filter once, back-project many times.

    Per-view contributions are cached together with the matrix that produced
    them; views whose composed matrix is unchanged are not re-projected.
    """

    def __init__(self, slices: SliceSet, raw, trajectory: Trajectory, threads=1):
        self.slices = slices
        self.trajectory = trajectory
        self.threads = threads
        self.filtered = filter_stack(raw, trajectory)
        self.filter_count = 1
        self._matrices = None
        self._contributions = None

    def reconstruct(self, eff: EffectiveTrajectory) -> SliceTriplets:
        eff = as_effective(eff)
        _check_backprojection(eff, self.filtered)
        if eff.base is not self.trajectory and not np.array_equal(eff.base.matrices, self.trajectory.matrices):
            raise ShapeError('effective trajectory is not based on the reconstructor trajectory')
        matrices = eff.matrices
        if self._contributions is None:
            changed = np.arange(eff.n_views)
            self._contributions = np.empty((eff.n_views, self.slices.points.shape[0]))
            self._matrices = np.empty_like(matrices)
        else:
            changed = np.flatnonzero(np.any(matrices != self._matrices, axis=(1, 2)))
        scale = backprojection_scale(eff)

        def contribute(index):
            self._contributions[index] = view_contribution(
                matrices[index], self.slices.points, self.filtered.data[index], scale)

        with ThreadPoolExecutor(max_workers=max(1, self.threads)) as pool:
            list(pool.map(contribute, changed))
        self._matrices[changed] = matrices[changed]
        logger.debug('back-projected %d of %d views', changed.size, eff.n_views)
        return self.slices.split(self._contributions.sum(axis=0))


_FILTER_CACHE = OrderedDict()
_FILTER_CACHE_SIZE = 4


def _cached_filter(raw, trajectory):
    data = raw.data if isinstance(raw, FilteredStack) else np.asarray(raw, dtype=np.float64)
    key = (hashlib.sha256(data.tobytes()).hexdigest(), trajectory.matrices.tobytes())
    if key not in _FILTER_CACHE:
        _FILTER_CACHE[key] = filter_stack(data, trajectory)
        while len(_FILTER_CACHE) > _FILTER_CACHE_SIZE:
            _FILTER_CACHE.popitem(last=False)
    _FILTER_CACHE.move_to_end(key)
    return _FILTER_CACHE[key]


def reconstruct(slices: SliceSet, eff: EffectiveTrajectory, raw, threads=1) -> SliceTriplets:
    """Cosine, Parker and ramp weighting (cached per stack), then back-projection"""
    eff = as_effective(eff)
    return backproject(slices, eff, _cached_filter(raw, eff.base), threads)


def reconstruct_volume(grid: VoxelGrid, eff: EffectiveTrajectory, raw, threads=1):
    """Full (nz, ny, nx) volume, back-projected one axial plane at a time"""
    eff = as_effective(eff)
    filtered = _cached_filter(raw, eff.base)
    coords = grid.coordinates()
    volume = np.empty(coords.shape[:3])
    for index, plane in enumerate(coords):
        points = np.concatenate([plane.reshape(-1, 3), np.ones((plane[..., 0].size, 1))], axis=1)
        volume[index] = backproject_points(points, eff, filtered, threads).reshape(plane.shape[:2])
    return volume


def ground_truth_slices(slices: SliceSet, ph) -> SliceTriplets:
    """Phantom densities sampled at the slice points"""
    return slices.split(sample(ph, slices.points[:, :3]))


def inscribed_cylinder(slices: SliceSet, intrinsics: Intrinsics) -> SliceTriplets:
    """Slice points inside the cylinder every view of the scan sees in full"""
    half_fan = math.atan(intrinsics.nu * intrinsics.du / 2.0 / intrinsics.sdd)
    radius = intrinsics.sid * math.sin(half_fan)
    half_height = (intrinsics.sid - radius) * intrinsics.nv * intrinsics.dv / 2.0 / intrinsics.sdd
    world = slices.world()
    return SliceTriplets(**{
        o: (np.hypot(world[o][..., 0], world[o][..., 1]) <= radius) & (np.abs(world[o][..., 2]) <= half_height)
        for o in world
    })
