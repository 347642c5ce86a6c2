"""
Image quality metrics over the nine reconstructed slices. Lower is better
for every optimization metric; SSIM is an evaluation score where higher is
better.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from skimage.metrics import structural_similarity

from app.core.fdk import SliceTriplets
from app.core.rpe import MarkerSet, mean_rpe
from app.utils.errors import ConfigurationError, DegenerateConfigurationError, DivergenceError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_BINS = 256
SOFT_CLASSIFY_THRESHOLD = 0.1
SSIM_SIGMA = 1.5


@dataclass(frozen=True, eq=False)
class IqmValue:
    score: float
    r2: Optional[np.ndarray] = None
    r3: Optional[np.ndarray] = None
    r4: Optional[np.ndarray] = None

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise DivergenceError(f'image quality metric is not finite: {self.score}')
        object.__setattr__(self, 'score', float(self.score))

    def __float__(self):
        return self.score

    @property
    def has_profiles(self):
        return self.r2 is not None


@dataclass(frozen=True)
class BoneWindow:
    lower: float
    upper: float
    bins: int = DEFAULT_BINS

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ConfigurationError(f'bone window needs lower < upper, got [{self.lower}, {self.upper}]')
        if self.bins < 2:
            raise ConfigurationError(f'bone window needs at least 2 bins, got {self.bins}')

    @classmethod
    def from_phantom(cls, ph, lower_frac=0.25, upper_frac=1.0, bins=DEFAULT_BINS):
        peak = ph.max_attenuation
        return cls(lower=lower_frac * peak, upper=upper_frac * peak, bins=bins)


def _values(slices):
    return slices.flat() if isinstance(slices, SliceTriplets) else np.asarray(slices, dtype=np.float64).ravel()


def entropy_iqm(slices, w: BoneWindow) -> IqmValue:
    """Shannon entropy (bits) of the joint histogram of the values inside the window"""
    values = _values(slices)
    inside = values[(values >= w.lower) & (values <= w.upper)]
    if inside.size == 0:
        raise DegenerateConfigurationError(f'no slice value falls inside the window [{w.lower}, {w.upper}]')
    counts, _ = np.histogram(inside, bins=w.bins, range=(w.lower, w.upper))
    p = counts[counts > 0] / inside.size
    return IqmValue(score=float(-np.sum(p * np.log2(p))))


def total_variation(image):
    """Isotropic TV of a 2-D image with forward differences, zero at the far borders"""
    image = np.asarray(image, dtype=np.float64)
    gx = np.zeros_like(image)
    gy = np.zeros_like(image)
    gx[:, :-1] = np.diff(image, axis=1)
    gy[:-1, :] = np.diff(image, axis=0)
    return float(np.sum(np.sqrt(gx * gx + gy * gy)))


def tv_iqm(slices, w: Optional[BoneWindow] = None) -> IqmValue:
    """
    Summed TV of every slice. With a window the values are clamped to it
    first, so only structure inside the window contributes.
    """
    images = slices if isinstance(slices, SliceTriplets) else np.asarray(slices)
    if w is None:
        return IqmValue(score=sum(total_variation(image) for image in images))
    return IqmValue(score=sum(total_variation(np.clip(image, w.lower, w.upper)) for image in images))


def oracle_iqm(eff, markers: MarkerSet) -> IqmValue:
    """True mRPE of the candidate geometry"""
    return IqmValue(score=mean_rpe(eff, markers))


def learned_iqm(slices: SliceTriplets, model) -> IqmValue:
    r1, r2, r3, r4 = model.predict(slices)
    return IqmValue(score=float(r1), r2=r2, r3=r3, r4=r4)


def soft_classify(r2, r3, r4, threshold=SOFT_CLASSIFY_THRESHOLD):
    """
    Motion-affected mask over the views. A view is negative (motion free)
    when 1/2 r2 + 1/4 r3 + 1/4 r4 <= threshold.
    """
    r2, r3, r4 = (np.asarray(r, dtype=np.float64) for r in (r2, r3, r4))
    if not r2.shape == r3.shape == r4.shape:
        raise ShapeError(f'profile lengths differ: {r2.shape}, {r3.shape}, {r4.shape}')
    return 0.5 * r2 + 0.25 * r3 + 0.25 * r4 > threshold


def ssim(vol_a, vol_b, mask=None, data_range=None):
    """Mean local SSIM scaled to [0, 100], optionally restricted to a mask"""
    a = np.asarray(vol_a, dtype=np.float64)
    b = np.asarray(vol_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f'SSIM needs equal shapes, got {a.shape} and {b.shape}')
    if data_range is None:
        data_range = max(a.max(), b.max()) - min(a.min(), b.min())
    if data_range <= 0:
        return 100.0 if np.array_equal(a, b) else 0.0
    _, local = structural_similarity(a, b, data_range=data_range, gaussian_weights=True,
                                     sigma=SSIM_SIGMA, use_sample_covariance=False, full=True)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            raise ShapeError(f'SSIM mask shape {mask.shape} does not match {a.shape}')
        if not mask.any():
            raise DegenerateConfigurationError('SSIM mask is empty')
        return 100.0 * float(local[mask].mean())
    return 100.0 * float(local.mean())


def slices_ssim(a: SliceTriplets, b: SliceTriplets, mask: Optional[SliceTriplets] = None):
    """
    Mean per-slice SSIM over the nine slices against reference b. With a mask,
    slices the mask does not touch are left out.
    """
    data_range = float(np.ptp(b.flat()))
    masks = list(mask) if mask is not None else [None] * 9
    scores = [ssim(x, y, m, data_range) for x, y, m in zip(a, b, masks) if m is None or np.any(m)]
    if not scores:
        raise DegenerateConfigurationError('SSIM mask does not intersect any slice')
    return float(np.mean(scores))


class Metric:
    """Uniform objective interface: metric(slices, eff) -> IqmValue"""
    name = 'metric'
    needs_reconstruction = True

    def __call__(self, slices, eff) -> IqmValue:
        raise NotImplementedError

    def __repr__(self):
        return f'<{type(self).__name__} {self.name}>'


class EntropyMetric(Metric):
    name = 'Ent'

    def __init__(self, window: BoneWindow):
        self.window = window

    def __call__(self, slices, eff):
        return entropy_iqm(slices, self.window)


class TvMetric(Metric):
    name = 'Tv'

    def __init__(self, window: Optional[BoneWindow] = None):
        self.window = window

    def __call__(self, slices, eff):
        return tv_iqm(slices, self.window)


class OracleMetric(Metric):
    name = 'Gt'
    needs_reconstruction = False

    def __init__(self, markers: MarkerSet):
        self.markers = markers

    def __call__(self, slices, eff):
        return oracle_iqm(eff, self.markers)


class LearnedMetric(Metric):
    name = 'Cnn'

    def __init__(self, model):
        self.model = model

    def __call__(self, slices, eff):
        return learned_iqm(slices, self.model)


def make_metric(name, window=None, markers=None, model=None) -> Metric:
    key = name.rstrip('+').lower()
    if key in ('ent', 'entropy'):
        if window is None:
            raise ConfigurationError('the entropy metric needs a bone window')
        return EntropyMetric(window)
    if key in ('tv', 'total-variation'):
        return TvMetric(window)
    if key in ('gt', 'oracle'):
        if markers is None:
            raise ConfigurationError('the oracle metric needs virtual markers')
        return OracleMetric(markers)
    if key in ('cnn', 'learned'):
        if model is None:
            raise ConfigurationError('the learned metric needs a trained model')
        return LearnedMetric(model)
    raise ConfigurationError(f'unknown metric: {name}')
