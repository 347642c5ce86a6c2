"""
Appearance learning: a small siamese multi-task regressor that reads the nine
slices of a reconstruction and predicts the reprojection error of the
geometry that produced it.

One convolutional trunk is shared by the three orientation branches; each
branch sees the three slices of its orientation as channels. The branch
features are pooled to a common grid, concatenated in the fixed order
(axial, coronal, sagittal), fused by a 1x1 convolution and fed to four
heads: the mean RPE and the all-axes, in-plane and out-plane profiles.
"""
import copy
import logging
import math
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from torch import nn

from app.core.fdk import ORIENTATIONS, Reconstructor, SliceSet, SliceTriplets, parker_safe_range
from app.core.geometry import AXES, Trajectory, compose
from app.core.iqm import SOFT_CLASSIFY_THRESHOLD, soft_classify
from app.core.motion import MotionSplineSet, motion_from_splines, random_motion
from app.core.phantom import Phantom, render_projections
from app.core.rpe import MarkerSet, rpe_profiles
from app.utils import storage
from app.utils.errors import ConfigurationError, DivergenceError, ShapeError, StorageError

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
ACTIVATIONS = {'relu': nn.ReLU, 'tanh': nn.Tanh, 'identity': nn.Identity}
LABEL_NAMES = ('mrpe', 'profile_all', 'profile_ip', 'profile_op')
STANDARDIZE_EPS = 1e-8


def standardize(x):
    """Zero mean, unit variance per sample over all channels and pixels"""
    dims = tuple(range(1, x.dim()))
    mean = x.mean(dim=dims, keepdim=True)
    std = x.std(dim=dims, keepdim=True, correction=0)
    return (x - mean) / (std + STANDARDIZE_EPS)


def standardize_slices(slices: SliceTriplets) -> SliceTriplets:
    return slices.map(lambda stack: (stack - stack.mean()) / (stack.std() + STANDARDIZE_EPS))


@dataclass(frozen=True)
class Architecture:
    input_dims: Tuple[Tuple[int, int], ...]
    n_views: int
    channels: Tuple[int, ...] = (16, 32, 48, 64)
    fusion_channels: int = 64
    pooled: Tuple[int, int] = (2, 2)
    activation: str = 'relu'

    def __post_init__(self):
        object.__setattr__(self, 'input_dims', tuple(tuple(int(d) for d in dims) for dims in self.input_dims))
        object.__setattr__(self, 'channels', tuple(int(c) for c in self.channels))
        object.__setattr__(self, 'pooled', tuple(int(p) for p in self.pooled))
        if len(self.input_dims) != len(ORIENTATIONS):
            raise ConfigurationError('architecture needs input dims for the three orientations')
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f'unknown activation: {self.activation}')
        if self.n_views < 1 or not self.channels or min(self.channels) < 1 or self.fusion_channels < 1:
            raise ConfigurationError('architecture sizes must be positive')

    @classmethod
    def for_slices(cls, slices: SliceTriplets, n_views, **kwargs):
        dims = slices.dims()
        return cls(input_dims=tuple(dims[o] for o in ORIENTATIONS), n_views=n_views, **kwargs)

    def dims(self):
        return dict(zip(ORIENTATIONS, self.input_dims))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


class RegressorModel(nn.Module):

    def __init__(self, architecture: Architecture):
        super().__init__()
        self.architecture = architecture
        activation = ACTIVATIONS[architecture.activation]
        blocks = []
        in_channels = 3
        for out_channels in architecture.channels:
            blocks += [nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
                       activation(),
                       nn.AvgPool2d(kernel_size=2, ceil_mode=True)]
            in_channels = out_channels
        self.trunk = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(architecture.pooled)
        self.fusion = nn.Conv2d(len(ORIENTATIONS) * in_channels, architecture.fusion_channels, kernel_size=1)
        self.fusion_activation = activation()
        n = architecture.n_views
        self.heads = nn.ModuleList([nn.Linear(architecture.fusion_channels, size) for size in (1, n, n, n)])

    def branch(self, orientation):
        """The trunk applied to one orientation; all three return the same module"""
        if orientation not in ORIENTATIONS:
            raise ShapeError(f'unknown orientation: {orientation}')
        return self.trunk

    def features(self, inputs: Dict[str, torch.Tensor]):
        expected = self.architecture.dims()
        stacks = []
        for orientation in ORIENTATIONS:
            x = inputs[orientation]
            if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != expected[orientation]:
                raise ShapeError(f'{orientation} input must be (B, 3, {expected[orientation][0]}, '
                                 f'{expected[orientation][1]}), got {tuple(x.shape)}')
            stacks.append(self.pool(self.branch(orientation)(standardize(x))))
        # y_lat: ordered concatenation of the branch features
        fused = self.fusion_activation(self.fusion(torch.cat(stacks, dim=1)))
        return fused.mean(dim=(2, 3))

    def forward(self, inputs: Dict[str, torch.Tensor]):
        features = self.features(inputs)
        return tuple(head(features) for head in self.heads)

    @torch.inference_mode()
    def predict(self, slices: SliceTriplets):
        """
        (r1, r2, r3, r4) as a float and three numpy vectors. The module mode
        is left alone, so a model shared between threads must be put in eval
        mode once beforehand.
        """
        outputs = self(slices_to_inputs([slices], dtype=self.dtype))
        r1, r2, r3, r4 = (o[0].cpu().numpy().astype(np.float64) for o in outputs)
        return float(r1[0]), r2, r3, r4

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def parameter_count(self):
        return sum(p.numel() for p in self.parameters())


def forward(model: RegressorModel, slices: SliceTriplets):
    return model.predict(slices)


def slices_to_inputs(batch: List[SliceTriplets], dtype=torch.float32):
    return {o: torch.as_tensor(np.stack([s.orientation(o) for s in batch]), dtype=dtype) for o in ORIENTATIONS}


@dataclass(frozen=True, eq=False)
class Sample:
    slices: SliceTriplets
    mrpe: float
    profile_all: np.ndarray
    profile_ip: np.ndarray
    profile_op: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def labels(self):
        return self.mrpe, self.profile_all, self.profile_ip, self.profile_op

    @property
    def n_views(self):
        return self.profile_all.size

    @property
    def phantom(self):
        return self.metadata.get('phantom')


def labels_to_tensors(batch: List[Sample], dtype=torch.float32):
    return (
        torch.as_tensor([[s.mrpe] for s in batch], dtype=dtype),
        torch.as_tensor(np.stack([s.profile_all for s in batch]), dtype=dtype),
        torch.as_tensor(np.stack([s.profile_ip for s in batch]), dtype=dtype),
        torch.as_tensor(np.stack([s.profile_op for s in batch]), dtype=dtype),
    )


def sample_labels(eff, markers: MarkerSet):
    profiles = rpe_profiles(eff, markers)
    return dict(mrpe=profiles['all'].mean, profile_all=profiles['all'].values,
                profile_ip=profiles['in-plane'].values, profile_op=profiles['out-plane'].values)


def recompute_labels(sample: Sample, trajectory: Trajectory, markers: MarkerSet):
    """Labels of a stored sample recomputed from its spline metadata"""
    splines = MotionSplineSet.from_dict(sample.metadata['splines'])
    eff = compose(trajectory, motion_from_splines(splines, trajectory.n_views))
    return sample_labels(eff, markers)


@dataclass
class DatasetConfig:
    trajectory: Trajectory
    slices: SliceSet
    markers: MarkerSet
    n_nodes: int = 20
    seed: int = 0
    noise_sigma: float = 0.0
    threads: int = 1


def generate_dataset(phantoms: List[Phantom], n_samples, amplitude_range, config: DatasetConfig) -> List[Sample]:
    """
    Motion-affected reconstructions with their RPE labels. Projections are
    rendered once per phantom; phantoms are used in turn.
    """
    if not phantoms:
        raise ConfigurationError('dataset generation needs at least one phantom')
    low, high = amplitude_range
    if low < 0 or high < low:
        raise ConfigurationError(f'invalid amplitude range {amplitude_range}')
    trajectory = config.trajectory
    n_views = trajectory.n_views
    safe_range = parker_safe_range(trajectory)
    rng = np.random.default_rng(config.seed)
    reconstructors = {}
    samples = []
    for index in range(n_samples):
        phantom_index = index % len(phantoms)
        ph = phantoms[phantom_index]
        if phantom_index not in reconstructors:
            raw = render_projections(ph, trajectory, config.noise_sigma,
                                     seed=config.seed + phantom_index, threads=config.threads)
            reconstructors[phantom_index] = Reconstructor(config.slices, raw, trajectory, config.threads)
        axis = AXES[int(rng.integers(len(AXES)))]
        amplitude = float(rng.uniform(low, high))
        seed = int(rng.integers(2 ** 31))
        splines = random_motion(axis, amplitude, config.n_nodes, n_views, seed, safe_range)
        eff = compose(trajectory, motion_from_splines(splines, n_views))
        slices = reconstructors[phantom_index].reconstruct(eff)
        metadata = {'phantom': ph.name, 'axis': axis, 'amplitude': amplitude, 'seed': seed,
                    'splines': splines.to_dict()}
        samples.append(Sample(slices=standardize_slices(slices), metadata=metadata,
                              **sample_labels(eff, config.markers)))
        if (index + 1) % 50 == 0:
            logger.info('generated %d/%d samples', index + 1, n_samples)
    logger.info('generated %d samples from %d phantoms', len(samples), len(phantoms))
    return samples


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    split: Tuple[float, float, float] = (0.7, 0.2, 0.1)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError(f'learning rate must be non-negative, got {self.learning_rate}')
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigurationError('batch size, epochs and patience must be positive')
        if len(self.split) != 3 or min(self.split) < 0 or not math.isclose(sum(self.split), 1.0):
            raise ConfigurationError(f'split ratios must be three non-negative values summing to 1, got {self.split}')


def split_by_phantom(samples: List[Sample], ratios=(0.7, 0.2, 0.1)):
    """Train/validation/test partition with every phantom in exactly one part"""
    names = sorted({s.phantom for s in samples})
    counts = [int(round(r * len(names))) for r in ratios]
    counts[0] = len(names) - counts[1] - counts[2]
    if counts[0] < 1:
        raise ConfigurationError(f'{len(names)} phantoms cannot be split as {ratios}')
    bounds = np.cumsum([0] + counts)
    parts = [set(names[bounds[i]:bounds[i + 1]]) for i in range(3)]
    return tuple([s for s in samples if s.phantom in part] for part in parts)


def loss(outputs, labels):
    """Sum over the four tasks of the squared L2 residual, averaged over the batch"""
    total = 0.0
    for output, label in zip(outputs, labels):
        total = total + ((output - label) ** 2).sum(dim=1)
    return total.mean()


def backward_and_step(model: RegressorModel, batch: List[Sample], optimizer):
    model.train()
    optimizer.zero_grad()
    outputs = model(slices_to_inputs([s.slices for s in batch], dtype=model.dtype))
    value = loss(outputs, labels_to_tensors(batch, dtype=model.dtype))
    if not torch.isfinite(value):
        raise DivergenceError('training loss is not finite', loss=float(value),
                              samples=[s.metadata.get('seed') for s in batch])
    value.backward()
    optimizer.step()
    return float(value)


@torch.no_grad()
def batch_loss(model: RegressorModel, samples: List[Sample], batch_size=32):
    if not samples:
        return float('nan')
    model.eval()
    total = 0.0
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        outputs = model(slices_to_inputs([s.slices for s in batch], dtype=model.dtype))
        total += float(loss(outputs, labels_to_tensors(batch, dtype=model.dtype))) * len(batch)
    return total / len(samples)


@dataclass
class TrainingResult:
    model: RegressorModel
    history: pd.DataFrame
    best_epoch: int


def build_model(samples: List[Sample], architecture: Optional[dict] = None, seed=0):
    torch.manual_seed(seed)
    arch = Architecture.for_slices(samples[0].slices, samples[0].n_views, **(architecture or {}))
    return RegressorModel(arch)


def train(train_samples: List[Sample], val_samples: List[Sample], config: TrainConfig,
          architecture: Optional[dict] = None, model: Optional[RegressorModel] = None) -> TrainingResult:
    """
    ADAM training with early stopping on the validation loss. The returned
    model carries the weights of the best validation epoch.
    """
    if not train_samples:
        raise ConfigurationError('training needs at least one sample')
    if model is None:
        model = build_model(train_samples, architecture, config.seed)
    generator = torch.Generator().manual_seed(config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    best_loss, best_epoch, best_state = math.inf, 0, copy.deepcopy(model.state_dict())
    records = []
    for epoch in range(1, config.max_epochs + 1):
        order = torch.randperm(len(train_samples), generator=generator).tolist()
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[start:start + config.batch_size]]
            losses.append(backward_and_step(model, batch, optimizer) * len(batch))
        train_loss = sum(losses) / len(train_samples)
        val_loss = batch_loss(model, val_samples, config.batch_size)
        records.append({'epoch': epoch, 'train_loss': train_loss, 'val_loss': val_loss})
        current = val_loss if val_samples else train_loss
        logger.info('epoch %d: train %.5f, val %.5f', epoch, train_loss, val_loss)
        if current < best_loss:
            best_loss, best_epoch = current, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= config.patience:
            logger.info('early stopping after epoch %d (best %d)', epoch, best_epoch)
            break
    model.load_state_dict(best_state)
    model.eval()
    return TrainingResult(model=model, history=pd.DataFrame(records), best_epoch=best_epoch)


@dataclass
class EvaluationReport:
    samples: pd.DataFrame
    profiles: pd.DataFrame
    fn_rate: float
    fp_rate: float
    correlation: float

    def per_phantom(self):
        return self.samples.groupby('phantom')['error'].describe()

    def per_axis(self):
        return self.samples.groupby('axis')['error'].describe()

    def profile_errors(self):
        rows = [pd.DataFrame({'variant': variant,
                              'error': self.profiles[f'pred_{variant}'] - self.profiles[f'true_{variant}']})
                for variant in ('all', 'ip', 'op')]
        return pd.concat(rows, ignore_index=True)

    def confusion(self):
        return self.profiles['outcome'].value_counts().reindex(['TP', 'TN', 'FP', 'FN'], fill_value=0)


def _outcome(truth, flagged):
    if truth:
        return 'TP' if flagged else 'FN'
    return 'FP' if flagged else 'TN'


def evaluate(model: RegressorModel, samples: List[Sample], threshold=SOFT_CLASSIFY_THRESHOLD) -> EvaluationReport:
    """Mean-RPE and profile errors, plus the soft classification against the true profiles"""
    sample_rows, profile_rows = [], []
    for index, sample in enumerate(samples):
        r1, r2, r3, r4 = model.predict(sample.slices)
        sample_rows.append({'sample': index, 'phantom': sample.phantom, 'axis': sample.metadata.get('axis'),
                            'amplitude': sample.metadata.get('amplitude'), 'true_mrpe': sample.mrpe,
                            'pred_mrpe': r1, 'error': r1 - sample.mrpe})
        flagged = soft_classify(r2, r3, r4, threshold)
        truth = sample.profile_all > 0
        for view in range(sample.n_views):
            profile_rows.append({
                'sample': index, 'view': view,
                'true_all': sample.profile_all[view], 'pred_all': r2[view],
                'true_ip': sample.profile_ip[view], 'pred_ip': r3[view],
                'true_op': sample.profile_op[view], 'pred_op': r4[view],
                'affected': bool(truth[view]), 'flagged': bool(flagged[view]),
                'outcome': _outcome(truth[view], flagged[view]),
            })
    frame = pd.DataFrame(sample_rows)
    profiles = pd.DataFrame(profile_rows)
    positives = profiles['affected'].sum()
    negatives = len(profiles) - positives
    fn_rate = float((profiles['outcome'] == 'FN').sum() / positives) if positives else 0.0
    fp_rate = float((profiles['outcome'] == 'FP').sum() / negatives) if negatives else 0.0
    correlation = float('nan')
    if len(frame) > 1 and frame['true_mrpe'].std() > 0 and frame['pred_mrpe'].std() > 0:
        correlation = float(np.corrcoef(frame['true_mrpe'], frame['pred_mrpe'])[0, 1])
    logger.info('evaluated %d samples: FN %.3f, FP %.3f, r %.3f', len(samples), fn_rate, fp_rate, correlation)
    return EvaluationReport(samples=frame, profiles=profiles, fn_rate=fn_rate, fp_rate=fp_rate,
                            correlation=correlation)


def save_model(model: RegressorModel, path):
    try:
        torch.save({'version': MODEL_FORMAT_VERSION,
                    'architecture': model.architecture.to_dict(),
                    'state_dict': model.state_dict()}, path)
    except OSError as exc:
        raise StorageError(f'cannot write model {path}: {exc}') from exc
    return path


def load_model(path) -> RegressorModel:
    if not Path(path).is_file():
        raise ConfigurationError(f'model file not found: {path}')
    try:
        bundle = torch.load(path, map_location='cpu', weights_only=True)
    except (OSError, RuntimeError, pickle.UnpicklingError) as exc:
        raise StorageError(f'cannot read model {path}: {exc}') from exc
    if bundle.get('version') != MODEL_FORMAT_VERSION:
        raise ConfigurationError(f'unsupported model format version {bundle.get("version")}')
    model = RegressorModel(Architecture.from_dict(bundle['architecture']))
    model.load_state_dict(bundle['state_dict'])
    model.eval()
    return model


def save_dataset(directory, samples: List[Sample], config_hash=None):
    """One record per sample: raw slice payloads plus a label and metadata sidecar"""
    directory = Path(directory)
    for index, sample in enumerate(samples):
        name = f'sample_{index:05d}'
        storage.save_slices(directory, name, sample.slices, config_hash)
        storage.write_json(directory / f'{name}_labels.json', {
            'mrpe': sample.mrpe,
            'profile_all': sample.profile_all.tolist(),
            'profile_ip': sample.profile_ip.tolist(),
            'profile_op': sample.profile_op.tolist(),
            'metadata': sample.metadata,
        })
    storage.write_json(directory / 'dataset.json', {'schema_version': storage.SCHEMA_VERSION,
                                                    'config_hash': config_hash, 'count': len(samples)})
    logger.info('saved %d samples to %s', len(samples), directory)
    return directory


def load_dataset(directory) -> List[Sample]:
    directory = Path(directory)
    index = storage.read_json(directory / 'dataset.json')
    samples = []
    for i in range(index['count']):
        name = f'sample_{i:05d}'
        labels = storage.read_json(directory / f'{name}_labels.json')
        samples.append(Sample(slices=storage.load_slices(directory, name), mrpe=float(labels['mrpe']),
                              profile_all=np.asarray(labels['profile_all']),
                              profile_ip=np.asarray(labels['profile_ip']),
                              profile_op=np.asarray(labels['profile_op']),
                              metadata=labels['metadata']))
    return samples
