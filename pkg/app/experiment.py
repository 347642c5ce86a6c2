"""
Experiment configuration.

Shipped defaults are merged with an optional config file and then with
command-line overrides (flags win). The merged document is validated,
hashed and written next to every command's outputs.
"""
import copy
import hashlib
import json
import logging
import os
from importlib import resources
from pathlib import Path

from app.core.autofocus import StageSchedule
from app.core.fdk import desk_grid, make_slice_set
from app.core.geometry import Intrinsics, build_short_scan
from app.core.iqm import BoneWindow
from app.core.phantom import load_phantom_definition, phantom_from_dict, phantom_variant
from app.core.rpe import generate_markers
from app.utils import storage
from app.utils.errors import ConfigurationError
from app.utils.validators import validate_experiment, validate_unknown_keys

logger = logging.getLogger(__name__)

RESOLVED_NAME = 'config.resolved.json'
# Training phantoms draw their variant seeds from here on, benchmark phantoms below it
TRAINING_SEED_OFFSET = 1000
# Outermost marker shell as a fraction of the phantom's inscribed radius
MARKER_SUPPORT_MARGIN = 0.95


def default_experiment():
    return json.loads(resources.files('app.data').joinpath('default_experiment.json').read_text())


def deep_merge(base, override):
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def set_override(overrides, dotted_key, value):
    """Set a nested override from a dotted key; None means the flag was not given"""
    if value is None:
        return overrides
    block = overrides
    *parents, leaf = dotted_key.split('.')
    for name in parents:
        block = block.setdefault(name, {})
    block[leaf] = value
    return overrides


class ExperimentConfig:
    """Validated experiment document with builders for the objects it describes"""

    def __init__(self, data=None, output_root=None, default_threads=1):
        data = data or {}
        if not isinstance(data, dict):
            raise ConfigurationError('an experiment configuration must be a JSON object')
        template = default_experiment()

        is_valid, message = validate_unknown_keys(data, template)
        if not is_valid:
            raise ConfigurationError(message)

        merged = deep_merge(template, data)
        try:
            is_valid, message = validate_experiment(merged)
        except (TypeError, KeyError) as exc:
            raise ConfigurationError(f'malformed configuration: {exc}') from exc
        if not is_valid:
            raise ConfigurationError(message)

        self.data = merged
        self.output_root = Path(output_root) if output_root else Path(os.getcwd()) / 'runs'
        self.default_threads = default_threads

    @classmethod
    def load(cls, path=None, overrides=None, output_root=None, default_threads=1):
        data = storage.read_json(path) if path else {}
        if not isinstance(data, dict):
            raise ConfigurationError(f'{path} does not hold a JSON object')
        if overrides:
            data = deep_merge(data, overrides)
        return cls(data, output_root=output_root, default_threads=default_threads)

    def __getitem__(self, block):
        return self.data[block]

    @property
    def config_hash(self):
        canonical = json.dumps(self.data, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    @property
    def output_dir(self):
        if self.data['output_dir']:
            return Path(self.data['output_dir'])
        return self.output_root / self.config_hash[:12]

    @property
    def threads(self):
        return self.data['threads'] or self.default_threads

    def seed(self, name):
        return self.data['seeds'][name]

    def write_resolved(self, directory=None):
        return storage.write_json(Path(directory or self.output_dir) / RESOLVED_NAME, self.data)

    # Geometry

    def intrinsics(self):
        g = self.data['geometry']
        return Intrinsics(sid=g['sid'], sdd=g['sdd'], nu=g['nu'], nv=g['nv'], du=g['du'], dv=g['dv'])

    def trajectory(self):
        return build_short_scan(self.intrinsics(), self.data['geometry']['n_views'])

    def grid(self):
        g = self.data['geometry']
        return desk_grid(scale=g['scale'], spacing=g['spacing'])

    def slice_set(self):
        return make_slice_set(self.grid())

    def markers(self):
        g = self.data['geometry']
        radii = [g['scale'] * r for r in g['marker_radii']]
        limit = MARKER_SUPPORT_MARGIN * self.phantom().inscribed_radius
        outermost = max(radii)
        if outermost > limit:
            radii = [r * limit / outermost for r in radii]
        return generate_markers(radii, per_sphere=g['markers_per_sphere'], seed=self.seed('markers'))

    # Phantoms

    def phantom(self):
        block = self.data['phantom']
        return phantom_from_dict(load_phantom_definition(block['path']), scale=block['scale'])

    def variants(self, count, offset=0):
        """The base phantom followed by count - 1 seeded variants"""
        base = self.phantom()
        jitter = self.data['phantom']['jitter']
        first = self.seed('phantom') + offset
        if offset:
            return [phantom_variant(base, first + i, jitter) for i in range(count)]
        return [base] + [phantom_variant(base, first + i, jitter) for i in range(1, count)]

    def benchmark_phantoms(self):
        return self.variants(self.data['benchmark']['phantoms'])

    def training_phantoms(self):
        return self.variants(self.data['training']['phantoms'], offset=TRAINING_SEED_OFFSET)

    # Metric and optimizer

    def bone_window(self, ph):
        m = self.data['metric']
        return BoneWindow.from_phantom(ph, m['lower'], m['upper'], m['bins'])

    def schedule(self):
        o = self.data['optimizer']
        return StageSchedule.from_list(o['stages'], o['tolerance'])

    def __repr__(self):
        return f'<ExperimentConfig {self.config_hash[:12]}>'
