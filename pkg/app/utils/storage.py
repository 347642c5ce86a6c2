"""
On-disk formats.

Arrays are written as raw little-endian float32 next to a JSON sidecar of the
same stem carrying the schema version, the config hash, the array shape and
the parameters that produced it. Tables are comma-separated CSV.
"""
import json
import logging
from pathlib import Path

import numpy as np
import pandas as pd

from app.core.fdk import ORIENTATIONS, SliceTriplets
from app.core.geometry import Trajectory
from app.core.motion import MotionSplineSet
from app.core.phantom import Phantom, phantom_from_dict
from app.utils.errors import StorageError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RAW_DTYPE = '<f4'


def sidecar_path(path):
    return Path(path).with_suffix('.json')


def write_json(path, data):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(data, indent=2, sort_keys=True))
    except OSError as exc:
        raise StorageError(f'cannot write {path}: {exc}') from exc
    return path


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise StorageError(f'cannot read {path}: {exc}') from exc
    except json.JSONDecodeError as exc:
        raise StorageError(f'{path} is not valid JSON: {exc}') from exc


def _header(config_hash, **extra):
    # No timestamp: seeded single-thread re-runs must be byte-identical
    return {'schema_version': SCHEMA_VERSION, 'config_hash': config_hash, **extra}


def _check_schema(data, path):
    if data.get('schema_version') != SCHEMA_VERSION:
        raise StorageError(f'{path} has schema version {data.get("schema_version")}, expected {SCHEMA_VERSION}')


def write_raw(path, array, config_hash=None, **parameters):
    """Write the payload and its sidecar; returns both paths"""
    path = Path(path)
    array = np.asarray(array)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        array.astype(RAW_DTYPE).tofile(path)
    except OSError as exc:
        raise StorageError(f'cannot write {path}: {exc}') from exc
    sidecar = write_json(sidecar_path(path), _header(config_hash, shape=list(array.shape), dtype=RAW_DTYPE,
                                                     payload=path.name, parameters=parameters))
    logger.debug('wrote %s %s', path, array.shape)
    return path, sidecar


def read_raw(path):
    path = Path(path)
    meta = read_json(sidecar_path(path))
    _check_schema(meta, path)
    try:
        data = np.fromfile(path, dtype=meta.get('dtype', RAW_DTYPE))
    except OSError as exc:
        raise StorageError(f'cannot read {path}: {exc}') from exc
    shape = tuple(meta['shape'])
    if data.size != int(np.prod(shape)):
        raise StorageError(f'{path} holds {data.size} values, sidecar declares shape {shape}')
    return data.reshape(shape).astype(np.float64), meta


def write_csv(path, frame: pd.DataFrame):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, sep=',', decimal='.')
    except OSError as exc:
        raise StorageError(f'cannot write {path}: {exc}') from exc
    return path


def read_csv(path):
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError) as exc:
        raise StorageError(f'cannot read {path}: {exc}') from exc


def save_trajectory(path, trajectory: Trajectory, config_hash=None):
    return write_json(path, {**_header(config_hash), 'trajectory': trajectory.to_dict()})


def load_trajectory(path) -> Trajectory:
    data = read_json(path)
    _check_schema(data, path)
    return Trajectory.from_dict(data['trajectory'])


def save_splines(path, splines: MotionSplineSet, config_hash=None, **parameters):
    return write_json(path, {**_header(config_hash, parameters=parameters), 'splines': splines.to_dict()})


def load_splines(path) -> MotionSplineSet:
    data = read_json(path)
    _check_schema(data, path)
    return MotionSplineSet.from_dict(data['splines'])


def save_slices(directory, name, slices: SliceTriplets, config_hash=None, **parameters):
    """One payload per orientation: <name>_<orientation>.raw"""
    paths = []
    for orientation in ORIENTATIONS:
        raw, sidecar = write_raw(Path(directory) / f'{name}_{orientation}.raw', slices.orientation(orientation),
                                 config_hash, orientation=orientation, **parameters)
        paths.append((raw, sidecar))
    return paths


def load_slices(directory, name) -> SliceTriplets:
    stacks = {o: read_raw(Path(directory) / f'{name}_{o}.raw')[0] for o in ORIENTATIONS}
    return SliceTriplets(**stacks)


def save_phantom(path, ph: Phantom, config_hash=None, **parameters):
    return write_json(path, {**_header(config_hash, parameters=parameters), 'phantom': ph.to_dict()})


def load_phantom(path) -> Phantom:
    data = read_json(path)
    _check_schema(data, path)
    return phantom_from_dict(data['phantom'])
