import json
import numpy as np
import pandas as pd
import pytest
from app.core.fdk import SliceTriplets
from app.core.motion import random_motion
from app.core.phantom import sample
from app.utils import storage
from app.utils.errors import ConfigurationError, DegenerateConfigurationError, PreconditionError, StorageError


class TestRawPayloads:
    """Tests for raw arrays and their sidecars"""

    def test_round_trip(self, tmp_path):
        array = np.random.default_rng(0).normal(size=(4, 3, 5))
        raw, sidecar = storage.write_raw(tmp_path / 'stack.raw', array, 'abc123', sigma=0.5)
        assert sidecar == tmp_path / 'stack.json'
        assert raw.stat().st_size == array.size * 4
        data, meta = storage.read_raw(raw)
        assert data.shape == (4, 3, 5)
        assert np.allclose(data, array.astype(np.float32))
        assert meta['config_hash'] == 'abc123'
        assert meta['parameters'] == {'sigma': 0.5}
        assert meta['schema_version'] == storage.SCHEMA_VERSION

    def test_rewrite_is_byte_identical(self, tmp_path):
        array = np.arange(12.0).reshape(3, 4)
        storage.write_raw(tmp_path / 'a.raw', array, 'h')
        first = (tmp_path / 'a.json').read_bytes(), (tmp_path / 'a.raw').read_bytes()
        storage.write_raw(tmp_path / 'a.raw', array, 'h')
        assert ((tmp_path / 'a.json').read_bytes(), (tmp_path / 'a.raw').read_bytes()) == first

    def test_schema_mismatch(self, tmp_path):
        raw, sidecar = storage.write_raw(tmp_path / 'a.raw', np.zeros(4))
        meta = json.loads(sidecar.read_text())
        meta['schema_version'] = 99
        sidecar.write_text(json.dumps(meta))
        with pytest.raises(StorageError):
            storage.read_raw(raw)

    def test_truncated_payload(self, tmp_path):
        raw, _ = storage.write_raw(tmp_path / 'a.raw', np.zeros(8))
        raw.write_bytes(raw.read_bytes()[:12])
        with pytest.raises(StorageError):
            storage.read_raw(raw)

    def test_missing_sidecar(self, tmp_path):
        with pytest.raises(StorageError):
            storage.read_raw(tmp_path / 'nothing.raw')

    def test_invalid_json(self, tmp_path):
        path = tmp_path / 'broken.json'
        path.write_text('{not json')
        with pytest.raises(StorageError):
            storage.read_json(path)


class TestRecords:
    """Tests for JSON records and CSV tables"""

    def test_csv_round_trip(self, tmp_path):
        frame = pd.DataFrame({'view': [0, 1, 2], 'rpe': [0.0, 0.25, 1.5]})
        path = storage.write_csv(tmp_path / 'out' / 'profile.csv', frame)
        assert path.read_text().splitlines()[0] == 'view,rpe'
        pd.testing.assert_frame_equal(storage.read_csv(path), frame)

    def test_missing_csv(self, tmp_path):
        with pytest.raises(StorageError):
            storage.read_csv(tmp_path / 'missing.csv')

    def test_trajectory(self, tmp_path, trajectory):
        path = storage.save_trajectory(tmp_path / 'trajectory.json', trajectory, 'h')
        restored = storage.load_trajectory(path)
        assert restored.n_views == trajectory.n_views
        assert np.allclose(restored.matrices, trajectory.matrices, atol=1e-12)

    def test_splines(self, tmp_path):
        splines = random_motion('rx', 2.0, 20, 200, seed=1)
        path = storage.save_splines(tmp_path / 'motion.json', splines, 'h', mrpe=0.7)
        assert json.loads(path.read_text())['parameters'] == {'mrpe': 0.7}
        assert np.array_equal(storage.load_splines(path).values, splines.values)

    def test_slices(self, tmp_path):
        rng = np.random.default_rng(1)
        slices = SliceTriplets(ax=rng.normal(size=(3, 4, 5)), co=rng.normal(size=(3, 2, 4)),
                               sa=rng.normal(size=(3, 2, 5)))
        paths = storage.save_slices(tmp_path, 'recon', slices, 'h')
        assert [p.name for p, _ in paths] == ['recon_ax.raw', 'recon_co.raw', 'recon_sa.raw']
        restored = storage.load_slices(tmp_path, 'recon')
        assert np.allclose(restored.flat(), slices.flat(), rtol=1e-6, atol=1e-6)

    def test_phantom(self, tmp_path, head):
        path = storage.save_phantom(tmp_path / 'head.json', head, 'h', voxel_mass=1.0)
        restored = storage.load_phantom(path)
        points = np.random.default_rng(2).uniform(-40, 40, size=(200, 3))
        assert np.array_equal(sample(restored, points), sample(head, points))
        assert restored.voi == head.voi


class TestErrors:
    """Tests for the error hierarchy"""

    def test_exit_codes(self):
        assert ConfigurationError('x').exit_code == 2
        assert StorageError('x').exit_code == 3
        assert DegenerateConfigurationError('x').exit_code == 5
        assert issubclass(DegenerateConfigurationError, PreconditionError)

    def test_to_dict(self):
        error = StorageError('cannot read file', path='a.raw')
        assert error.to_dict() == {'error': 'I/O error', 'message': 'cannot read file',
                                   'details': {'path': 'a.raw'}}
        assert 'details' not in ConfigurationError('bad').to_dict()
