import json
import numpy as np
import pytest
from app.core.phantom import sample
from app.experiment import RESOLVED_NAME, TRAINING_SEED_OFFSET, ExperimentConfig, deep_merge, set_override
from app.utils.errors import ConfigurationError, StorageError


class TestMerging:
    """Tests for layering defaults, files and flags"""

    def test_deep_merge_keeps_siblings(self):
        merged = deep_merge({'a': {'x': 1, 'y': 2}, 'b': 3}, {'a': {'y': 5}})
        assert merged == {'a': {'x': 1, 'y': 5}, 'b': 3}

    def test_set_override(self):
        overrides = set_override({}, 'motion.amplitude', 2.0)
        set_override(overrides, 'motion.axis', None)
        assert overrides == {'motion': {'amplitude': 2.0}}

    def test_flags_win_over_file(self, tmp_path):
        path = tmp_path / 'experiment.json'
        path.write_text(json.dumps({'motion': {'amplitude': 1.0, 'axis': 'rx'}}))
        cfg = ExperimentConfig.load(path, overrides={'motion': {'amplitude': 3.0}}, output_root=tmp_path)
        assert cfg['motion']['amplitude'] == 3.0
        assert cfg['motion']['axis'] == 'rx'
        assert cfg['geometry']['sid'] == 785


class TestExperimentConfig:
    """Tests for the validated experiment document"""

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigurationError):
            ExperimentConfig({'optimiser': {}}, output_root=tmp_path)

    def test_invalid_value(self, tmp_path):
        with pytest.raises(ConfigurationError):
            ExperimentConfig({'geometry': {'n_views': 1}}, output_root=tmp_path)

    def test_malformed_value(self, tmp_path):
        with pytest.raises(ConfigurationError):
            ExperimentConfig({'benchmark': {'scenarios': 5}}, output_root=tmp_path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(StorageError):
            ExperimentConfig.load(tmp_path / 'missing.json')

    def test_hash_is_stable(self, tmp_path):
        a = ExperimentConfig({'motion': {'amplitude': 2.0}}, output_root=tmp_path)
        b = ExperimentConfig({'motion': {'amplitude': 2.0}}, output_root=tmp_path)
        c = ExperimentConfig({'motion': {'amplitude': 2.5}}, output_root=tmp_path)
        assert a.config_hash == b.config_hash
        assert a.config_hash != c.config_hash
        assert len(a.config_hash) == 64

    def test_output_dir(self, tmp_path):
        cfg = ExperimentConfig({}, output_root=tmp_path)
        assert cfg.output_dir == tmp_path / cfg.config_hash[:12]
        explicit = ExperimentConfig({'output_dir': str(tmp_path / 'mine')}, output_root=tmp_path)
        assert explicit.output_dir == tmp_path / 'mine'

    def test_threads(self, tmp_path):
        assert ExperimentConfig({}, output_root=tmp_path, default_threads=3).threads == 3
        assert ExperimentConfig({'threads': 2}, output_root=tmp_path, default_threads=3).threads == 2

    def test_write_resolved(self, tmp_path):
        cfg = ExperimentConfig({'seeds': {'motion': 4}}, output_root=tmp_path)
        path = cfg.write_resolved()
        assert path == cfg.output_dir / RESOLVED_NAME
        assert json.loads(path.read_text()) == cfg.data


class TestBuilders:
    """Tests for objects built from the configuration"""

    def test_geometry(self, tmp_path, small_experiment):
        cfg = ExperimentConfig(small_experiment, output_root=tmp_path)
        trajectory = cfg.trajectory()
        assert trajectory.n_views == 60
        assert trajectory.intrinsics.nu == 64
        assert cfg.grid().dims == (54, 64, 18)
        assert len(cfg.slice_set().slices) == 9

    def test_markers_follow_scale(self, tmp_path, small_experiment):
        markers = ExperimentConfig(small_experiment, output_root=tmp_path).markers()
        assert markers.radii == pytest.approx((7.5, 15.0, 22.5))
        assert len(markers) == 90

    def test_markers_stay_inside_phantom(self, tmp_path):
        cfg = ExperimentConfig({}, output_root=tmp_path)
        ph = cfg.phantom()
        markers = cfg.markers()
        assert max(markers.radii) <= ph.inscribed_radius
        assert np.all(sample(ph, markers.cartesian) > 0)
        radii = np.linalg.norm(markers.cartesian, axis=1)
        assert np.all(np.min(np.abs(radii[:, None] - np.array(markers.radii)), axis=1) < 1e-9)

    def test_phantoms(self, tmp_path):
        cfg = ExperimentConfig({'benchmark': {'phantoms': 3}, 'training': {'phantoms': 2}}, output_root=tmp_path)
        bench = cfg.benchmark_phantoms()
        assert [ph.name for ph in bench] == ['head', 'head-v1', 'head-v2']
        training = cfg.training_phantoms()
        assert [ph.name for ph in training] == [f'head-v{TRAINING_SEED_OFFSET}', f'head-v{TRAINING_SEED_OFFSET + 1}']

    def test_schedule_and_window(self, tmp_path, head):
        cfg = ExperimentConfig({}, output_root=tmp_path)
        assert cfg.schedule().to_list() == [[1.0, 2]] * 3 + [[0.5, 100]] * 2
        window = cfg.bone_window(head)
        assert window.upper == pytest.approx(head.max_attenuation)
        assert window.bins == 256
