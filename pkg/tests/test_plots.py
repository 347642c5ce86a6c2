import numpy as np
import pandas as pd
import pytest
from app.core import plots
from app.utils.errors import StorageError


@pytest.fixture
def rows():
    records = []
    for scenario in ('A', 'B'):
        for axis in ('tz', 'rx'):
            for metric, value in (('None', 2.0), ('Ent', 0.8), ('Gt', 0.1)):
                for phantom in ('head', 'head-v1'):
                    records.append({'scenario': scenario, 'axis': axis, 'metric': metric,
                                    'phantom': phantom, 'misalignment': value})
    return pd.DataFrame(records)


class TestFigures:
    """Tests for the SVG figures"""

    def test_one_boxplot_per_scenario(self, rows, tmp_path):
        paths = plots.misalignment_boxplots(rows, tmp_path)
        assert [p.name for p in paths] == ['misalignment_A.svg', 'misalignment_B.svg']
        assert paths[0].read_text().lstrip().startswith('<?xml')

    def test_curve_overlay(self, tmp_path):
        curve = np.sin(np.linspace(0, np.pi, 40))
        path = plots.curve_overlay(curve, -curve, tmp_path / 'curves' / 'A_tz_Ent.svg', title='A tz Ent')
        assert path.exists()
        assert 'A tz Ent' in path.read_text()

    def test_figures_are_reproducible(self, tmp_path):
        curve = np.linspace(0, 1, 10)
        first = plots.curve_overlay(curve, curve, tmp_path / 'a.svg').read_bytes()
        second = plots.curve_overlay(curve, curve, tmp_path / 'b.svg').read_bytes()
        assert first == second

    def test_training_history_without_validation(self, tmp_path):
        history = pd.DataFrame({'epoch': [1, 2, 3], 'train_loss': [3.0, 2.0, 1.5],
                                'val_loss': [np.nan, np.nan, np.nan]})
        assert plots.training_history(history, tmp_path / 'history.svg').exists()

    def test_soft_classification(self, tmp_path):
        profiles = pd.DataFrame({
            'sample': [0] * 4 + [1] * 4,
            'view': list(range(4)) * 2,
            'true_all': [0.0, 0.5, 1.0, 0.0] * 2,
            'pred_all': [0.1, 0.4, 0.2, 0.3] * 2,
            'outcome': ['TN', 'TP', 'FN', 'FP'] * 2,
        })
        assert plots.soft_classification(profiles, 0, tmp_path / 'soft.svg').exists()

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / 'file'
        blocker.write_text('x')
        with pytest.raises(StorageError):
            plots.curve_overlay(np.zeros(3), np.zeros(3), blocker / 'sub' / 'plot.svg')
