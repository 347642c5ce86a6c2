import pytest
from app.experiment import default_experiment, deep_merge
from app.utils.validators import (
    validate_axes,
    validate_count,
    validate_experiment,
    validate_metric_names,
    validate_positive_number,
    validate_range,
    validate_required_fields,
    validate_split,
    validate_stages,
    validate_unknown_keys
)


class TestValidateRequiredFields:
    def test_all_fields_present(self):
        data = {'scenario': 'A', 'axis': 'tz', 'metric': 'Ent'}
        is_valid, message = validate_required_fields(data, ['scenario', 'axis', 'metric'])
        assert is_valid is True

    def test_missing_fields(self):
        data = {'scenario': 'A'}
        is_valid, message = validate_required_fields(data, ['scenario', 'axis', 'metric'])
        assert is_valid is False
        assert 'axis' in message
        assert 'metric' in message

    def test_none_counts_as_missing(self):
        is_valid, message = validate_required_fields({'axis': None}, ['axis'])
        assert is_valid is False


class TestValidateUnknownKeys:
    def test_known_keys(self):
        is_valid, message = validate_unknown_keys({'geometry': {'sid': 700}}, default_experiment())
        assert is_valid is True

    def test_unknown_top_level_key(self):
        is_valid, message = validate_unknown_keys({'geometrie': {}}, default_experiment())
        assert is_valid is False
        assert 'geometrie' in message

    def test_unknown_nested_key(self):
        is_valid, message = validate_unknown_keys({'optimizer': {'steps': []}}, default_experiment())
        assert is_valid is False
        assert 'optimizer.steps' in message

    def test_block_must_be_object(self):
        is_valid, message = validate_unknown_keys({'geometry': 5}, default_experiment())
        assert is_valid is False
        assert 'block' in message


class TestValidateNumbers:
    def test_positive_number(self):
        assert validate_positive_number(1.5, 'sid')[0] is True
        assert validate_positive_number(0, 'sid')[0] is False
        assert validate_positive_number(float('inf'), 'sid')[0] is False
        assert validate_positive_number(True, 'sid')[0] is False
        assert validate_positive_number('785', 'sid')[0] is False

    def test_count(self):
        assert validate_count(3, 'views', 2)[0] is True
        assert validate_count(1, 'views', 2)[0] is False
        assert validate_count(2.0, 'views', 2)[0] is False

    def test_range(self):
        assert validate_range([0, 5], 'amplitude')[0] is True
        assert validate_range([3, 1], 'amplitude')[0] is False
        assert validate_range([-1, 1], 'amplitude')[0] is False
        assert validate_range([1], 'amplitude')[0] is False


class TestValidateSelections:
    def test_axes(self):
        assert validate_axes(['tz', 'rx'])[0] is True
        assert validate_axes([])[0] is False
        is_valid, message = validate_axes(['tz', 'tz'])
        assert is_valid is False
        assert 'duplicate' in message.lower()
        assert validate_axes(['yaw'])[0] is False

    def test_metric_names(self):
        assert validate_metric_names(['None', 'Ent+', 'Gt'])[0] is True
        is_valid, message = validate_metric_names(['Ent', 'Sharpness'])
        assert is_valid is False
        assert 'Sharpness' in message


class TestValidateSchedules:
    def test_valid_schedule(self):
        assert validate_stages([[1.0, 2], [0.5, 100]])[0] is True

    def test_empty_schedule(self):
        assert validate_stages([])[0] is False

    def test_invalid_stage(self):
        is_valid, message = validate_stages([[1.0, 2], [0.0, 5]])
        assert is_valid is False
        assert 'Stage 1' in message
        assert validate_stages([[1.0, 2.5]])[0] is False
        assert validate_stages([[1.0]])[0] is False

    def test_split(self):
        assert validate_split([0.7, 0.2, 0.1])[0] is True
        assert validate_split([0.7, 0.2, 0.2])[0] is False
        assert validate_split([0.5, 0.5])[0] is False


class TestValidateExperiment:
    def test_defaults_are_valid(self):
        is_valid, message = validate_experiment(default_experiment())
        assert is_valid is True

    @pytest.mark.parametrize('override, fragment', [
        ({'geometry': {'sdd': 700}}, 'sdd'),
        ({'geometry': {'marker_radii': []}}, 'marker_radii'),
        ({'motion': {'axis': 'yaw'}}, 'Axis'),
        ({'motion': {'scenario': 'C'}}, 'scenario'),
        ({'metric': {'lower': 1.5, 'upper': 1.0}}, 'window'),
        ({'optimizer': {'second_metric': 'Ent+'}}, 'second_metric'),
        ({'training': {'activation': 'swish'}}, 'activation'),
        ({'benchmark': {'scenarios': []}}, 'scenarios'),
        ({'threads': 0}, 'threads'),
    ])
    def test_invalid_values(self, override, fragment):
        is_valid, message = validate_experiment(deep_merge(default_experiment(), override))
        assert is_valid is False
        assert fragment in message
