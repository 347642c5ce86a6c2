import math
from numbers import Number

AXES = ('tx', 'ty', 'tz', 'rx', 'ry', 'rz')
METRICS = ('None', 'Ent', 'Ent+', 'Tv', 'Tv+', 'Cnn', 'Cnn+', 'Gt')
SCENARIOS = ('A', 'B')
ACTIVATIONS = ('relu', 'tanh', 'identity')


def _is_number(value):
    return isinstance(value, Number) and not isinstance(value, bool) and math.isfinite(value)


def validate_required_fields(data, required_fields):
    """Validate that all required fields are present"""
    missing_fields = [field for field in required_fields if data.get(field) is None]

    if missing_fields:
        return False, f"Missing required fields: {', '.join(missing_fields)}"

    return True, "All required fields present"


def validate_unknown_keys(data, template, path=''):
    """
    Reject keys the template does not declare
    - Nested blocks are checked recursively
    - Blocks whose template value is an empty dict accept any key
    """
    for key, value in data.items():
        name = f'{path}.{key}' if path else key
        if key not in template:
            return False, f"Unknown configuration key: {name}"
        expected = template[key]
        if isinstance(expected, dict) and expected:
            if not isinstance(value, dict):
                return False, f"Configuration key {name} must be a block"
            is_valid, message = validate_unknown_keys(value, expected, name)
            if not is_valid:
                return is_valid, message

    return True, "All keys are known"


def validate_positive_number(value, name):
    if not _is_number(value) or value <= 0:
        return False, f"{name} must be a positive number"

    return True, f"{name} is valid"


def validate_non_negative_number(value, name):
    if not _is_number(value) or value < 0:
        return False, f"{name} must be a non-negative number"

    return True, f"{name} is valid"


def validate_count(value, name, minimum=1):
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        return False, f"{name} must be an integer of at least {minimum}"

    return True, f"{name} is valid"


def validate_axis(axis):
    if axis not in AXES:
        return False, f"Axis must be one of {', '.join(AXES)}"

    return True, "Axis is valid"


def validate_axes(axes):
    """
    Validate an axis selection
    - Must be a non-empty list
    - No duplicates
    """
    if not isinstance(axes, (list, tuple)) or len(axes) == 0:
        return False, "At least one axis must be selected"

    if len(axes) != len(set(axes)):
        return False, "Duplicate axes are not allowed"

    for axis in axes:
        is_valid, message = validate_axis(axis)
        if not is_valid:
            return is_valid, message

    return True, "Axes are valid"


def validate_metric_names(names):
    if not isinstance(names, (list, tuple)) or len(names) == 0:
        return False, "At least one metric must be selected"

    unknown = [name for name in names if name not in METRICS]
    if unknown:
        return False, f"Unknown metrics: {', '.join(unknown)}"

    return True, "Metrics are valid"


def validate_range(pair, name):
    """Two non-negative numbers, lower first"""
    if not isinstance(pair, (list, tuple)) or len(pair) != 2 or not all(_is_number(v) for v in pair):
        return False, f"{name} must be a pair of numbers"

    if pair[0] < 0 or pair[1] < pair[0]:
        return False, f"{name} must satisfy 0 <= lower <= upper"

    return True, f"{name} is valid"


def validate_stages(stages):
    """
    Validate an optimizer schedule
    - At least one stage
    - Each stage is [positive step, non-negative iteration count]
    """
    if not isinstance(stages, (list, tuple)) or len(stages) == 0:
        return False, "The schedule needs at least one stage"

    for index, stage in enumerate(stages):
        if not isinstance(stage, (list, tuple)) or len(stage) != 2:
            return False, f"Stage {index} must be a [step, iterations] pair"
        step, iterations = stage
        if not _is_number(step) or step <= 0:
            return False, f"Stage {index} step must be positive"
        if not isinstance(iterations, int) or iterations < 0:
            return False, f"Stage {index} iterations must be a non-negative integer"

    return True, "Schedule is valid"


def validate_split(split):
    if not isinstance(split, (list, tuple)) or len(split) != 3 or not all(_is_number(v) and v >= 0 for v in split):
        return False, "Split must be three non-negative ratios"

    if not math.isclose(sum(split), 1.0):
        return False, "Split ratios must sum to 1"

    return True, "Split is valid"


def validate_experiment(data):
    """Validate a merged experiment configuration; returns the first problem found"""
    geometry = data['geometry']
    checks = [
        validate_positive_number(geometry['sid'], 'geometry.sid'),
        validate_positive_number(geometry['sdd'], 'geometry.sdd'),
        validate_count(geometry['nu'], 'geometry.nu', 2),
        validate_count(geometry['nv'], 'geometry.nv', 2),
        validate_positive_number(geometry['du'], 'geometry.du'),
        validate_positive_number(geometry['dv'], 'geometry.dv'),
        validate_count(geometry['n_views'], 'geometry.n_views', 2),
        validate_positive_number(geometry['scale'], 'geometry.scale'),
        validate_positive_number(geometry['spacing'], 'geometry.spacing'),
        validate_count(geometry['markers_per_sphere'], 'geometry.markers_per_sphere'),
        validate_positive_number(data['phantom']['scale'], 'phantom.scale'),
        validate_non_negative_number(data['phantom']['jitter'], 'phantom.jitter'),
        validate_non_negative_number(data['phantom']['noise_sigma'], 'phantom.noise_sigma'),
        validate_count(data['phantom']['variants'], 'phantom.variants', 0),
        validate_axis(data['motion']['axis']),
        validate_non_negative_number(data['motion']['amplitude'], 'motion.amplitude'),
        validate_count(data['motion']['n_nodes'], 'motion.n_nodes', 2),
        validate_metric_names([data['metric']['name']]),
        validate_count(data['metric']['bins'], 'metric.bins', 2),
        validate_range([data['metric']['lower'], data['metric']['upper']], 'metric window'),
        validate_non_negative_number(data['metric']['threshold'], 'metric.threshold'),
        validate_stages(data['optimizer']['stages']),
        validate_positive_number(data['optimizer']['tolerance'], 'optimizer.tolerance'),
        validate_count(data['optimizer']['n_nodes'], 'optimizer.n_nodes', 2),
        validate_axes(data['optimizer']['axes']),
        validate_count(data['training']['samples'], 'training.samples'),
        validate_count(data['training']['phantoms'], 'training.phantoms'),
        validate_range(data['training']['amplitude_range'], 'training.amplitude_range'),
        validate_count(data['training']['n_nodes'], 'training.n_nodes', 2),
        validate_non_negative_number(data['training']['learning_rate'], 'training.learning_rate'),
        validate_count(data['training']['batch_size'], 'training.batch_size'),
        validate_count(data['training']['max_epochs'], 'training.max_epochs'),
        validate_count(data['training']['patience'], 'training.patience'),
        validate_split(data['training']['split']),
        validate_axes(data['benchmark']['axes']),
        validate_metric_names(data['benchmark']['metrics']),
        validate_count(data['benchmark']['phantoms'], 'benchmark.phantoms'),
        validate_count(data['benchmark']['workers'], 'benchmark.workers'),
    ]
    if geometry['sdd'] <= geometry['sid']:
        checks.append((False, "geometry.sdd must exceed geometry.sid"))
    if data['training']['activation'] not in ACTIVATIONS:
        checks.append((False, f"training.activation must be one of {', '.join(ACTIVATIONS)}"))
    radii = geometry['marker_radii']
    if not isinstance(radii, (list, tuple)) or not radii or not all(_is_number(r) and r > 0 for r in radii):
        checks.append((False, "geometry.marker_radii must be a list of positive radii"))
    if data['motion']['scenario'] is not None and data['motion']['scenario'] not in SCENARIOS:
        checks.append((False, f"motion.scenario must be one of {', '.join(SCENARIOS)}"))
    second = data['optimizer']['second_metric']
    if second is not None and second not in ('Ent', 'Tv', 'Gt', 'Cnn'):
        checks.append((False, "optimizer.second_metric must be Ent, Tv, Gt or Cnn"))
    unknown = [s for s in data['benchmark']['scenarios'] if s not in SCENARIOS]
    if unknown or not data['benchmark']['scenarios']:
        checks.append((False, f"benchmark.scenarios must be drawn from {', '.join(SCENARIOS)}"))
    if data['threads'] is not None:
        checks.append(validate_count(data['threads'], 'threads'))

    for is_valid, message in checks:
        if not is_valid:
            return is_valid, message

    return True, "Configuration is valid"
