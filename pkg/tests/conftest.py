import os
import pytest
from app import db
from app.core.fdk import desk_grid, make_slice_set
from app.core.geometry import Intrinsics, build_short_scan
from app.core.phantom import default_head_phantom, render_projections
from app.core.rpe import generate_markers


@pytest.fixture(scope='function')
def app(tmp_path):
    from app import create_app
    app = create_app('testing')

    test_config = {
        'TESTING': True,
        'OUTPUT_ROOT': str(tmp_path / 'runs'),
        'THREADS': 1,
    }

    app.config.update(test_config)

    with app.app_context():
        db.create_all()
        yield app
        db.session.remove()
        db.drop_all()


@pytest.fixture(scope='function')
def client(app):
    return app.test_client()


@pytest.fixture(scope='function')
def runner(app):
    return app.test_cli_runner()


def pytest_collection_modifyitems(config, items):
    if os.getenv('AUTOFOCUS_ACCEPTANCE') == '1':
        return
    skip = pytest.mark.skip(reason='set AUTOFOCUS_ACCEPTANCE=1 to run acceptance tests')
    for item in items:
        if 'acceptance' in item.keywords:
            item.add_marker(skip)


# Small numerical setup shared by the core tests: a coarse detector and a
# quarter-size slice grid keep a full reconstruction well under a second.

@pytest.fixture(scope='session')
def intrinsics():
    return Intrinsics(sid=785.0, sdd=1200.0, nu=64, nv=48, du=3.2, dv=3.2)


@pytest.fixture(scope='session')
def trajectory(intrinsics):
    return build_short_scan(intrinsics, 90)


@pytest.fixture(scope='session')
def head():
    return default_head_phantom()


@pytest.fixture(scope='session')
def grid():
    return desk_grid(scale=0.25, spacing=1.68)


@pytest.fixture(scope='session')
def slice_set(grid):
    return make_slice_set(grid)


@pytest.fixture(scope='session')
def markers():
    return generate_markers()


@pytest.fixture(scope='session')
def projections(head, trajectory):
    return render_projections(head, trajectory)


@pytest.fixture
def small_experiment():
    """Experiment overrides for end-to-end CLI runs"""
    return {
        'geometry': {'nu': 64, 'nv': 48, 'du': 3.2, 'dv': 3.2, 'n_views': 60, 'scale': 0.25, 'spacing': 1.68},
        'optimizer': {'stages': [[1.0, 2], [0.5, 4]], 'n_nodes': 10, 'axes': ['tz']},
    }
