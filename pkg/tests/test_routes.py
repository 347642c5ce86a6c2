from datetime import datetime, timedelta
import pytest
from app import db
from app.models import Artifact, ArtifactKind, BenchmarkRow, EpochRecord, Run, RunStatus


def make_run(command, status=RunStatus.COMPLETED, started=None, **kwargs):
    run = Run(command=command, config_hash='f' * 64, output_dir='/tmp/runs/ffffffffffff', status=status,
              started_at=started or datetime.utcnow(), **kwargs)
    if status == RunStatus.COMPLETED:
        run.complete({'outputs': 1})
    db.session.add(run)
    db.session.commit()
    return run


def add_row(run, scenario='A', axis='tz', metric='Ent', phantom='head', misalignment=1.0, ssim=80.0):
    db.session.add(BenchmarkRow.from_record(run, {
        'scenario': scenario, 'axis': axis, 'metric': metric, 'phantom': phantom,
        'misalignment': misalignment, 'ssim': ssim, 'ssim_voi': float('nan'), 'mrpe': 0.5, 'runtime': 1.0,
    }))


@pytest.fixture
def benchmark_run(app):
    run = make_run('benchmark')
    add_row(run, phantom='head', misalignment=1.0, ssim=80.0)
    add_row(run, phantom='head-v1', misalignment=3.0, ssim=90.0)
    add_row(run, metric='Tv', misalignment=0.5, ssim=95.0)
    db.session.commit()
    return run


class TestRuns:
    """Tests for the run ledger endpoints"""

    def test_list_runs_newest_first(self, client):
        earlier = datetime.utcnow() - timedelta(hours=1)
        make_run('simulate', started=earlier)
        make_run('reconstruct')
        response = client.get('/api/runs')
        assert response.status_code == 200
        data = response.get_json()
        assert data['count'] == 2
        assert [run['command'] for run in data['runs']] == ['reconstruct', 'simulate']

    def test_filter_by_command_and_status(self, client):
        make_run('simulate')
        make_run('simulate', status=RunStatus.FAILED)
        make_run('train')
        response = client.get('/api/runs?command=simulate&status=failed')
        data = response.get_json()
        assert data['count'] == 1
        assert data['runs'][0]['status'] == 'failed'

    def test_invalid_status(self, client):
        response = client.get('/api/runs?status=paused')
        assert response.status_code == 400

    def test_invalid_limit(self, client):
        response = client.get('/api/runs?limit=0')
        assert response.status_code == 400

    def test_get_run_with_artifacts(self, client):
        run = make_run('simulate')
        run.add_artifact(ArtifactKind.PROJECTIONS, '/tmp/runs/projections.raw', '/tmp/runs/projections.json')
        db.session.commit()
        response = client.get(f'/api/runs/{run.id}')
        assert response.status_code == 200
        data = response.get_json()['run']
        assert data['summary'] == {'outputs': 1}
        assert data['artifacts'][0]['kind'] == 'projections'
        assert data['duration_seconds'] >= 0

    def test_train_run_includes_history(self, client):
        run = make_run('train')
        for epoch, loss in enumerate([2.0, 1.0], start=1):
            db.session.add(EpochRecord.from_record(run, {'epoch': epoch, 'train_loss': loss,
                                                         'val_loss': float('nan')}))
        db.session.commit()
        data = client.get(f'/api/runs/{run.id}').get_json()['run']
        assert [e['epoch'] for e in data['history']] == [1, 2]
        assert data['history'][0]['val_loss'] is None

    def test_run_not_found(self, client):
        response = client.get('/api/runs/999')
        assert response.status_code == 404

    def test_artifacts(self, client):
        run = make_run('phantom')
        run.add_artifact(ArtifactKind.PHANTOM, '/tmp/runs/head.json')
        run.add_artifact(ArtifactKind.VOLUME, '/tmp/runs/head_volume.raw', '/tmp/runs/head_volume.json')
        db.session.commit()
        data = client.get(f'/api/runs/{run.id}/artifacts').get_json()
        assert data['count'] == 2
        assert Artifact.query.count() == 2

    def test_failed_run_records_error(self, app):
        run = make_run('autofocus', status=RunStatus.RUNNING)
        run.fail('Configuration error: unknown metric')
        db.session.commit()
        assert run.to_dict()['error'] == 'Configuration error: unknown metric'
        assert run.duration_seconds >= 0


class TestBenchmark:
    """Tests for the benchmark endpoints"""

    def test_rows_of_latest_run(self, client, benchmark_run):
        data = client.get('/api/benchmark/rows').get_json()
        assert data['run_id'] == benchmark_run.id
        assert data['count'] == 3
        assert data['rows'][0]['ssim_voi'] is None

    def test_rows_filter(self, client, benchmark_run):
        data = client.get(f'/api/benchmark/rows?run_id={benchmark_run.id}&metric=Tv').get_json()
        assert data['count'] == 1
        assert data['rows'][0]['misalignment'] == 0.5

    def test_summary_averages_phantoms(self, client, benchmark_run):
        data = client.get('/api/benchmark/summary').get_json()
        assert data['count'] == 2
        ent = next(item for item in data['summary'] if item['metric'] == 'Ent')
        assert ent['misalignment'] == pytest.approx(2.0)
        assert ent['ssim'] == pytest.approx(85.0)
        assert ent['phantoms'] == 2

    def test_no_benchmark_run(self, client):
        make_run('benchmark', status=RunStatus.FAILED)
        assert client.get('/api/benchmark/rows').status_code == 404
        assert client.get('/api/benchmark/summary').status_code == 404

    def test_unknown_route(self, client):
        response = client.get('/api/benchmark/unknown')
        assert response.status_code == 404
        assert response.get_json()['error'] == 'Not found'
