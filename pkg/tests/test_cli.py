import json
import pytest
from app import db
from app.experiment import RESOLVED_NAME
from app.models import Artifact, ArtifactKind, BenchmarkRow, Run, RunStatus
from app.utils import storage


@pytest.fixture
def config_file(tmp_path, small_experiment):
    path = tmp_path / 'experiment.json'
    path.write_text(json.dumps(small_experiment))
    return path


@pytest.fixture
def out(tmp_path):
    return tmp_path / 'run'


def invoke(runner, *args):
    return runner.invoke(args=[str(arg) for arg in args])


class TestInitDb:
    """Tests for the init-db command"""

    def test_init_db(self, runner):
        result = invoke(runner, 'init-db')
        assert result.exit_code == 0
        assert 'Database initialized successfully!' in result.output


class TestConfigurationErrors:
    """Tests for configuration failures and their exit codes"""

    def test_unknown_config_key(self, runner, tmp_path):
        path = tmp_path / 'bad.json'
        path.write_text(json.dumps({'optimiser': {'axes': ['tz']}}))
        result = invoke(runner, 'simulate', '--config', path)
        assert result.exit_code == 2

    def test_invalid_flag_value(self, runner, config_file):
        result = invoke(runner, 'simulate', '--config', config_file, '--axis', 'yaw')
        assert result.exit_code == 2

    def test_missing_config_file(self, runner, tmp_path):
        result = invoke(runner, 'phantom', '--config', tmp_path / 'missing.json')
        assert result.exit_code == 3

    def test_autofocus_needs_a_metric(self, runner, config_file, out):
        result = invoke(runner, 'autofocus', '--config', config_file, '--output', out, '--metric', 'None')
        assert result.exit_code == 2
        run = Run.query.filter_by(command='autofocus').one()
        assert run.status == RunStatus.FAILED
        assert 'metric' in run.error

    def test_missing_projections(self, runner, config_file, out):
        result = invoke(runner, 'reconstruct', '--config', config_file, '--output', out)
        assert result.exit_code == 3
        assert Run.query.filter_by(command='reconstruct').one().status == RunStatus.FAILED

    def test_report_without_benchmark(self, runner, config_file, out):
        result = invoke(runner, 'report', '--config', config_file, '--output', out)
        assert result.exit_code == 2


class TestPhantomCommand:
    """Tests for the phantom command"""

    def test_writes_definitions_and_volumes(self, runner, config_file, out):
        result = invoke(runner, 'phantom', '--config', config_file, '--output', out, '--variants', 1)
        assert result.exit_code == 0, result.output
        assert (out / 'head.json').exists()
        assert (out / 'head-v1.json').exists()
        volume, meta = storage.read_raw(out / 'head_volume.raw')
        assert volume.shape == (18, 64, 54)
        assert meta['parameters']['phantom'] == 'head'
        resolved = json.loads((out / RESOLVED_NAME).read_text())
        assert resolved['phantom']['variants'] == 1
        run = Run.query.filter_by(command='phantom').one()
        assert run.status == RunStatus.COMPLETED
        assert set(run.summary['voxel_mass']) == {'head', 'head-v1'}
        assert run.artifacts.filter(Artifact.kind == ArtifactKind.VOLUME).count() == 2

    def test_seeded_runs_are_reproducible(self, runner, config_file, tmp_path):
        for name in ('first', 'second'):
            result = invoke(runner, 'phantom', '--config', config_file, '--output', tmp_path / name,
                            '--variants', 1, '--seed', 7)
            assert result.exit_code == 0, result.output
        first, second = (tmp_path / name / 'head-v8_volume.raw' for name in ('first', 'second'))
        assert first.read_bytes() == second.read_bytes()


@pytest.mark.slow
class TestPipeline:
    """End-to-end simulate, reconstruct and autofocus runs sharing one output directory"""

    def test_simulate_reconstruct_autofocus(self, runner, config_file, out):
        result = invoke(runner, 'simulate', '--config', config_file, '--output', out,
                        '--axis', 'tz', '--amplitude', 2.0, '--seed', 3)
        assert result.exit_code == 0, result.output
        projections, _ = storage.read_raw(out / 'projections.raw')
        assert projections.shape == (60, 48, 64)
        motion = storage.load_splines(out / 'motion.json')
        assert motion.active_axes() == ('tz',)
        simulated = Run.query.filter_by(command='simulate').one()
        assert simulated.summary['mrpe'] > 0
        profiles = storage.read_csv(out / 'rpe_profiles.csv')
        assert profiles.shape == (3 * 60, 3)
        assert profiles[profiles['variant'] == 'all']['rpe'].mean() == pytest.approx(simulated.summary['mrpe'])

        result = invoke(runner, 'reconstruct', '--config', config_file, '--output', out)
        assert result.exit_code == 0, result.output
        assert 'ssim:' in result.output
        assert 'ssim_cylinder:' in result.output
        assert (out / 'recon_ax.raw').exists()
        corrupted_ssim = Run.query.filter_by(command='reconstruct').one().summary['ssim']

        result = invoke(runner, 'autofocus', '--config', config_file, '--output', out, '--metric', 'Gt')
        assert result.exit_code == 0, result.output
        focus = Run.query.filter_by(command='autofocus').one()
        assert focus.summary['metric'] == 'Gt'
        assert focus.summary['mrpe'] <= simulated.summary['mrpe'] + 1e-9
        assert focus.summary['filter_count'] == 1
        assert 'misalignment' in focus.summary
        assert storage.read_csv(out / 'curves.csv').shape == (60, 7)
        residual = storage.read_csv(out / 'residual_rpe.csv')
        assert residual[residual['variant'] == 'all']['rpe'].mean() == pytest.approx(focus.summary['mrpe'])
        assert (out / 'compensated_sa.raw').exists()

        result = invoke(runner, 'reconstruct', '--config', config_file, '--output', out,
                        '--compensation', out / 'compensation.json')
        assert result.exit_code == 0, result.output
        compensated = Run.query.filter_by(command='reconstruct').order_by(Run.id.desc()).first()
        assert compensated.summary['static'] is False
        assert compensated.summary['ssim'] >= corrupted_ssim - 5.0

    def test_missing_model(self, runner, config_file, out, tmp_path):
        assert invoke(runner, 'simulate', '--config', config_file, '--output', out).exit_code == 0
        result = invoke(runner, 'autofocus', '--config', config_file, '--output', out,
                        '--metric', 'Cnn', '--model', tmp_path / 'missing.pt')
        assert result.exit_code == 2

    def test_benchmark_and_report(self, runner, config_file, tmp_path):
        result = invoke(runner, 'benchmark', '--config', config_file, '--output', tmp_path / 'bench',
                        '--scenarios', 'A', '--axes', 'tz', '--metrics', 'None,Gt', '--phantoms', 1)
        assert result.exit_code == 0, result.output
        bench = Run.query.filter_by(command='benchmark').one()
        assert bench.benchmark_rows.count() == 2
        table = storage.read_csv(tmp_path / 'bench' / 'benchmark_rows.csv')
        assert table.shape[0] == 2
        assert 'runtime' not in table.columns
        assert list(storage.read_csv(tmp_path / 'bench' / 'benchmark_timing.csv').columns) == [
            'scenario', 'axis', 'metric', 'phantom', 'runtime']

        result = invoke(runner, 'report', '--config', config_file, '--output', tmp_path / 'report')
        assert result.exit_code == 0, result.output
        assert (tmp_path / 'report' / f'report_run{bench.id}.csv').exists()
        assert Run.query.filter_by(command='report').one().summary['source_run'] == bench.id

    def test_train(self, runner, config_file, out):
        result = invoke(runner, 'train', '--config', config_file, '--output', out,
                        '--samples', 6, '--phantoms', 3, '--epochs', 1)
        assert result.exit_code == 0, result.output
        assert (out / 'model.pt').exists()
        assert (out / 'dataset' / 'dataset.json').exists()
        run = Run.query.filter_by(command='train').one()
        assert run.summary['samples'] == 6
        assert run.epochs.count() == 1


class TestReport:
    """Tests for reporting recorded benchmark runs"""

    def test_report_of_recorded_rows(self, runner, config_file, out):
        source = Run(command='benchmark', config_hash='0' * 64, output_dir=str(out))
        source.complete({'cells': 2})
        db.session.add(source)
        for phantom, value in (('head', 1.0), ('head-v1', 2.0)):
            db.session.add(BenchmarkRow.from_record(source, {
                'scenario': 'A', 'axis': 'rx', 'metric': 'Tv', 'phantom': phantom, 'misalignment': value,
                'ssim': 90.0, 'ssim_voi': 85.0, 'mrpe': 0.2, 'runtime': 3.0,
            }))
        db.session.commit()

        result = invoke(runner, 'report', '--config', config_file, '--output', out, '--run-id', source.id)
        assert result.exit_code == 0, result.output
        summary = storage.read_csv(out / f'report_run{source.id}.csv')
        assert summary.loc[0, 'misalignment'] == pytest.approx(1.5)
        assert summary.loc[0, 'phantoms'] == 2

    def test_report_rejects_other_commands(self, runner, config_file, out):
        source = Run(command='simulate', config_hash='0' * 64, output_dir=str(out))
        db.session.add(source)
        db.session.commit()
        result = invoke(runner, 'report', '--config', config_file, '--output', out, '--run-id', source.id)
        assert result.exit_code == 2
