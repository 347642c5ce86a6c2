"""
Command-line subcommands, registered on the Flask CLI group:

    flask --app run phantom | simulate | reconstruct | train | autofocus | benchmark | report | init-db

Every command resolves an ExperimentConfig (defaults < --config file <
flags), writes config.resolved.json into its output directory and records a
Run with one Artifact per written file.
"""
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
import pandas as pd
from flask import current_app

from app import db
from app.core import plots
from app.core.appearance import DatasetConfig, TrainConfig, evaluate, generate_dataset, load_dataset, \
    load_model, save_dataset, save_model, split_by_phantom, train
from app.core.autofocus import compensate
from app.core.bench import FINE_TUNE_METRIC, SCENARIOS, TIMING_COLUMNS, BenchConfig, misalignment_curves, \
    run_benchmark, scenario_motion, summarize
from app.core.fdk import Reconstructor, ground_truth_slices, inscribed_cylinder, parker_safe_range, reconstruct_volume
from app.core.geometry import AXES, as_effective, compose
from app.core.iqm import make_metric, slices_ssim
from app.core.motion import curves_from_splines, motion_from_splines, random_motion
from app.core.phantom import render_projections, voxelize
from app.core.rpe import profiles_frame, rpe_profiles
from app.experiment import ExperimentConfig, set_override
from app.models import ArtifactKind, BenchmarkRow, EpochRecord, Run, RunStatus
from app.utils import storage
from app.utils.decorators import recorded_run, toolkit_command
from app.utils.errors import ConfigurationError, ShapeError

PROJECTIONS_NAME = 'projections.raw'
MOTION_NAME = 'motion.json'
RPE_NAME = 'rpe_profiles.csv'


EXPERIMENT_OPTIONS = (
    click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='Experiment config file (JSON)'),
    click.option('--output', 'output_dir', type=click.Path(file_okay=False), help='Output directory'),
    click.option('--threads', type=click.IntRange(min=1), help='Thread-pool size; 1 is bit-reproducible'),
    click.option('--seed', type=int, help='Seed for phantom variants, motion, noise and training'),
)


def experiment_options(fn):
    """Options shared by every experiment command"""
    for option in reversed(EXPERIMENT_OPTIONS):
        fn = option(fn)
    return fn


def _split(value):
    if value is None:
        return None
    return [item.strip() for item in value.split(',') if item.strip()]


def load_experiment(config_path, output_dir, threads, seed, overrides=None):
    overrides = overrides or {}
    set_override(overrides, 'output_dir', output_dir)
    set_override(overrides, 'threads', threads)
    if seed is not None:
        for name in ('phantom', 'motion', 'noise', 'training'):
            set_override(overrides, f'seeds.{name}', seed)
    experiment = ExperimentConfig.load(config_path, overrides,
                                       output_root=current_app.config['OUTPUT_ROOT'],
                                       default_threads=current_app.config['THREADS'])
    current_app.logger.info('experiment %s -> %s', experiment.config_hash[:12], experiment.output_dir)
    return experiment


def _begin(run, experiment):
    run.add_artifact(ArtifactKind.CONFIG, experiment.write_resolved())
    return Path(experiment.output_dir)


def _record_raw(run, kind, paths):
    raw, sidecar = paths
    run.add_artifact(kind, raw, sidecar)


def _finish(run, summary):
    run.complete(summary)
    for key, value in summary.items():
        if not isinstance(value, (list, dict)):
            click.echo(f'{key}: {value}')
    click.echo(f'outputs: {run.output_dir}')


def _load_projections(path, trajectory):
    raw, meta = storage.read_raw(path)
    expected = (trajectory.n_views, trajectory.intrinsics.nv, trajectory.intrinsics.nu)
    if raw.shape != expected:
        raise ShapeError(f'{path} holds projections of shape {raw.shape}, the geometry expects {expected}')
    return raw, meta


def _corrupted_geometry(trajectory, motion_path):
    """Static geometry, or the geometry altered by the stored motion when there is one"""
    if motion_path and Path(motion_path).exists():
        splines = storage.load_splines(motion_path)
        return compose(trajectory, motion_from_splines(splines, trajectory.n_views)), splines
    return as_effective(trajectory), None


def register_commands(app):
    """Register the toolkit's subcommands on the app's CLI group"""

    @app.cli.command('init-db')
    def init_db():
        """Create the run ledger tables"""
        db.create_all()
        click.echo('Database initialized successfully!')

    @app.cli.command('phantom')
    @experiment_options
    @click.option('--variants', type=click.IntRange(min=0), help='Seeded anatomical variants to add')
    @toolkit_command
    def phantom_command(config_path, output_dir, threads, seed, variants):
        """Write the phantom definitions and their voxelized ground truth"""
        overrides = set_override({}, 'phantom.variants', variants)
        experiment = load_experiment(config_path, output_dir, threads, seed, overrides)

        with recorded_run('phantom', experiment) as run:
            out = _begin(run, experiment)
            grid = experiment.grid()
            phantoms = experiment.variants(1 + experiment['phantom']['variants'])
            masses = {}
            for ph in phantoms:
                path = storage.save_phantom(out / f'{ph.name}.json', ph, experiment.config_hash)
                run.add_artifact(ArtifactKind.PHANTOM, path)
                volume = voxelize(ph, grid)
                _record_raw(run, ArtifactKind.VOLUME, storage.write_raw(
                    out / f'{ph.name}_volume.raw', volume, experiment.config_hash, phantom=ph.name,
                    dims=list(grid.dims), spacing=grid.spacing, origin=list(grid.origin)))
                masses[ph.name] = float(volume.sum() * grid.voxel_volume)

            _finish(run, {'phantoms': [ph.name for ph in phantoms], 'voxel_mass': masses,
                          'grid': list(grid.dims)})

    @app.cli.command('simulate')
    @experiment_options
    @click.option('--scenario', type=click.Choice(sorted(SCENARIOS)), help='Deterministic benchmark motion')
    @click.option('--axis', help='Motion axis (tx, ty, tz, rx, ry, rz)')
    @click.option('--amplitude', type=click.FloatRange(min=0), help='Motion amplitude in mm or degrees')
    @click.option('--noise', type=click.FloatRange(min=0), help='Gaussian noise sigma on the line integrals')
    @toolkit_command
    def simulate_command(config_path, output_dir, threads, seed, scenario, axis, amplitude, noise):
        """Render projections and the motion that alters their geometry"""
        overrides = {}
        set_override(overrides, 'motion.scenario', scenario)
        set_override(overrides, 'motion.axis', axis)
        set_override(overrides, 'motion.amplitude', amplitude)
        set_override(overrides, 'phantom.noise_sigma', noise)
        experiment = load_experiment(config_path, output_dir, threads, seed, overrides)

        with recorded_run('simulate', experiment) as run:
            out = _begin(run, experiment)
            motion = experiment['motion']
            trajectory = experiment.trajectory()
            n_views = trajectory.n_views
            safe_range = parker_safe_range(trajectory)

            if motion['scenario']:
                sc = SCENARIOS[motion['scenario']]
                if motion['amplitude'] > 0:
                    sc = replace(sc, amplitude=motion['amplitude'])
                splines = scenario_motion(sc, n_views, motion['axis'], safe_range)
            else:
                splines = random_motion(motion['axis'], motion['amplitude'], motion['n_nodes'], n_views,
                                        experiment.seed('motion'), safe_range)
            eff = compose(trajectory, motion_from_splines(splines, n_views))
            profiles = rpe_profiles(eff, experiment.markers())
            mrpe = profiles['all'].mean
            run.add_artifact(ArtifactKind.TABLE, storage.write_csv(out / RPE_NAME, profiles_frame(profiles)))

            ph = experiment.phantom()
            raw = render_projections(ph, trajectory, experiment['phantom']['noise_sigma'],
                                     seed=experiment.seed('noise'), threads=experiment.threads)
            _record_raw(run, ArtifactKind.PROJECTIONS, storage.write_raw(
                out / PROJECTIONS_NAME, raw, experiment.config_hash, phantom=ph.name,
                noise_sigma=experiment['phantom']['noise_sigma'], intrinsics=trajectory.intrinsics.to_dict()))
            run.add_artifact(ArtifactKind.TRAJECTORY, storage.save_trajectory(
                out / 'trajectory.json', trajectory, experiment.config_hash))
            run.add_artifact(ArtifactKind.SPLINES, storage.save_splines(
                out / MOTION_NAME, splines, experiment.config_hash, axis=motion['axis'],
                scenario=motion['scenario'], amplitude=motion['amplitude'], mrpe=mrpe))

            _finish(run, {'phantom': ph.name, 'axis': motion['axis'], 'scenario': motion['scenario'],
                          'amplitude': motion['amplitude'], 'mrpe': mrpe, 'window': list(splines.window or [])})

    @app.cli.command('reconstruct')
    @experiment_options
    @click.option('--projections', type=click.Path(dir_okay=False), help='Projection payload (default: output dir)')
    @click.option('--motion', 'motion_path', type=click.Path(dir_okay=False), help='Motion applied to the geometry')
    @click.option('--compensation', type=click.Path(dir_okay=False), help='Annihilating splines to compose')
    @click.option('--volume/--no-volume', default=False, help='Also reconstruct the full volume')
    @toolkit_command
    def reconstruct_command(config_path, output_dir, threads, seed, projections, motion_path, compensation, volume):
        """FDK reconstruction of the nine slices (and optionally the volume)"""
        experiment = load_experiment(config_path, output_dir, threads, seed)

        with recorded_run('reconstruct', experiment) as run:
            out = _begin(run, experiment)
            trajectory = experiment.trajectory()
            raw, _ = _load_projections(projections or out / PROJECTIONS_NAME, trajectory)
            eff, _ = _corrupted_geometry(trajectory, motion_path or out / MOTION_NAME)
            if compensation:
                correction = storage.load_splines(compensation)
                eff = compose(eff, motion_from_splines(correction, trajectory.n_views))

            slice_set = experiment.slice_set()
            slices = Reconstructor(slice_set, raw, trajectory, experiment.threads).reconstruct(eff)
            for paths in storage.save_slices(out, 'recon', slices, experiment.config_hash,
                                             spacing=slice_set.spacing, static=eff.is_static):
                _record_raw(run, ArtifactKind.SLICES, paths)

            truth = ground_truth_slices(slice_set, experiment.phantom())
            cylinder = inscribed_cylinder(slice_set, trajectory.intrinsics)
            summary = {'ssim': slices_ssim(slices, truth), 'ssim_cylinder': slices_ssim(slices, truth, cylinder),
                       'static': eff.is_static, 'dims': {o: list(d) for o, d in slices.dims().items()}}
            if volume:
                grid = experiment.grid()
                data = reconstruct_volume(grid, eff, raw, experiment.threads)
                _record_raw(run, ArtifactKind.VOLUME, storage.write_raw(
                    out / 'recon_volume.raw', data, experiment.config_hash, dims=list(grid.dims),
                    spacing=grid.spacing, origin=list(grid.origin)))

            _finish(run, summary)

    @app.cli.command('train')
    @experiment_options
    @click.option('--samples', type=click.IntRange(min=1), help='Generated samples')
    @click.option('--phantoms', type=click.IntRange(min=1), help='Training phantom variants')
    @click.option('--epochs', type=click.IntRange(min=1), help='Maximum epochs')
    @click.option('--activation', type=click.Choice(['relu', 'tanh', 'identity']))
    @click.option('--dataset', type=click.Path(file_okay=False), help='Reuse a stored dataset')
    @click.option('--plots/--no-plots', 'plots_', default=False, help='Write SVG plots')
    @toolkit_command
    def train_command(config_path, output_dir, threads, seed, samples, phantoms, epochs, activation, dataset, plots_):
        """Generate a dataset and train the appearance model"""
        overrides = {}
        set_override(overrides, 'training.samples', samples)
        set_override(overrides, 'training.phantoms', phantoms)
        set_override(overrides, 'training.max_epochs', epochs)
        set_override(overrides, 'training.activation', activation)
        set_override(overrides, 'training.dataset', dataset)
        experiment = load_experiment(config_path, output_dir, threads, seed, overrides)

        with recorded_run('train', experiment) as run:
            out = _begin(run, experiment)
            block = experiment['training']
            if block['dataset']:
                data = load_dataset(block['dataset'])
            else:
                config = DatasetConfig(trajectory=experiment.trajectory(), slices=experiment.slice_set(),
                                       markers=experiment.markers(), n_nodes=block['n_nodes'],
                                       seed=experiment.seed('training'),
                                       noise_sigma=experiment['phantom']['noise_sigma'],
                                       threads=experiment.threads)
                data = generate_dataset(experiment.training_phantoms(), block['samples'],
                                        block['amplitude_range'], config)
                run.add_artifact(ArtifactKind.DATASET, save_dataset(out / 'dataset', data, experiment.config_hash))

            train_set, val_set, test_set = split_by_phantom(data, block['split'])
            config = TrainConfig(learning_rate=block['learning_rate'], batch_size=block['batch_size'],
                                 max_epochs=block['max_epochs'], patience=block['patience'],
                                 seed=experiment.seed('training'), split=tuple(block['split']))
            result = train(train_set, val_set, config, architecture={'activation': block['activation']})

            model_path = out / 'model.pt'
            save_model(result.model, model_path)
            run.add_artifact(ArtifactKind.MODEL, model_path)
            run.add_artifact(ArtifactKind.TABLE, storage.write_csv(out / 'history.csv', result.history))
            for record in result.history.to_dict('records'):
                db.session.add(EpochRecord.from_record(run, record))

            summary = {'samples': len(data), 'train': len(train_set), 'validation': len(val_set),
                       'test': len(test_set), 'best_epoch': result.best_epoch,
                       'epochs': len(result.history), 'parameters': result.model.parameter_count()}
            if test_set:
                report = evaluate(result.model, test_set, experiment['metric']['threshold'])
                run.add_artifact(ArtifactKind.TABLE, storage.write_csv(out / 'evaluation.csv', report.samples))
                run.add_artifact(ArtifactKind.TABLE, storage.write_csv(out / 'profiles.csv', report.profiles))
                summary.update(fn_rate=report.fn_rate, fp_rate=report.fp_rate,
                               correlation=None if np.isnan(report.correlation) else report.correlation)
                if plots_:
                    run.add_artifact(ArtifactKind.PLOT, plots.soft_classification(
                        report.profiles, 0, out / 'soft_classification.svg'))
            if plots_:
                run.add_artifact(ArtifactKind.PLOT, plots.training_history(result.history, out / 'history.svg'))

            _finish(run, summary)

    @app.cli.command('autofocus')
    @experiment_options
    @click.option('--metric', help='Ent, Ent+, Tv, Tv+, Cnn, Cnn+ or Gt')
    @click.option('--axes', help='Comma-separated axes to optimize')
    @click.option('--model', type=click.Path(dir_okay=False), help='Trained appearance model')
    @click.option('--projections', type=click.Path(dir_okay=False), help='Projection payload (default: output dir)')
    @click.option('--motion', 'motion_path', type=click.Path(dir_okay=False), help='Motion applied to the geometry')
    @click.option('--nodes', type=click.IntRange(min=2), help='Annihilation spline nodes')
    @click.option('--mask/--no-mask', default=None, help='Constrain to views flagged by the learned metric')
    @toolkit_command
    def autofocus_command(config_path, output_dir, threads, seed, metric, axes, model, projections, motion_path,
                          nodes, mask):
        """Estimate the annihilating motion of a motion-affected acquisition"""
        overrides = {}
        set_override(overrides, 'metric.name', metric)
        set_override(overrides, 'metric.model', model)
        set_override(overrides, 'optimizer.axes', _split(axes))
        set_override(overrides, 'optimizer.n_nodes', nodes)
        set_override(overrides, 'optimizer.mask', mask)
        experiment = load_experiment(config_path, output_dir, threads, seed, overrides)

        with recorded_run('autofocus', experiment) as run:
            out = _begin(run, experiment)
            name = experiment['metric']['name']
            if name == 'None':
                raise ConfigurationError('autofocus needs an optimization metric')
            optimizer = experiment['optimizer']
            trajectory = experiment.trajectory()
            raw, _ = _load_projections(projections or out / PROJECTIONS_NAME, trajectory)
            corrupted, truth = _corrupted_geometry(trajectory, motion_path or out / MOTION_NAME)

            ph = experiment.phantom()
            window = experiment.bone_window(ph)
            markers = experiment.markers()
            learned = load_model(experiment['metric']['model']) if experiment['metric']['model'] else None
            objective = make_metric(name, window=window, markers=markers, model=learned)
            second_name = optimizer['second_metric'] or FINE_TUNE_METRIC.get(name)
            second = make_metric(second_name, window=window, markers=markers, model=learned) if second_name else None

            reconstructor = Reconstructor(experiment.slice_set(), raw, trajectory, experiment.threads)
            result = compensate(objective, reconstructor, corrupted, optimizer['n_nodes'], optimizer['axes'],
                                experiment.schedule(), second_metric=second, use_mask=optimizer['mask'],
                                threshold=experiment['metric']['threshold'])

            run.add_artifact(ArtifactKind.SPLINES, storage.save_splines(
                out / 'compensation.json', result.splines, experiment.config_hash, metric=result.metric,
                axes=list(result.axes), score=result.score))
            run.add_artifact(ArtifactKind.TABLE, storage.write_csv(out / 'trace.csv', result.trace))
            curves = pd.DataFrame(result.curves.values.T, columns=list(AXES))
            curves.insert(0, 'view', np.arange(trajectory.n_views))
            run.add_artifact(ArtifactKind.TABLE, storage.write_csv(out / 'curves.csv', curves))
            residual = rpe_profiles(result.eff, markers)
            run.add_artifact(ArtifactKind.TABLE, storage.write_csv(out / 'residual_rpe.csv', profiles_frame(residual)))
            for paths in storage.save_slices(out, 'compensated', result.slices, experiment.config_hash,
                                             metric=result.metric):
                _record_raw(run, ArtifactKind.SLICES, paths)

            summary = {'metric': result.metric, 'axes': list(result.axes), 'score': result.score,
                       'evaluations': int(result.trace['evaluations'].max()) if len(result.trace) else 0,
                       'elapsed': result.elapsed, 'mrpe': residual['all'].mean,
                       'filter_count': result.filter_count}
            if truth is not None:
                summary['misalignment'] = misalignment_curves(result.curves,
                                                              curves_from_splines(truth, trajectory.n_views))
            _finish(run, summary)

    @app.cli.command('benchmark')
    @experiment_options
    @click.option('--scenarios', help='Comma-separated scenarios (A, B)')
    @click.option('--axes', help='Comma-separated motion axes')
    @click.option('--metrics', help='Comma-separated metrics')
    @click.option('--phantoms', type=click.IntRange(min=1), help='Test phantoms')
    @click.option('--workers', type=click.IntRange(min=1), help='Concurrent benchmark cells')
    @click.option('--model', type=click.Path(dir_okay=False), help='Trained appearance model')
    @click.option('--plots/--no-plots', 'plots_', default=None, help='Write SVG plots')
    @click.option('--all-axes/--single-axis', default=None, help='Optimize all six axes in every cell')
    @toolkit_command
    def benchmark_command(config_path, output_dir, threads, seed, scenarios, axes, metrics, phantoms, workers,
                          model, plots_, all_axes):
        """Run the (scenario, axis, metric, phantom) benchmark grid"""
        overrides = {}
        set_override(overrides, 'benchmark.scenarios', _split(scenarios))
        set_override(overrides, 'benchmark.axes', _split(axes))
        set_override(overrides, 'benchmark.metrics', _split(metrics))
        set_override(overrides, 'benchmark.phantoms', phantoms)
        set_override(overrides, 'benchmark.workers', workers)
        set_override(overrides, 'benchmark.plots', plots_)
        set_override(overrides, 'benchmark.all_axes', all_axes)
        set_override(overrides, 'metric.model', model)
        experiment = load_experiment(config_path, output_dir, threads, seed, overrides)

        with recorded_run('benchmark', experiment) as run:
            out = _begin(run, experiment)
            block = experiment['benchmark']
            metric = experiment['metric']
            config = BenchConfig(
                trajectory=experiment.trajectory(), slices=experiment.slice_set(), markers=experiment.markers(),
                schedule=experiment.schedule(), window_fractions=(metric['lower'], metric['upper']),
                bins=metric['bins'], model=load_model(metric['model']) if metric['model'] else None,
                threshold=metric['threshold'], noise_sigma=experiment['phantom']['noise_sigma'],
                seed=experiment.seed('noise'), workers=block['workers'], threads=experiment.threads,
                all_axes=block['all_axes'])
            result = run_benchmark([SCENARIOS[name] for name in block['scenarios']], block['axes'],
                                   block['metrics'], experiment.benchmark_phantoms(), config)

            summary = result.summary()
            run.add_artifact(ArtifactKind.TABLE, storage.write_csv(out / 'benchmark_rows.csv', result.table()))
            run.add_artifact(ArtifactKind.TABLE, storage.write_csv(out / 'benchmark_summary.csv',
                                                                   summary.drop(columns=TIMING_COLUMNS)))
            run.add_artifact(ArtifactKind.TABLE, storage.write_csv(out / 'benchmark_timing.csv', result.timings()))
            for record in result.rows.to_dict('records'):
                db.session.add(BenchmarkRow.from_record(run, record))

            if block['plots']:
                for path in plots.misalignment_boxplots(result.rows, out):
                    run.add_artifact(ArtifactKind.PLOT, path)
                for (scenario, axis, name, phantom), curve in result.curves.items():
                    if name == 'None':
                        continue
                    path = plots.curve_overlay(curve['motion'], curve['annihilating'],
                                               out / 'curves' / f'{scenario}_{axis}_{name}_{phantom}.svg',
                                               title=f'{scenario} {axis} {name}')
                    run.add_artifact(ArtifactKind.PLOT, path)

            click.echo(summary.to_string(index=False))
            _finish(run, {'cells': len(result.rows), 'groups': len(summary)})

    @app.cli.command('report')
    @experiment_options
    @click.option('--run-id', type=int, help='Benchmark run (default: latest completed)')
    @toolkit_command
    def report_command(config_path, output_dir, threads, seed, run_id):
        """Print the benchmark summary of a recorded run and write it as CSV"""
        experiment = load_experiment(config_path, output_dir, threads, seed)
        db.create_all()

        if run_id is not None:
            source = Run.query.get(run_id)
        else:
            source = (Run.query.filter(Run.command == 'benchmark', Run.status == RunStatus.COMPLETED)
                      .order_by(Run.finished_at.desc(), Run.id.desc()).first())
        if source is None or source.command != 'benchmark':
            raise ConfigurationError('no completed benchmark run to report on')

        with recorded_run('report', experiment) as run:
            out = _begin(run, experiment)
            rows = pd.DataFrame([row.to_dict() for row in source.benchmark_rows.order_by(BenchmarkRow.id).all()])
            if rows.empty:
                raise ConfigurationError(f'benchmark run {source.id} has no rows')
            rows['ssim_voi'] = rows['ssim_voi'].astype(float)
            summary = summarize(rows)
            run.add_artifact(ArtifactKind.TABLE, storage.write_csv(out / f'report_run{source.id}.csv', summary))

            click.echo(summary.to_string(index=False))
            _finish(run, {'source_run': source.id, 'groups': len(summary)})
