from flask import Blueprint, request, jsonify
from sqlalchemy import func
from app import db
from app.models.benchmark import BenchmarkRow
from app.models.run import Run, RunStatus

benchmark_bp = Blueprint('benchmark', __name__)


def _latest_benchmark_run():
    return (Run.query.filter(Run.command == 'benchmark', Run.status == RunStatus.COMPLETED)
            .order_by(Run.finished_at.desc(), Run.id.desc()).first())


def _resolve_run(run_id):
    if run_id is not None:
        return Run.query.get(run_id)
    return _latest_benchmark_run()


@benchmark_bp.route('/rows', methods=['GET'])
def get_rows():
    """
    Benchmark rows of one run
    ---
    Query parameters:
    - run_id: Benchmark run (default: latest completed)
    - scenario, axis, metric: Optional filters
    """
    try:
        run = _resolve_run(request.args.get('run_id', type=int))

        if not run:
            return jsonify({'error': 'Benchmark run not found'}), 404

        query = BenchmarkRow.query.filter(BenchmarkRow.run_id == run.id)
        for column in ('scenario', 'axis', 'metric'):
            value = request.args.get(column, '').strip()
            if value:
                query = query.filter(getattr(BenchmarkRow, column) == value)

        rows = query.order_by(BenchmarkRow.id.asc()).all()

        return jsonify({
            'run_id': run.id,
            'rows': [row.to_dict() for row in rows],
            'count': len(rows)
        }), 200

    except Exception as e:
        return jsonify({'error': 'Failed to get benchmark rows', 'message': str(e)}), 500


@benchmark_bp.route('/summary', methods=['GET'])
def get_summary():
    """Mean misalignment and SSIM per (scenario, axis, metric), averaged over phantoms"""
    try:
        run = _resolve_run(request.args.get('run_id', type=int))

        if not run:
            return jsonify({'error': 'Benchmark run not found'}), 404

        groups = db.session.query(
            BenchmarkRow.scenario,
            BenchmarkRow.axis,
            BenchmarkRow.metric,
            func.avg(BenchmarkRow.misalignment),
            func.avg(BenchmarkRow.ssim),
            func.avg(BenchmarkRow.ssim_voi),
            func.count(BenchmarkRow.id)
        ).filter(BenchmarkRow.run_id == run.id).group_by(
            BenchmarkRow.scenario, BenchmarkRow.axis, BenchmarkRow.metric
        ).order_by(BenchmarkRow.scenario, BenchmarkRow.axis, BenchmarkRow.metric).all()

        summary = [{
            'scenario': scenario,
            'axis': axis,
            'metric': metric,
            'misalignment': misalignment,
            'ssim': ssim,
            'ssim_voi': ssim_voi,
            'phantoms': count
        } for scenario, axis, metric, misalignment, ssim, ssim_voi, count in groups]

        return jsonify({
            'run_id': run.id,
            'summary': summary,
            'count': len(summary)
        }), 200

    except Exception as e:
        return jsonify({'error': 'Failed to get benchmark summary', 'message': str(e)}), 500
