from flask import Blueprint, request, jsonify
from app.models.run import Run, RunStatus

runs_bp = Blueprint('runs', __name__)


@runs_bp.route('', methods=['GET'])
def list_runs():
    """
    List recorded runs, newest first
    ---
    Query parameters:
    - command: Optional subcommand filter (phantom, simulate, reconstruct, train, autofocus, benchmark, report)
    - status: Optional status filter (running, completed, failed)
    - limit: Maximum number of runs (default: 50)
    """
    try:
        command = request.args.get('command', '').strip()
        status = request.args.get('status', '').strip().lower()
        limit = request.args.get('limit', 50, type=int)

        if limit < 1:
            return jsonify({'error': 'Limit must be at least 1'}), 400

        query = Run.query
        if command:
            query = query.filter(Run.command == command)
        if status:
            try:
                query = query.filter(Run.status == RunStatus(status))
            except ValueError:
                return jsonify({'error': f'Invalid status: {status}'}), 400

        runs = query.order_by(Run.started_at.desc(), Run.id.desc()).limit(limit).all()

        return jsonify({
            'runs': [run.to_dict() for run in runs],
            'count': len(runs)
        }), 200

    except Exception as e:
        return jsonify({'error': 'Failed to list runs', 'message': str(e)}), 500


@runs_bp.route('/<int:run_id>', methods=['GET'])
def get_run(run_id):
    """Run details with its artifacts and, for train runs, the epoch history"""
    try:
        run = Run.query.get(run_id)

        if not run:
            return jsonify({'error': 'Run not found'}), 404

        data = run.to_dict(include_artifacts=True)
        if run.command == 'train':
            data['history'] = [epoch.to_dict() for epoch in run.epochs.order_by('epoch').all()]

        return jsonify({'run': data}), 200

    except Exception as e:
        return jsonify({'error': 'Failed to get run', 'message': str(e)}), 500


@runs_bp.route('/<int:run_id>/artifacts', methods=['GET'])
def get_run_artifacts(run_id):
    """Files written by a run"""
    try:
        run = Run.query.get(run_id)

        if not run:
            return jsonify({'error': 'Run not found'}), 404

        artifacts = [artifact.to_dict() for artifact in run.artifacts.all()]

        return jsonify({
            'artifacts': artifacts,
            'count': len(artifacts)
        }), 200

    except Exception as e:
        return jsonify({'error': 'Failed to get artifacts', 'message': str(e)}), 500
