import os
from app import create_app, db

# Create application instance
app = create_app(os.getenv('FLASK_ENV', 'development'))


@app.shell_context_processor
def make_shell_context():
    """Add database instance and ledger models to shell context"""
    from app.models import Run, Artifact, BenchmarkRow, EpochRecord
    return {'db': db, 'Run': Run, 'Artifact': Artifact, 'BenchmarkRow': BenchmarkRow, 'EpochRecord': EpochRecord}


if __name__ == '__main__':
    app.run(host='127.0.0.1', port=5000, debug=True)
