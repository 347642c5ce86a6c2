from datetime import datetime
from app import db
from enum import Enum


class RunStatus(Enum):
    """Run status enumeration"""
    RUNNING = 'running'
    COMPLETED = 'completed'
    FAILED = 'failed'


class ArtifactKind(Enum):
    """Kind of file written by a run"""
    CONFIG = 'config'
    PHANTOM = 'phantom'
    VOLUME = 'volume'
    PROJECTIONS = 'projections'
    TRAJECTORY = 'trajectory'
    SPLINES = 'splines'
    SLICES = 'slices'
    DATASET = 'dataset'
    MODEL = 'model'
    TABLE = 'table'
    PLOT = 'plot'


class Run(db.Model):
    """One execution of a command-line subcommand"""
    __tablename__ = 'runs'

    id = db.Column(db.Integer, primary_key=True)
    command = db.Column(db.String(50), nullable=False, index=True)
    status = db.Column(db.Enum(RunStatus), nullable=False, default=RunStatus.RUNNING)
    config_hash = db.Column(db.String(64), nullable=False, index=True)
    output_dir = db.Column(db.String(500), nullable=False)

    summary = db.Column(db.JSON)
    error = db.Column(db.Text)

    # Timestamps
    started_at = db.Column(db.DateTime, default=datetime.utcnow, nullable=False)
    finished_at = db.Column(db.DateTime)

    # Relationships
    artifacts = db.relationship('Artifact', back_populates='run', lazy='dynamic', cascade='all, delete-orphan')
    benchmark_rows = db.relationship('BenchmarkRow', back_populates='run', lazy='dynamic',
                                     cascade='all, delete-orphan')
    epochs = db.relationship('EpochRecord', back_populates='run', lazy='dynamic', cascade='all, delete-orphan')

    def add_artifact(self, kind, path, sidecar=None):
        artifact = Artifact(run=self, kind=kind, path=str(path), sidecar=str(sidecar) if sidecar else None)
        db.session.add(artifact)
        return artifact

    def complete(self, summary=None):
        self.status = RunStatus.COMPLETED
        self.summary = summary or {}
        self.finished_at = datetime.utcnow()

    def fail(self, message):
        self.status = RunStatus.FAILED
        self.error = message
        self.finished_at = datetime.utcnow()

    @property
    def duration_seconds(self):
        if not self.finished_at:
            return None
        return (self.finished_at - self.started_at).total_seconds()

    def to_dict(self, include_artifacts=False):
        """Convert run to dictionary"""
        data = {
            'id': self.id,
            'command': self.command,
            'status': self.status.value,
            'config_hash': self.config_hash,
            'output_dir': self.output_dir,
            'summary': self.summary,
            'error': self.error,
            'started_at': self.started_at.isoformat(),
            'finished_at': self.finished_at.isoformat() if self.finished_at else None,
            'duration_seconds': self.duration_seconds
        }

        if include_artifacts:
            data['artifacts'] = [artifact.to_dict() for artifact in self.artifacts.all()]

        return data

    def __repr__(self):
        return f'<Run {self.id}: {self.command} ({self.status.value})>'


class Artifact(db.Model):
    """File written by a run, with its sidecar when it has one"""
    __tablename__ = 'artifacts'

    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey('runs.id'), nullable=False, index=True)
    kind = db.Column(db.Enum(ArtifactKind), nullable=False)
    path = db.Column(db.String(500), nullable=False)
    sidecar = db.Column(db.String(500))
    created_at = db.Column(db.DateTime, default=datetime.utcnow, nullable=False)

    run = db.relationship('Run', back_populates='artifacts')

    def to_dict(self):
        return {
            'id': self.id,
            'run_id': self.run_id,
            'kind': self.kind.value,
            'path': self.path,
            'sidecar': self.sidecar,
            'created_at': self.created_at.isoformat()
        }

    def __repr__(self):
        return f'<Artifact {self.kind.value}: {self.path}>'
