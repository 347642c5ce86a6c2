from app.models.run import Run, Artifact, RunStatus, ArtifactKind
from app.models.benchmark import BenchmarkRow
from app.models.training import EpochRecord

__all__ = ['Run', 'Artifact', 'RunStatus', 'ArtifactKind', 'BenchmarkRow', 'EpochRecord']
