from app.routes.runs import runs_bp
from app.routes.benchmark import benchmark_bp

__all__ = ['runs_bp', 'benchmark_bp']
