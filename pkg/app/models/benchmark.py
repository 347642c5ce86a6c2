import math
from app import db


class BenchmarkRow(db.Model):
    """One benchmark cell: scenario, axis, metric and phantom"""
    __tablename__ = 'benchmark_rows'

    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey('runs.id'), nullable=False, index=True)

    # Cell
    scenario = db.Column(db.String(10), nullable=False, index=True)
    axis = db.Column(db.String(2), nullable=False, index=True)
    metric = db.Column(db.String(10), nullable=False, index=True)
    phantom = db.Column(db.String(100), nullable=False)

    # Scores
    misalignment = db.Column(db.Float, nullable=False)
    ssim = db.Column(db.Float, nullable=False)
    ssim_voi = db.Column(db.Float)  # Null when the VOI misses every slice
    mrpe = db.Column(db.Float, nullable=False)
    runtime = db.Column(db.Float, nullable=False)

    run = db.relationship('Run', back_populates='benchmark_rows')

    @classmethod
    def from_record(cls, run, record):
        ssim_voi = record.get('ssim_voi')
        if ssim_voi is not None and math.isnan(ssim_voi):
            ssim_voi = None
        return cls(run=run, scenario=record['scenario'], axis=record['axis'], metric=record['metric'],
                   phantom=record['phantom'], misalignment=float(record['misalignment']),
                   ssim=float(record['ssim']), ssim_voi=ssim_voi, mrpe=float(record['mrpe']),
                   runtime=float(record['runtime']))

    def to_dict(self):
        return {
            'id': self.id,
            'run_id': self.run_id,
            'scenario': self.scenario,
            'axis': self.axis,
            'metric': self.metric,
            'phantom': self.phantom,
            'misalignment': self.misalignment,
            'ssim': self.ssim,
            'ssim_voi': self.ssim_voi,
            'mrpe': self.mrpe,
            'runtime': self.runtime
        }

    def __repr__(self):
        return f'<BenchmarkRow {self.scenario}/{self.axis}/{self.metric}: {self.misalignment:.3f}>'
