import math
from app import db


class EpochRecord(db.Model):
    """Training history of a train run"""
    __tablename__ = 'epoch_records'

    id = db.Column(db.Integer, primary_key=True)
    run_id = db.Column(db.Integer, db.ForeignKey('runs.id'), nullable=False, index=True)
    epoch = db.Column(db.Integer, nullable=False)
    train_loss = db.Column(db.Float, nullable=False)
    val_loss = db.Column(db.Float)

    run = db.relationship('Run', back_populates='epochs')

    __table_args__ = (
        db.UniqueConstraint('run_id', 'epoch', name='uq_epoch_per_run'),
    )

    @classmethod
    def from_record(cls, run, record):
        val_loss = record.get('val_loss')
        if val_loss is not None and math.isnan(val_loss):
            val_loss = None
        return cls(run=run, epoch=int(record['epoch']), train_loss=float(record['train_loss']), val_loss=val_loss)

    def to_dict(self):
        return {
            'epoch': self.epoch,
            'train_loss': self.train_loss,
            'val_loss': self.val_loss
        }

    def __repr__(self):
        return f'<EpochRecord run={self.run_id} epoch={self.epoch}>'
