"""SVG figures for benchmark and training results."""
import logging
from pathlib import Path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from app.utils.errors import StorageError  # noqa: E402

logger = logging.getLogger(__name__)

STYLE = {
    'font.size': 9,
    'axes.labelsize': 9,
    'legend.fontsize': 8,
    'xtick.labelsize': 8,
    'ytick.labelsize': 8,
    'svg.hashsalt': 'autofocus',
}


def _save(fig, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format='svg', metadata={'Date': None})
    except OSError as exc:
        raise StorageError(f'cannot write {path}: {exc}') from exc
    finally:
        plt.close(fig)
    logger.debug('wrote %s', path)
    return path


def misalignment_boxplots(rows, directory):
    """One figure per scenario: misalignment per metric, grouped by axis"""
    paths = []
    with plt.rc_context(STYLE):
        for scenario, frame in rows.groupby('scenario', sort=False):
            axes = list(dict.fromkeys(frame['axis']))
            metrics = list(dict.fromkeys(frame['metric']))
            fig, panels = plt.subplots(1, len(axes), figsize=(2.2 * len(axes), 2.8), sharey=True, squeeze=False)
            for panel, axis in zip(panels[0], axes):
                cell = frame[frame['axis'] == axis]
                panel.boxplot([cell[cell['metric'] == m]['misalignment'].to_numpy() for m in metrics])
                panel.set_xticks(np.arange(1, len(metrics) + 1))
                panel.set_xticklabels(metrics, rotation=60)
                panel.set_title(axis)
            panels[0][0].set_ylabel('misalignment [deg/mm]')
            fig.tight_layout()
            paths.append(_save(fig, Path(directory) / f'misalignment_{scenario}.svg'))
    return paths


def curve_overlay(motion, annihilating, path, title=''):
    """Applied motion against the negated annihilating curve; a perfect estimate overlaps"""
    views = np.arange(len(motion))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        ax.plot(views, motion, label='motion')
        ax.plot(views, -np.asarray(annihilating), '--', label='-annihilating')
        ax.set_xlabel('view')
        ax.set_ylabel('deg/mm')
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def training_history(history, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        ax.semilogy(history['epoch'], history['train_loss'], label='train')
        if history['val_loss'].notna().any():
            ax.semilogy(history['epoch'], history['val_loss'], label='validation')
        ax.set_xlabel('epoch')
        ax.set_ylabel('loss')
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def soft_classification(profiles, sample, path):
    """True profile and classification outcome over the views of one sample"""
    frame = profiles[profiles['sample'] == sample]
    colors = {'TP': 'tab:green', 'TN': 'tab:gray', 'FP': 'tab:orange', 'FN': 'tab:red'}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.6))
        ax.plot(frame['view'], frame['true_all'], color='black', label='true RPE')
        ax.plot(frame['view'], frame['pred_all'], color='tab:blue', label='predicted RPE')
        for outcome, color in colors.items():
            hits = frame[frame['outcome'] == outcome]
            ax.scatter(hits['view'], np.zeros(len(hits)), s=4, color=color, label=outcome)
        ax.set_xlabel('view')
        ax.set_ylabel('mm')
        ax.legend(ncol=3)
        fig.tight_layout()
        return _save(fig, path)
