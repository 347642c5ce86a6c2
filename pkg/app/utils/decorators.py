from contextlib import contextmanager
from functools import wraps

import click
from flask import current_app

from app import db
from app.models.run import Run
from app.utils.errors import AutofocusError


def toolkit_command(fn):
    """Decorator mapping toolkit errors raised by a CLI command to their exit codes"""
    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except AutofocusError as error:
            current_app.logger.error('%s: %s', error.label, error.message)
            click.echo(f'Error: {error.label}: {error.message}', err=True)
            raise click.exceptions.Exit(error.exit_code)
    return wrapper


@contextmanager
def recorded_run(command, experiment):
    """
    Ledger entry for one command execution
    - The run row is committed before any work starts
    - On failure the row is marked failed and the error re-raised
    """
    db.create_all()
    run = Run(command=command, config_hash=experiment.config_hash, output_dir=str(experiment.output_dir))
    db.session.add(run)
    db.session.commit()

    try:
        yield run
    except Exception as error:
        db.session.rollback()
        run.fail(getattr(error, 'message', str(error)))
        db.session.commit()
        raise

    db.session.commit()
