import logging
import os
from flask import Flask
from flask_sqlalchemy import SQLAlchemy
from config import config

db = SQLAlchemy()


def configure_logging(app):
    """Route the toolkit's module loggers through the app logger's level"""
    level = getattr(logging, str(app.config.get('LOG_LEVEL', 'INFO')).upper(), logging.INFO)
    app.logger.setLevel(level)
    package_logger = logging.getLogger('app')
    package_logger.setLevel(level)
    if not package_logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s'))
        package_logger.addHandler(handler)


def create_app(config_name='default'):
    """Application factory pattern"""
    app = Flask(__name__)
    app.config.from_object(config[config_name])

    configure_logging(app)

    # SQLite ledger lives under the output root
    uri = app.config['SQLALCHEMY_DATABASE_URI']
    if uri.startswith('sqlite:///') and uri != 'sqlite:///:memory:':
        os.makedirs(os.path.dirname(uri[len('sqlite:///'):]) or '.', exist_ok=True)

    # Initialize extensions
    db.init_app(app)

    # Register blueprints
    from app.routes import runs_bp, benchmark_bp

    app.url_map.strict_slashes = False

    app.register_blueprint(runs_bp, url_prefix='/api/runs')
    app.register_blueprint(benchmark_bp, url_prefix='/api/benchmark')

    # Error handlers
    from app.utils.error_handlers import register_error_handlers
    register_error_handlers(app)

    # Command-line subcommands
    from app.cli import register_commands
    register_commands(app)

    return app
