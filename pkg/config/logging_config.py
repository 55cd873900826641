import logging
from pathlib import Path

from config.app_config import LVA_LOG_DIR, LVA_LOG_LEVEL

# Logging configuration; console goes to stderr so stdout stays data-only
LOGGING_CONFIG = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'detailed': {
            'format': '[%(asctime)s] %(levelname)s [%(name)s:%(lineno)s] %(message)s',
            'datefmt': '%Y-%m-%d %H:%M:%S'
        },
        'simple': {
            'format': '%(levelname)s - %(message)s'
        }
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'level': LVA_LOG_LEVEL,
            'formatter': 'simple',
            'stream': 'ext://sys.stderr'
        }
    },
    'loggers': {
        '': {  # Root logger
            'handlers': ['console'],
            'level': 'DEBUG',
            'propagate': True
        }
    }
}


def _file_handlers(logs_dir: Path) -> dict:
    """Rotating file handlers for the full log and the error log."""
    return {
        'file': {
            'class': 'logging.handlers.RotatingFileHandler',
            'level': 'DEBUG',
            'formatter': 'detailed',
            'filename': logs_dir / 'lva.log',
            'maxBytes': 10485760,  # 10MB
            'backupCount': 5
        },
        'error_file': {
            'class': 'logging.handlers.RotatingFileHandler',
            'level': 'ERROR',
            'formatter': 'detailed',
            'filename': logs_dir / 'error.log',
            'maxBytes': 10485760,  # 10MB
            'backupCount': 5
        }
    }


def setup_logging(verbose: bool = False) -> logging.Logger:
    """
    Setup logging configuration.

    Args:
        verbose: Lower the console level to DEBUG

    Returns:
        logging.Logger: Configured logger instance
    """
    from copy import deepcopy
    from logging.config import dictConfig

    config = deepcopy(LOGGING_CONFIG)
    if verbose:
        config['handlers']['console']['level'] = 'DEBUG'

    if LVA_LOG_DIR:
        logs_dir = Path(LVA_LOG_DIR)
        logs_dir.mkdir(parents=True, exist_ok=True)
        config['handlers'].update(_file_handlers(logs_dir))
        config['loggers']['']['handlers'] += ['file', 'error_file']

    dictConfig(config)
    return logging.getLogger(__name__)
