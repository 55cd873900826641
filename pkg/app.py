import sys

from config.app_config import apply_thread_limits

# thread caps must be exported before numpy is first imported
apply_thread_limits()

import logging

from config.logging_config import setup_logging
from ui.cli import main

setup_logging()
logger = logging.getLogger(__name__)


if __name__ == '__main__':
    sys.exit(main())
