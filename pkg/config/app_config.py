"""Application configuration read from the environment."""

import os

# Cap on BLAS/OpenMP worker threads; empty means library default
LVA_THREADS = os.getenv('LVA_THREADS', '').strip()

# Console log level
LVA_LOG_LEVEL = os.getenv('LVA_LOG_LEVEL', 'INFO').upper()

# Directory for rotating log files; empty disables file logging
LVA_LOG_DIR = os.getenv('LVA_LOG_DIR', '').rstrip('/')

THREAD_ENV_VARS = (
    'OMP_NUM_THREADS',
    'OPENBLAS_NUM_THREADS',
    'MKL_NUM_THREADS',
    'BLIS_NUM_THREADS',
)


def get_thread_limit() -> int | None:
    """
    Get the configured thread cap.

    Returns:
        The positive thread count from LVA_THREADS, or None if unset
    """
    if not LVA_THREADS:
        return None
    try:
        threads = int(LVA_THREADS)
    except ValueError:
        return None
    return threads if threads > 0 else None


def apply_thread_limits() -> None:
    """
    Export the thread cap to the numeric libraries.

    Must run before numpy is first imported; variables the user already set
    are left alone.
    """
    threads = get_thread_limit()
    if threads is None:
        return
    for name in THREAD_ENV_VARS:
        os.environ.setdefault(name, str(threads))
