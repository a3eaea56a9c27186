# -*- coding: utf-8 -*-

# Standard library imports
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager

# Third party imports
import numpy as np
from tqdm import tqdm

# Local imports
from . import config


LOG_FORMAT = 'cameo| %(levelname)s %(name)s: %(message)s'


def setup_logging(level=None):
    '''Install the cameo stream handler on the package logger.'''

    logger = logging.getLogger('cameo')
    level = level or config.log_level
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)
    if not any(getattr(h, '_cameo', False) for h in logger.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._cameo = True
        logger.addHandler(handler)
    logger.setLevel(level)
    return logger


def progress(iterable, **kwargs):
    '''tqdm progress bar, silent unless stderr is a terminal and INFO
    logging is enabled.'''

    quiet = not logging.getLogger('cameo').isEnabledFor(logging.INFO)
    kwargs.setdefault('disable', quiet or not sys.stderr.isatty())
    kwargs.setdefault('leave', False)
    return tqdm(iterable, **kwargs)


def float_dtype(precision=None):
    '''numpy float dtype for a precision in bits (32 or 64).'''

    precision = precision or config.precision
    if int(precision) == 32:
        return np.float32
    if int(precision) == 64:
        return np.float64
    raise ValueError('precision must be 32 or 64, got {}'.format(precision))


def get_threads():
    '''Thread cap, CAMEO_THREADS wins over the configured value.'''

    env = os.getenv('CAMEO_THREADS')
    if env:
        return max(1, int(env))
    return max(1, int(config.threads))


def parallel_map(fn, items, threads=None):
    '''Ordered map over items using at most `threads` worker threads.'''

    items = list(items)
    threads = threads or get_threads()
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=min(threads, len(items))) as pool:
        return list(pool.map(fn, items))


@contextmanager
def output_dir(path):
    '''Create `path` and remove it again if the body raises. Existing
    directories are left in place.'''

    made_dir = False
    if not os.path.exists(path):
        os.makedirs(path)
        made_dir = True
    try:
        yield path
    except BaseException:
        if made_dir:
            shutil.rmtree(path, ignore_errors=True)
        raise


def dump_json(data, path):
    '''Write JSON with sorted keys so reruns are byte-identical.'''

    encoded = json.dumps(data, indent=2, sort_keys=True, default=_jsonable)
    with open(path, 'w') as f:
        f.write(encoded + '\n')


def load_json(path):
    with open(path, 'r') as f:
        return json.load(f)


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError('{!r} is not JSON serializable'.format(value))


def format_float(value):
    '''Stable text form for floats written to CSV files.'''

    if value is None:
        return ''
    value = float(value)
    if np.isnan(value):
        return 'nan'
    return '{:.9g}'.format(value)
