# -*- coding: utf-8 -*-
import os
import shutil
import tempfile
from contextlib import contextmanager

import numpy as np

SLOW = os.getenv('CAMEO_SLOW_TESTS', '0') == '1'


@contextmanager
def temp_dir():
    '''Temporary folder removed after the block.'''

    path = tempfile.mkdtemp(prefix='cameo_test_')
    try:
        yield path
    finally:
        shutil.rmtree(path, ignore_errors=True)


def sphere_scene(radius=1.0, angle_deg=60.0, res=64, distance=3.0):
    '''One sphere at the origin seen by two cameras angle_deg apart.'''

    from cameo.scene import Camera, Scene, Sphere

    cams = []
    for az in (0.0, angle_deg):
        a = np.radians(az)
        eye = (distance * np.sin(a), 0.0, distance * np.cos(a))
        cams.append(Camera.look_at(eye, (0, 0, 0), width=res, height=res))
    return Scene([Sphere((0, 0, 0), radius)], cams, name='sphere')


def numeric_gradient(fn, array, index, step=1e-5):
    '''Central difference of scalar fn() w.r.t. array[index], in place.'''

    original = array[index]
    array[index] = original + step
    plus = fn()
    array[index] = original - step
    minus = fn()
    array[index] = original
    return (plus - minus) / (2.0 * step)


def relative_error(a, b, floor=1e-3):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def sample_indices(shape, rng, count=6):
    '''A few distinct flat positions of an array, as index tuples.'''

    size = int(np.prod(shape))
    flat = rng.choice(size, size=min(count, size), replace=False)
    return [np.unravel_index(int(i), shape) for i in flat]
