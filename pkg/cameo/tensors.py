# -*- coding: utf-8 -*-
'''
TensorFile container, seeded random streams and grid resampling.

TensorFile layout, all little-endian::

    magic       4 bytes   b'CAMT'
    version     uint32
    dtype_code  uint8     0 float32, 1 float64, 2 uint8
    rank        uint8
    dims        rank x uint64
    payload     row-major values
'''

# Standard library imports
import logging
import struct

# Third party imports
import numpy as np

# Local imports
from .errors import (
    BadMagicError,
    TensorFileError,
    TruncatedPayloadError,
    UnsupportedDtypeError,
    VersionMismatchError,
)

log = logging.getLogger(__name__)

MAGIC = b'CAMT'
VERSION = 1
HEADER = struct.Struct('<4sIBB')
DTYPE_CODES = {
    np.dtype('<f4'): 0,
    np.dtype('<f8'): 1,
    np.dtype('u1'): 2,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


def encode_tensor(t):
    '''Encode an array as TensorFile bytes.'''

    t = np.asarray(t)
    dtype = t.dtype.newbyteorder('<')
    if dtype not in DTYPE_CODES:
        raise UnsupportedDtypeError(
            'dtype {} is not one of float32, float64, uint8'.format(t.dtype)
        )
    if t.ndim < 1:
        raise ValueError('TensorFile needs rank >= 1, got a scalar')
    if t.ndim > 255:
        raise ValueError('rank {} does not fit the header'.format(t.ndim))
    if any(d < 1 for d in t.shape):
        raise ValueError('all dims must be >= 1, got {}'.format(t.shape))

    header = HEADER.pack(MAGIC, VERSION, DTYPE_CODES[dtype], t.ndim)
    dims = struct.pack('<{}Q'.format(t.ndim), *t.shape)
    payload = np.ascontiguousarray(t, dtype=dtype).tobytes(order='C')
    return header + dims + payload


def decode_tensor(data):
    '''Decode TensorFile bytes into a new array.'''

    if len(data) < HEADER.size:
        if data[:len(MAGIC)] != MAGIC[:len(data)]:
            raise BadMagicError('bad magic {!r}'.format(bytes(data[:4])))
        raise TruncatedPayloadError('file shorter than the header')

    magic, version, code, rank = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError('bad magic {!r}'.format(magic))
    if version != VERSION:
        raise VersionMismatchError(
            'version {} is not supported (expected {})'.format(version, VERSION)
        )
    if code not in CODE_DTYPES:
        raise UnsupportedDtypeError('unknown dtype code {}'.format(code))
    if rank < 1:
        raise TensorFileError('rank must be >= 1')

    offset = HEADER.size
    dims_size = 8 * rank
    if len(data) < offset + dims_size:
        raise TruncatedPayloadError('file ends inside the dims block')
    dims = struct.unpack_from('<{}Q'.format(rank), data, offset)
    offset += dims_size

    dtype = CODE_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.uint64)) * dtype.itemsize
    available = len(data) - offset
    if available < expected:
        raise TruncatedPayloadError(
            'payload has {} bytes, dims {} need {}'.format(
                available, dims, expected
            )
        )
    if available > expected:
        raise TensorFileError(
            '{} trailing bytes after payload'.format(available - expected)
        )

    values = np.frombuffer(data, dtype=dtype, count=expected // dtype.itemsize,
                           offset=offset)
    return values.reshape(dims).astype(dtype.newbyteorder('='), copy=True)


def save_tensor(path, t):
    '''Save an array as a TensorFile.

    Arguments:
        path (str): Output file path
        t (ndarray): float32, float64 or uint8 array with rank >= 1
    '''

    encoded = encode_tensor(t)
    with open(path, 'wb') as f:
        f.write(encoded)


def load_tensor(path):
    '''Load a TensorFile saved by save_tensor.'''

    with open(path, 'rb') as f:
        data = f.read()
    try:
        return decode_tensor(data)
    except TensorFileError as e:
        log.debug('Failed to decode %s: %s', path, e)
        raise


def make_rng(seed=0, *keys):
    '''Philox generator for a seed and optional integer stream keys.

    The same (seed, keys) always yields the same stream on every platform.
    Keys split independent streams off one run seed, eg. make_rng(seed, 3)
    for the fourth scene.
    '''

    entropy = [int(seed)] + [int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def bilinear_taps(n_in, n_out):
    '''Source taps for resampling an axis of n_in samples to n_out.

    Uses the align-corners-false convention: output sample k has its centre
    at source coordinate (k + 0.5) * n_in / n_out - 0.5, clamped to the
    source range.

    Returns:
        (i0, i1, w): integer taps and the weight of i1 for every output
        sample.
    '''

    if n_in < 1 or n_out < 1:
        raise ValueError('sizes must be >= 1, got {} -> {}'.format(n_in, n_out))
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = pos - i0
    w[i1 == i0] = 0.0
    return i0, i1, w


def resize_bilinear(src, out_h, out_w):
    '''Bilinear resize of an H x W (x C) grid to out_h x out_w (x C).

    Constant grids stay exactly constant, same-shape resizes are the
    identity and values never leave [min(src), max(src)]. Inputs must be
    finite.
    '''

    src = np.asarray(src)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[..., None]
    if src.ndim != 3:
        raise ValueError('expected an H x W x C grid, got {}'.format(src.shape))
    h, w = src.shape[:2]
    if (h, w) == (out_h, out_w):
        out = src.copy()
        return out[..., 0] if squeeze else out

    dtype = src.dtype if src.dtype.kind == 'f' else np.float64
    grid = src.astype(dtype, copy=False)
    y0, y1, wy = bilinear_taps(h, out_h)
    x0, x1, wx = bilinear_taps(w, out_w)
    wy = wy.astype(dtype)[:, None, None]
    wx = wx.astype(dtype)[None, :, None]

    top = grid[y0]
    rows = top + wy * (grid[y1] - top)
    left = rows[:, x0]
    out = left + wx * (rows[:, x1] - left)
    out = np.clip(out, grid.min(), grid.max())
    return out[..., 0] if squeeze else out
