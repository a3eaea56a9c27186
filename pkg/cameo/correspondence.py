# -*- coding: utf-8 -*-
'''
Token-level geometric correspondence from pointmaps.

Matches are 3D nearest neighbours between token centres of two views. A
query token is kept (mask 1) when the round trip i -> j -> i lands within
`tau` token units of where it started.
'''

# Standard library imports
import logging
import math
from dataclasses import dataclass, field
from typing import Tuple

# Third party imports
import numpy as np
from scipy.spatial import cKDTree

# Local imports
from . import config
from .errors import GeometryError
from .tensors import bilinear_taps, resize_bilinear
from .utils import parallel_map

log = logging.getLogger(__name__)

CHUNK = 256


@dataclass
class TokenGrid:
    '''World coordinates at token centres of one view.'''

    h: int
    w: int
    points: np.ndarray
    valid: np.ndarray

    @property
    def size(self):
        return self.h * self.w

    def coords(self, index):
        '''(row, col) token coordinates of flat indices.'''
        index = np.asarray(index)
        return np.stack([index // self.w, index % self.w], axis=-1)


@dataclass
class TokenCorrespondence:
    '''Matches and visibility mask of view pair (i, j).'''

    pair: Tuple[int, int]
    match: np.ndarray
    mask: np.ndarray
    tau: float
    h: int
    w: int
    cycle_error: np.ndarray = field(default=None, repr=False)

    @property
    def size(self):
        return self.h * self.w

    @property
    def onehot(self):
        '''(h*w) x (h*w) uint8 matrix P with a single 1 per row.'''
        P = np.zeros((self.size, self.size), dtype=np.uint8)
        P[np.arange(self.size), self.match] = 1
        return P

    @property
    def coverage(self):
        return float(self.mask.mean()) if self.size else 0.0


def token_grid(pm, h, w):
    '''Resample a Pointmap to an h x w token grid.

    A token is valid only when every pixel contributing to its bilinear
    sample is valid; invalid tokens carry NaN points.
    '''

    values = np.asarray(pm.values, dtype=np.float64)
    H, W = values.shape[:2]
    if h > H or w > W:
        raise ValueError(
            'token grid {}x{} larger than pointmap {}x{}'.format(h, w, H, W)
        )
    valid = np.all(np.isfinite(values), axis=-1)
    filled = np.where(valid[..., None], values, 0.0)
    points = resize_bilinear(filled, h, w) if (h, w) != (H, W) else filled.copy()

    y0, y1, wy = bilinear_taps(H, h)
    x0, x1, wx = bilinear_taps(W, w)
    rows0 = valid[y0] & (valid[y1] | (wy == 0)[:, None])
    token_valid = rows0[:, x0] & (rows0[:, x1] | (wx == 0)[None, :])

    points = points.reshape(-1, 3).copy()
    token_valid = token_valid.reshape(-1)
    points[~token_valid] = np.nan
    return TokenGrid(h, w, points, token_valid)


def _distances(query, points):
    return np.sqrt(np.sum((query[:, None, :] - points[None, :, :]) ** 2, axis=-1))


def _nearest_brute(queries, points):
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries), dtype=np.float64)
    for start in range(0, len(queries), CHUNK):
        d = _distances(queries[start:start + CHUNK], points)
        best = np.argmin(d, axis=1)
        idx[start:start + CHUNK] = best
        dist[start:start + CHUNK] = d[np.arange(len(best)), best]
    return idx, dist


def _nearest_kdtree(queries, points):
    '''Exact nearest neighbours via cKDTree, with the brute-force distance
    formula and smallest-index tie breaking.'''

    tree = cKDTree(points)
    approx, _ = tree.query(queries, k=1)
    idx = np.empty(len(queries), dtype=np.int64)
    dist = np.empty(len(queries), dtype=np.float64)
    for n, (q, r) in enumerate(zip(queries, approx)):
        radius = r * (1.0 + 1e-9) + 1e-12
        cand = np.sort(np.asarray(tree.query_ball_point(q, radius), dtype=np.int64))
        d = np.sqrt(np.sum((points[cand] - q) ** 2, axis=-1))
        best = int(np.argmin(d))
        idx[n] = cand[best]
        dist[n] = d[best]
    return idx, dist


def nearest_neighbors(src_points, src_valid, dst_points, dst_valid,
                      method=None):
    '''Nearest valid dst point for every src point.

    Invalid src entries get index 0 and distance inf.

    Returns:
        (index, distance) arrays over src
    '''

    method = method or config.nn_method
    dst_index = np.flatnonzero(dst_valid)
    if not len(dst_index):
        raise GeometryError('destination has no valid tokens')
    idx = np.zeros(len(src_points), dtype=np.int64)
    dist = np.full(len(src_points), np.inf)
    queries = np.flatnonzero(src_valid)
    if not len(queries):
        return idx, dist

    finder = {'brute': _nearest_brute, 'kdtree': _nearest_kdtree}.get(method)
    if finder is None:
        raise ValueError('unknown nearest neighbour method {!r}'.format(method))
    local, d = finder(src_points[queries], dst_points[dst_index])
    idx[queries] = dst_index[local]
    dist[queries] = d
    return idx, dist


def nearest_in_3d(src, dst, query):
    '''Nearest valid token of `dst` to token `query` of `src`.

    Returns:
        (index, distance)
    '''

    if not src.valid[query]:
        raise GeometryError('query token {} is not valid'.format(query))
    idx, dist = nearest_neighbors(
        src.points[query:query + 1], src.valid[query:query + 1],
        dst.points, dst.valid, method='brute',
    )
    return int(idx[0]), float(dist[0])


def build_correspondence(grid_i, grid_j, tau=None, pair=(0, 1), method=None):
    '''Token correspondence of view i into view j with a cycle mask.

    Arguments:
        grid_i (TokenGrid): query view
        grid_j (TokenGrid): target view
        tau (float): cycle threshold in token units, math.inf disables it
        pair (tuple): (i, j) view indices recorded on the result

    Returns:
        TokenCorrespondence
    '''

    tau = config.tau if tau is None else float(tau)
    if (grid_i.h, grid_i.w) != (grid_j.h, grid_j.w):
        raise ValueError('token grids must share (h, w)')
    if not (tau >= 0):
        raise ValueError('tau must be >= 0, got {}'.format(tau))
    if pair[0] == pair[1]:
        raise ValueError('self pairs are not supervised')

    n = grid_i.size
    if not grid_i.valid.any() or not grid_j.valid.any():
        return TokenCorrespondence(
            pair=tuple(pair), match=np.zeros(n, dtype=np.int64),
            mask=np.zeros(n, dtype=np.uint8), tau=tau,
            h=grid_i.h, w=grid_i.w, cycle_error=np.full(n, np.inf),
        )

    forward, _ = nearest_neighbors(
        grid_i.points, grid_i.valid, grid_j.points, grid_j.valid, method)
    backward, _ = nearest_neighbors(
        grid_j.points, grid_j.valid, grid_i.points, grid_i.valid, method)
    cycle = backward[forward]
    offset = grid_i.coords(np.arange(n)) - grid_i.coords(cycle)
    error = np.sqrt(np.sum(offset.astype(np.float64) ** 2, axis=-1))
    error[~grid_i.valid] = np.inf
    mask = grid_i.valid & (error <= tau)
    return TokenCorrespondence(
        pair=tuple(pair), match=forward, mask=mask.astype(np.uint8), tau=tau,
        h=grid_i.h, w=grid_i.w, cycle_error=error,
    )


def mutual_nn_pixels(pm_i, pm_j, method='kdtree'):
    '''Pixel pairs that are each other's 3D nearest neighbour.

    Returns:
        K x 2 array of flat pixel indices (pixel_i, pixel_j)
    '''

    pts_i = pm_i.values.reshape(-1, 3)
    pts_j = pm_j.values.reshape(-1, 3)
    valid_i = pm_i.valid.reshape(-1)
    valid_j = pm_j.valid.reshape(-1)
    if not valid_i.any() or not valid_j.any():
        return np.zeros((0, 2), dtype=np.int64)
    forward, _ = nearest_neighbors(pts_i, valid_i, pts_j, valid_j, method)
    backward, _ = nearest_neighbors(pts_j, valid_j, pts_i, valid_i, method)
    src = np.flatnonzero(valid_i)
    keep = backward[forward[src]] == src
    return np.stack([src[keep], forward[src[keep]]], axis=-1)


def correspondence_set(grids, tau=None, method=None, threads=None):
    '''Correspondences for every ordered pair i != j of the views.'''

    if len(grids) < 2:
        raise ValueError('need at least two views')
    pairs = [
        (i, j) for i in range(len(grids)) for j in range(len(grids)) if i != j
    ]

    def build(pair):
        i, j = pair
        return build_correspondence(grids[i], grids[j], tau, pair, method)

    corrs = parallel_map(build, pairs, threads)
    log.debug('Built %d correspondences, mean coverage %.3f',
              len(corrs), mask_coverage(corrs))
    return corrs


def mask_coverage(corrs):
    '''Mean fraction of tokens with mask 1 over a correspondence set.'''

    if not corrs:
        return 0.0
    return float(np.mean([c.coverage for c in corrs]))


def project_correspondence(grid_i, cam_j, depth_j, tol=0.02):
    '''Analytic correspondence by projecting view i's token points into view
    j and checking them against view j's rendered depth.

    Arguments:
        grid_i (TokenGrid): token points of view i
        cam_j (Camera): camera of view j at any resolution
        depth_j (ndarray): H x W depth of view j, see scene.render_depth
        tol (float): relative depth tolerance for visibility

    Returns:
        (match, visible): nearest token of view j and visibility per token
    '''

    h, w = grid_i.h, grid_i.w
    H, W = depth_j.shape
    cam = cam_j.scaled((H, W))
    uv, depth = cam.project(np.nan_to_num(grid_i.points))
    inside = (
        grid_i.valid & (depth > 0)
        & (uv[:, 0] > -0.5) & (uv[:, 0] < W - 0.5)
        & (uv[:, 1] > -0.5) & (uv[:, 1] < H - 0.5)
    )
    px = np.clip(np.round(uv[:, 0]).astype(np.int64), 0, W - 1)
    py = np.clip(np.round(uv[:, 1]).astype(np.int64), 0, H - 1)
    surface = depth_j[py, px]
    visible = inside & np.isfinite(surface) & (
        np.abs(surface - depth) <= tol * np.maximum(depth, 1e-9))

    # pixel centre -> token coordinate under the align-corners-false mapping
    col = (uv[:, 0] + 0.5) * (w / float(W)) - 0.5
    row = (uv[:, 1] + 0.5) * (h / float(H)) - 0.5
    col = np.clip(np.round(col), 0, w - 1).astype(np.int64)
    row = np.clip(np.round(row), 0, h - 1).astype(np.int64)
    match = np.where(visible, row * w + col, 0)
    return match, visible
