# -*- coding: utf-8 -*-
'''
Correspondence precision of descriptors, pointmaps and attention maps.

Matches are ranked with Lowe's ratio r = 1 - D(p, q0) / D(p, q1), the top k
are kept and each is scored by the 3D distance between its two endpoints
under ground-truth geometry. Pairs are reported per relative rotation bin.

For attention maps the pseudo-distance of a key is 1 - weight, so the same
ratio ranks confident rows first.
'''

# Standard library imports
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

# Third party imports
import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

# Local imports
from . import config
from .attention import CrossViewAttention, identity_cross_view, softmax, view_slice
from .correspondence import TokenGrid, token_grid
from .dataset import conditioning
from .errors import GeometryError
from .scene import Pointmap
from .tensors import resize_bilinear
from .utils import parallel_map

log = logging.getLogger(__name__)

BINS = (
    ('0-30', 0.0, 30.0),
    ('30-60', 30.0, 60.0),
    ('60-90', 60.0, 90.0),
    ('90-120', 90.0, 120.0),
)
MAX_ANGLE = 120.0
METRICS = ('cosine', 'l2')
SOURCES = ('features', 'attention', 'pointmap', 'matches')
CHUNK = 1024


@dataclass
class MatchSet:
    '''Candidate matches from source tokens to destination tokens.

    Attributes:
        src, dst: token indices
        second: index of the second nearest destination
        ratio: Lowe ratio in [0, 1]
        distance_3d: endpoint distance in meters, filled by score_matches
    '''

    src: np.ndarray
    dst: np.ndarray
    ratio: np.ndarray
    second: Optional[np.ndarray] = None
    distance_3d: Optional[np.ndarray] = None

    def __post_init__(self):
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        self.ratio = np.asarray(self.ratio, dtype=np.float64)

    def __len__(self):
        return len(self.src)

    def take(self, index):
        '''Subset in the order of `index`.'''
        index = np.asarray(index, dtype=np.int64)
        return MatchSet(
            self.src[index], self.dst[index], self.ratio[index],
            None if self.second is None else self.second[index],
            None if self.distance_3d is None else self.distance_3d[index],
        )


@dataclass
class PrecisionReport:
    '''Precision@rho over evaluated pairs, overall and per rotation bin.'''

    overall: float
    per_bin: Dict[str, float]
    rho: float
    top_k: int
    pairs_evaluated: int
    bin_counts: Dict[str, int] = field(default_factory=dict)
    source: str = 'features'
    grid: Optional[Tuple[int, int]] = None
    ratio_mode: str = 'distance'

    def to_dict(self):
        return dict(
            overall=self.overall,
            per_bin=dict(self.per_bin),
            bin_counts=dict(self.bin_counts),
            rho=self.rho,
            top_k=self.top_k,
            pairs_evaluated=self.pairs_evaluated,
            source=self.source,
            grid=list(self.grid) if self.grid else None,
            ratio_mode=self.ratio_mode,
        )


@dataclass
class EvalPair:
    '''One view pair to evaluate.

    Geometry is a Pointmap (any resolution) or a TokenGrid per view. The
    pair carries whatever the chosen source needs: features (h x w x d
    grids), a CrossViewAttention, or precomputed matches.
    '''

    theta: float
    geom_a: object
    geom_b: object
    feat_a: Optional[np.ndarray] = None
    feat_b: Optional[np.ndarray] = None
    attention: Optional[CrossViewAttention] = None
    matches: Optional[MatchSet] = None
    pair: Tuple[int, int] = (0, 1)
    name: str = ''


def lowe_ratio(d0, d1):
    '''r = 1 - d0 / d1, with r = 0 where d1 is 0.'''

    d0 = np.asarray(d0, dtype=np.float64)
    d1 = np.asarray(d1, dtype=np.float64)
    with np.errstate(divide='ignore', invalid='ignore'):
        r = 1.0 - d0 / d1
    r = np.where(d1 > 0, r, 0.0)
    return np.clip(np.nan_to_num(r, nan=0.0), 0.0, 1.0)


def _flatten(feat):
    feat = np.asarray(feat, dtype=np.float64)
    return feat.reshape(-1, feat.shape[-1])


def _two_nearest_brute(a, b, metric):
    first = np.empty(len(a), dtype=np.int64)
    second = np.empty(len(a), dtype=np.int64)
    d0 = np.empty(len(a))
    d1 = np.empty(len(a))
    finite_b = np.all(np.isfinite(b), axis=-1)
    safe_b = np.where(finite_b[:, None], b, 0.0)
    for start in range(0, len(a), CHUNK):
        stop = start + CHUNK
        if metric == 'cosine':
            d = np.maximum(cdist(a[start:stop], safe_b, 'cosine'), 0.0)
        else:
            d = cdist(a[start:stop], safe_b, 'euclidean')
        d[:, ~finite_b] = np.inf
        d = np.nan_to_num(d, nan=np.inf)
        order = np.argsort(d, axis=1, kind='stable')[:, :2]
        rows = np.arange(len(order))
        first[start:stop] = order[:, 0]
        second[start:stop] = order[:, 1]
        d0[start:stop] = d[rows, order[:, 0]]
        d1[start:stop] = d[rows, order[:, 1]]
    return first, second, d0, d1


def _two_nearest_kdtree(a, b, metric):
    finite_b = np.flatnonzero(np.all(np.isfinite(b), axis=-1))
    points = b[finite_b]
    queries = a
    if metric == 'cosine':
        points = points / np.linalg.norm(points, axis=-1, keepdims=True)
        queries = a / np.linalg.norm(a, axis=-1, keepdims=True)
    dist, idx = cKDTree(points).query(queries, k=2)
    if metric == 'cosine':
        # |u - v|^2 = 2 - 2 cos for unit vectors
        dist = dist ** 2 / 2.0
    return finite_b[idx[:, 0]], finite_b[idx[:, 1]], dist[:, 0], dist[:, 1]


def match_descriptors(feat_a, feat_b, metric='cosine', method=None):
    '''Nearest and second nearest destination for every source token.

    Arguments:
        feat_a (ndarray): h x w x d (or n x d) source descriptors, NaN rows
            are skipped
        feat_b (ndarray): destination descriptors, NaN rows never match
        metric (str): "cosine" or "l2"
        method (str): "brute" or "kdtree"

    Returns:
        MatchSet over the valid source tokens
    '''

    if metric not in METRICS:
        raise ValueError('metric must be one of {}'.format(METRICS))
    a, b = _flatten(feat_a), _flatten(feat_b)
    if a.shape[1] != b.shape[1]:
        raise ValueError('descriptor sizes differ: {} vs {}'.format(
            a.shape[1], b.shape[1]))
    finite_b = np.all(np.isfinite(b), axis=-1)
    if finite_b.sum() < 2:
        raise ValueError('need at least 2 destination tokens')

    src = np.flatnonzero(np.all(np.isfinite(a), axis=-1))
    method = method or config.nn_method
    finder = {'brute': _two_nearest_brute, 'kdtree': _two_nearest_kdtree}.get(method)
    if finder is None:
        raise ValueError('unknown nearest neighbour method {!r}'.format(method))
    first, second, d0, d1 = finder(a[src], b, metric)
    return MatchSet(src, first, lowe_ratio(d0, d1), second)


def match_from_attention(attn, valid=None):
    '''Argmax match of every query row of a cross-view map.

    Arguments:
        attn (CrossViewAttention): row-stochastic map
        valid (ndarray): optional mask of source rows to keep

    Returns:
        MatchSet
    '''

    probs = np.asarray(attn.probs, dtype=np.float64)
    n, m = probs.shape
    dst = np.argmax(probs, axis=1)
    rows = np.arange(n)
    if m > 1:
        masked = probs.copy()
        masked[rows, dst] = -np.inf
        second = np.argmax(masked, axis=1)
        w1 = probs[rows, second]
    else:
        second = dst.copy()
        w1 = probs[rows, dst]
    ratio = lowe_ratio(1.0 - probs[rows, dst], 1.0 - w1)
    matches = MatchSet(rows, dst, ratio, second)
    if valid is not None:
        matches = matches.take(np.flatnonzero(np.asarray(valid)[rows]))
    return matches


def select_top(matches, k=None):
    '''The k matches with the highest ratio, ties broken by source index.'''

    k = config.topk if k is None else int(k)
    if k < 1:
        raise ValueError('k must be >= 1')
    order = np.lexsort((matches.src, -matches.ratio))
    return matches.take(order[:k])


def _geometry_points(geom):
    if isinstance(geom, TokenGrid):
        return geom.points
    if isinstance(geom, Pointmap):
        return np.asarray(geom.values, dtype=np.float64).reshape(-1, 3)
    return np.asarray(geom, dtype=np.float64).reshape(-1, 3)


def score_matches(matches, geom_a, geom_b, rho=None):
    '''Fraction of matches whose endpoints lie within rho meters.

    Matches touching missing geometry count as incorrect. Fills
    matches.distance_3d.
    '''

    rho = config.rho if rho is None else float(rho)
    if not rho > 0:
        raise ValueError('rho must be > 0')
    pa, pb = _geometry_points(geom_a), _geometry_points(geom_b)
    if len(matches) == 0:
        matches.distance_3d = np.zeros(0)
        return 0.0
    if (matches.src.min() < 0 or matches.src.max() >= len(pa)
            or matches.dst.min() < 0 or matches.dst.max() >= len(pb)):
        raise GeometryError('match index outside the geometry grid')
    dist = np.linalg.norm(pa[matches.src] - pb[matches.dst], axis=-1)
    matches.distance_3d = dist
    correct = np.count_nonzero(np.isfinite(dist) & (dist <= rho))
    return correct / float(len(matches))


def angle_bin(theta):
    '''Label of the rotation bin holding theta, None beyond 120 degrees.'''

    theta = float(theta)
    for label, low, high in BINS:
        if low <= theta < high or (high == MAX_ANGLE and theta == high):
            return label
    return None


def _as_grid(geom, h, w):
    if isinstance(geom, TokenGrid):
        if (geom.h, geom.w) != (h, w):
            return token_grid(Pointmap(geom.points.reshape(geom.h, geom.w, 3)), h, w)
        return geom
    if isinstance(geom, Pointmap):
        if geom.shape == (h, w):
            return TokenGrid(h, w, geom.values.reshape(-1, 3), geom.valid.reshape(-1))
        return token_grid(geom, h, w)
    raise TypeError('geometry must be a Pointmap or a TokenGrid')


def _resize_features(feat, size):
    '''Resize an h x w x d grid to size x size; tokens touching a NaN
    descriptor come out NaN.'''

    feat = np.asarray(feat, dtype=np.float64)
    valid = np.all(np.isfinite(feat), axis=-1)
    filled = np.where(valid[..., None], feat, 0.0)
    out = resize_bilinear(filled, size, size)
    coverage = resize_bilinear(valid.astype(np.float64), size, size)
    out[coverage < 1.0] = np.nan
    return out


def pair_matches(pair, source='features', metric='cosine', resize_grid=None,
                 method=None):
    '''Candidate matches of one pair and the token grids they index.

    Returns:
        (MatchSet, grid_a, grid_b)
    '''

    if source not in SOURCES:
        raise ValueError('source must be one of {}'.format(SOURCES))

    if source == 'attention':
        if pair.attention is None:
            raise ValueError('pair carries no attention map')
        n = pair.attention.probs.shape[0]
        h = w = int(round(math.sqrt(n)))
        if isinstance(pair.geom_a, TokenGrid):
            h, w = pair.geom_a.h, pair.geom_a.w
        grid_a, grid_b = _as_grid(pair.geom_a, h, w), _as_grid(pair.geom_b, h, w)
        return match_from_attention(pair.attention), grid_a, grid_b

    if source == 'matches':
        if pair.matches is None:
            raise ValueError('pair carries no matches')
        grid_a = _as_grid(pair.geom_a, *_shape_of(pair.geom_a))
        grid_b = _as_grid(pair.geom_b, *_shape_of(pair.geom_b))
        return pair.matches, grid_a, grid_b

    if source == 'pointmap':
        base = _as_grid(pair.geom_a, *_shape_of(pair.geom_a))
        other = _as_grid(pair.geom_b, *_shape_of(pair.geom_b))
        feat_a = base.points.reshape(base.h, base.w, 3)
        feat_b = other.points.reshape(other.h, other.w, 3)
        metric = 'l2'
    else:
        if pair.feat_a is None or pair.feat_b is None:
            raise ValueError('pair carries no features')
        feat_a, feat_b = pair.feat_a, pair.feat_b

    if resize_grid:
        feat_a = _resize_features(feat_a, resize_grid)
        feat_b = _resize_features(feat_b, resize_grid)
    h, w = np.shape(feat_a)[:2]
    grid_a, grid_b = _as_grid(pair.geom_a, h, w), _as_grid(pair.geom_b, h, w)
    matches = match_descriptors(feat_a, feat_b, metric, method)
    return matches, grid_a, grid_b


def _shape_of(geom):
    if isinstance(geom, TokenGrid):
        return geom.h, geom.w
    return geom.shape


def evaluate_pair(pair, source='features', metric='cosine', k=None, rho=None,
                  resize_grid=None, method=None):
    '''Precision of one pair after ratio ranking and top-k selection.

    Candidates whose source token has no ground-truth geometry cannot be
    scored and are dropped before ranking.
    '''

    matches, grid_a, grid_b = pair_matches(
        pair, source, metric, resize_grid, method)
    if len(matches):
        keep = np.asarray(grid_a.valid)[matches.src]
        matches = matches.take(np.flatnonzero(keep))
    top = select_top(matches, k)
    return score_matches(top, grid_a, grid_b, rho), (grid_a.h, grid_a.w)


def _mean(values):
    return math.fsum(values) / len(values)


def evaluate_pairs(pairs, source='features', metric='cosine', k=None, rho=None,
                   resize_grid=None, method=None, threads=None):
    '''Precision@rho averaged over pairs and per 30 degree rotation bin.

    Pairs beyond 120 degrees are excluded.

    Returns:
        PrecisionReport
    '''

    pairs = list(pairs)
    if not pairs:
        raise ValueError('no pairs to evaluate')
    k = config.topk if k is None else int(k)
    rho = config.rho if rho is None else float(rho)

    kept = [p for p in pairs if angle_bin(p.theta) is not None]
    if len(kept) < len(pairs):
        log.debug('Excluded %d pairs beyond %d degrees',
                  len(pairs) - len(kept), MAX_ANGLE)

    def evaluate(pair):
        return evaluate_pair(pair, source, metric, k, rho, resize_grid, method)

    results = parallel_map(evaluate, kept, threads)
    per_bin = {}
    bin_counts = {}
    for label, _, _ in BINS:
        values = [
            r[0] for p, r in zip(kept, results) if angle_bin(p.theta) == label
        ]
        if values:
            per_bin[label] = _mean(values)
            bin_counts[label] = len(values)

    overall = _mean([r[0] for r in results]) if results else 0.0
    grid = results[0][1] if results else None
    return PrecisionReport(
        overall=overall,
        per_bin=per_bin,
        rho=rho,
        top_k=k,
        pairs_evaluated=len(kept),
        bin_counts=bin_counts,
        source=source,
        grid=grid,
        ratio_mode='attention' if source == 'attention' else 'distance',
    )


def layer_maps(model, data, layer, params=None, t=0, drop_cond=True,
               perturb=False):
    '''Cross-view maps of one block on the clean latents of a scene.

    View 0 is flagged as the target and the others as references. The
    supervised block of an "mlp" model is read through its projection head;
    other blocks use the softmax over view j of the head-mean logits. A
    perturbed block mixes no information across views; its maps are scored
    as eye(h*w), each token matched to its own position.

    Returns:
        dict mapping (i, j) to CrossViewAttention
    '''

    params = params or model.params
    c = model.config
    F, n = c.views, c.tokens_per_view
    if perturb:
        return {
            (i, j): identity_cross_view(i, j, n)
            for i in range(F) for j in range(F) if i != j
        }

    reference = np.arange(F) != 0
    cond = conditioning(data.plucker, reference, drop=drop_cond)
    _, cache = model.forward(data.latents, cond, t, params)
    if layer == c.supervised_layer and (c.head_mode == 'mlp' or c.target == 'cost'):
        return {
            entry.attention.pair: entry.attention
            for entry in model.supervised_maps(cache, params)
        }

    logits = cache['blocks'][layer]['attn'].logits.mean(axis=0)
    maps = {}
    for i in range(F):
        for j in range(F):
            if i == j:
                continue
            z = logits[view_slice(i, n), view_slice(j, n)]
            maps[(i, j)] = CrossViewAttention((i, j), softmax(z), z)
    return maps


def attention_pairs(model, dataset, layer=None, params=None, t=0,
                    drop_cond=True, perturb=False):
    '''EvalPairs of one block over every scene and ordered view pair.'''

    layer = model.config.supervised_layer if layer is None else layer
    pairs = []
    for data in dataset:
        maps = layer_maps(model, data, layer, params, t, drop_cond, perturb)
        for (i, j), attn in sorted(maps.items()):
            pairs.append(EvalPair(
                theta=data.thetas[(i, j)], geom_a=data.grids[i],
                geom_b=data.grids[j], attention=attn, pair=(i, j),
                name=data.name,
            ))
    return pairs


def attention_precision(model, dataset, layer=None, params=None, k=None,
                        rho=None, t=0, drop_cond=True, perturb=False):
    '''PrecisionReport of one block's attention correspondence.'''

    pairs = attention_pairs(model, dataset, layer, params, t, drop_cond, perturb)
    return evaluate_pairs(pairs, 'attention', k=k, rho=rho, threads=1)


def layer_sweep(model, dataset, params=None, k=None, rho=None, t=0,
                drop_cond=True):
    '''Attention correspondence precision of every block.

    Returns:
        list of PrecisionReport, one per block
    '''

    reports = []
    for layer in range(model.config.blocks):
        report = attention_precision(
            model, dataset, layer, params, k, rho, t, drop_cond)
        log.info('Block %d precision %.4f', layer, report.overall)
        reports.append(report)
    return reports


def self_match_precision(dataset, k=None, rho=None):
    '''Precision of matching every token to its own position in the other
    view, the floor reached under identity perturbation.'''

    pairs = []
    for data in dataset:
        n = data.grids[0].size
        for (i, j) in sorted(data.thetas):
            pairs.append(EvalPair(
                theta=data.thetas[(i, j)], geom_a=data.grids[i],
                geom_b=data.grids[j],
                attention=identity_cross_view(i, j, n), pair=(i, j),
            ))
    return evaluate_pairs(pairs, 'attention', k=k, rho=rho, threads=1)
