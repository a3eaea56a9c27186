# -*- coding: utf-8 -*-
'''
Toy multi-view denoiser.

Token latents of all views are embedded, conditioned on per-token Plücker
rays plus a reference-view flag, and passed through a stack of blocks, each
a 3D self-attention layer followed by a tanh feed-forward layer with
residual connections. Every layer has an exact manual backward pass.
'''

# Standard library imports
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

# Third party imports
import numpy as np

# Local imports
from .attention import (
    AttentionConfig,
    CrossViewAttention,
    ProjectionHead,
    attention_backward,
    attention_forward,
    cost_logits,
    cost_logits_backward,
    init_attention_params,
    project_and_normalize,
    softmax,
    view_slice,
)
from .errors import ConfigError, MissingCacheError

log = logging.getLogger(__name__)

COND_CHANNELS = 7
HEAD_MODES = ('mlp', 'none')
TARGETS = ('attention', 'cost')


@dataclass
class ModelConfig:
    '''Shape of the toy denoiser.

    supervised_layer defaults to the penultimate block (or block 0 for a
    single block).
    '''

    views: int = 2
    h: int = 16
    w: int = 16
    channels: int = 4
    d: int = 32
    heads: int = 4
    blocks: int = 2
    ff: int = 64
    supervised_layer: int = -1
    head_mode: str = 'mlp'
    target: str = 'attention'
    T: int = 1000

    def __post_init__(self):
        if self.supervised_layer < 0:
            self.supervised_layer = max(0, self.blocks - 2)
        if not 0 <= self.supervised_layer < self.blocks:
            raise ConfigError('supervised_layer {} outside {} blocks'.format(
                self.supervised_layer, self.blocks))
        if self.head_mode not in HEAD_MODES:
            raise ConfigError('head_mode must be one of {}'.format(HEAD_MODES))
        if self.target not in TARGETS:
            raise ConfigError('target must be one of {}'.format(TARGETS))
        try:
            AttentionConfig(self.views, self.h, self.w, self.d, self.heads)
        except ValueError as e:
            raise ConfigError(str(e))

    @property
    def tokens_per_view(self):
        return self.h * self.w

    def attention_config(self, layer=0):
        return AttentionConfig(self.views, self.h, self.w, self.d, self.heads,
                               layer_id=layer)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


def timestep_embedding(t, dim, dtype=np.float64):
    '''Sinusoidal embedding of a (scalar) diffusion step.'''

    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = float(t) * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb.astype(dtype)


def block_prefix(index):
    return 'blocks.{}.'.format(index)


def sub_params(params, prefix):
    '''View of the parameters under `prefix`, with the prefix removed.'''

    return {
        name[len(prefix):]: value
        for name, value in params.items() if name.startswith(prefix)
    }


class ToyDenoiser(object):
    '''eps_theta over F x (h*w) x c token latents.

    Arguments:
        config (ModelConfig): model shape
        rng (numpy.random.Generator): initialization stream
        dtype: float32 or float64
    '''

    def __init__(self, config, rng=None, dtype=np.float64):
        self.config = config
        self.dtype = dtype
        self.head = ProjectionHead(config.heads, dtype=dtype)
        if rng is not None:
            self.params = self.init_params(rng)
        else:
            self.params = {}

    def init_params(self, rng):
        c = self.config
        dt = self.dtype

        def normal(*shape, fan_in):
            return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape).astype(dt)

        params = {
            'embed.W': normal(c.channels, c.d, fan_in=c.channels),
            'embed.b': np.zeros(c.d, dtype=dt),
            'cond.W': normal(COND_CHANNELS, c.d, fan_in=COND_CHANNELS),
            'out.W': normal(c.d, c.channels, fan_in=c.d) * 0.1,
            'out.b': np.zeros(c.channels, dtype=dt),
        }
        for b in range(c.blocks):
            prefix = block_prefix(b)
            attn = init_attention_params(c.attention_config(b), rng, dt)
            for name, value in attn.items():
                params[prefix + 'attn.' + name] = value
            params[prefix + 'time.W'] = normal(c.d, c.d, fan_in=c.d)
            params[prefix + 'time.b'] = np.zeros(c.d, dtype=dt)
            params[prefix + 'ff.W1'] = normal(c.d, c.ff, fan_in=c.d)
            params[prefix + 'ff.b1'] = np.zeros(c.ff, dtype=dt)
            params[prefix + 'ff.W2'] = normal(c.ff, c.d, fan_in=c.ff) * 0.5
            params[prefix + 'ff.b2'] = np.zeros(c.d, dtype=dt)

        if c.head_mode == 'mlp':
            head = ProjectionHead(c.heads, rng=rng, dtype=dt)
            for name, value in head.params.items():
                params['head.' + name] = value
        return params

    def head_params(self, params=None):
        return sub_params(params or self.params, 'head.')

    def forward(self, x_t, cond, t, params=None, perturb=()):
        '''Predict the noise of every token.

        Arguments:
            x_t (ndarray): F x (h*w) x c noisy latents
            cond (ndarray): F x (h*w) x 7 Plücker rays + reference flag
            t (int): diffusion step
            params (dict): parameters, defaults to self.params
            perturb (iterable): block indices whose attention is replaced
                by the identity

        Returns:
            (eps_hat, cache)
        '''

        params = params or self.params
        c = self.config
        x_t = np.asarray(x_t, dtype=self.dtype)
        cond = np.asarray(cond, dtype=self.dtype)
        F, n, ch = x_t.shape
        if (F, n, ch) != (c.views, c.tokens_per_view, c.channels):
            raise ValueError('latent shape {} does not match the model'.format(
                x_t.shape))
        if cond.shape != (F, n, COND_CHANNELS):
            raise ValueError('cond shape {} does not match the model'.format(
                cond.shape))

        x = x_t.reshape(F * n, ch)
        cnd = cond.reshape(F * n, COND_CHANNELS)
        temb = timestep_embedding(t, c.d, self.dtype)
        hidden = x @ params['embed.W'] + params['embed.b'] + cnd @ params['cond.W']

        blocks = []
        for b in range(c.blocks):
            prefix = block_prefix(b)
            tb = temb @ params[prefix + 'time.W'] + params[prefix + 'time.b']
            u = hidden + tb
            attn = attention_forward(
                u.reshape(F, n, c.d), sub_params(params, prefix + 'attn.'),
                heads=c.heads, perturb=b in perturb,
            )
            h1 = u + attn.output.reshape(F * n, c.d)
            z = np.tanh(h1 @ params[prefix + 'ff.W1'] + params[prefix + 'ff.b1'])
            hidden = h1 + z @ params[prefix + 'ff.W2'] + params[prefix + 'ff.b2']
            blocks.append(dict(u=u, attn=attn, h1=h1, z=z))

        eps = hidden @ params['out.W'] + params['out.b']
        cache = dict(x=x, cond=cnd, temb=temb, blocks=blocks, hidden=hidden,
                     shape=(F, n, ch))
        return eps.reshape(F, n, ch), cache

    def backward(self, d_eps, cache, params=None, d_logits=None, d_tokens=None):
        '''Exact parameter gradients.

        Arguments:
            d_eps (ndarray): gradient w.r.t. the predicted noise
            cache (dict): forward cache
            d_logits (dict): block index -> heads x N x N gradient on that
                block's attention logits
            d_tokens (dict): block index -> F x n x d gradient on that
                block's attention input

        Returns:
            dict of gradients keyed like the parameters
        '''

        if not cache or 'blocks' not in cache:
            raise MissingCacheError('backward needs a forward cache')
        params = params or self.params
        c = self.config
        d_logits = d_logits or {}
        d_tokens = d_tokens or {}
        F, n, ch = cache['shape']
        grads = {}

        de = np.asarray(d_eps, dtype=self.dtype).reshape(F * n, ch)
        grads['out.W'] = cache['hidden'].T @ de
        grads['out.b'] = de.sum(axis=0)
        dh = de @ params['out.W'].T

        for b in reversed(range(c.blocks)):
            prefix = block_prefix(b)
            blk = cache['blocks'][b]
            z = blk['z']
            grads[prefix + 'ff.W2'] = z.T @ dh
            grads[prefix + 'ff.b2'] = dh.sum(axis=0)
            dpre = (dh @ params[prefix + 'ff.W2'].T) * (1.0 - z ** 2)
            grads[prefix + 'ff.W1'] = blk['h1'].T @ dpre
            grads[prefix + 'ff.b1'] = dpre.sum(axis=0)
            dh1 = dh + dpre @ params[prefix + 'ff.W1'].T

            du_attn, attn_grads = attention_backward(
                blk['attn'], sub_params(params, prefix + 'attn.'),
                d_output=dh1.reshape(F, n, c.d), d_logits=d_logits.get(b),
            )
            for name, value in attn_grads.items():
                grads[prefix + 'attn.' + name] = value
            du = dh1 + du_attn.reshape(F * n, c.d)
            if b in d_tokens:
                du = du + d_tokens[b].reshape(F * n, c.d)

            dtb = du.sum(axis=0)
            grads[prefix + 'time.W'] = np.outer(cache['temb'], dtb)
            grads[prefix + 'time.b'] = dtb
            dh = du

        grads['embed.W'] = cache['x'].T @ dh
        grads['embed.b'] = dh.sum(axis=0)
        grads['cond.W'] = cache['cond'].T @ dh
        return grads

    def supervised_maps(self, cache, params=None):
        '''Cross-view distributions of the supervised block for every
        ordered pair of views.

        With head_mode "mlp" the heads are aggregated by the projection
        head; with "none" every head yields its own entry. The "cost"
        target replaces attention logits by the cosine cost volume of the
        block input.

        Returns:
            list of SupervisedMap
        '''

        c = self.config
        params = params or self.params
        blk = cache['blocks'][c.supervised_layer]
        F, n = c.views, c.tokens_per_view
        head_params = self.head_params(params)
        maps = []
        for i in range(F):
            for j in range(F):
                if i == j:
                    continue
                if c.target == 'cost':
                    z, zc = cost_logits(blk['u'].reshape(F, n, c.d), i, j)
                    maps.append(SupervisedMap(
                        CrossViewAttention((i, j), softmax(z), z), None, zc))
                    continue
                rows, cols = view_slice(i, n), view_slice(j, n)
                head_logits = blk['attn'].logits[:, rows, cols]
                if c.head_mode == 'mlp':
                    attn, hc = project_and_normalize(
                        head_logits, self.head, (i, j), head_params)
                    maps.append(SupervisedMap(attn, None, hc))
                else:
                    for h in range(c.heads):
                        logits = head_logits[h]
                        maps.append(SupervisedMap(
                            CrossViewAttention((i, j), softmax(logits), logits),
                            h, None))
        return maps

    def supervised_backward(self, maps, d_maps, params=None):
        '''Route gradients on the supervised logits back to the block.

        Arguments:
            maps (list): output of supervised_maps
            d_maps (list): gradient on each map's logits, None to skip

        Returns:
            (d_logits, d_tokens, grads) for backward()
        '''

        c = self.config
        params = params or self.params
        layer = c.supervised_layer
        F, n = c.views, c.tokens_per_view
        N = F * n
        d_logits = np.zeros((c.heads, N, N), dtype=self.dtype)
        d_tokens = np.zeros((F, n, c.d), dtype=self.dtype)
        grads = {}
        head_params = self.head_params(params)
        used_logits = used_tokens = False

        for entry, dz in zip(maps, d_maps):
            if dz is None:
                continue
            i, j = entry.attention.pair
            rows, cols = view_slice(i, n), view_slice(j, n)
            if c.target == 'cost':
                d_tokens += cost_logits_backward(
                    dz, entry.cache, d_tokens.shape, self.dtype)
                used_tokens = True
            elif c.head_mode == 'mlp':
                d_heads, head_grads = self.head.backward(
                    dz, entry.cache, head_params)
                d_logits[:, rows, cols] += d_heads
                for name, value in head_grads.items():
                    key = 'head.' + name
                    grads[key] = grads.get(key, 0.0) + value
                used_logits = True
            else:
                d_logits[entry.head, rows, cols] += dz
                used_logits = True

        d_logits = {layer: d_logits} if used_logits else {}
        d_tokens = {layer: d_tokens} if used_tokens else {}
        return d_logits, d_tokens, grads


@dataclass
class SupervisedMap:
    '''One supervised cross-view distribution and its backward cache.'''

    attention: CrossViewAttention
    head: Optional[int] = None
    cache: dict = field(default=None, repr=False)
