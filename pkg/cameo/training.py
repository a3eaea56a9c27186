# -*- coding: utf-8 -*-
'''
Training and sampling of the toy multi-view denoiser.

The objective is L_denoise + lambda * L_cameo. L_denoise is the noise MSE
over target views only; references enter the model clean and flagged. The
CAMEO term is the visibility-masked cross-entropy between the supervised
block's cross-view distributions and the one-hot geometric correspondence.
'''

# Standard library imports
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import List

# Third party imports
import numpy as np

# Local imports
from . import config, lib
from .attention import log_softmax, softmax_backward
from .dataset import conditioning
from .denoiser import ModelConfig, ToyDenoiser
from .diffusion import NoiseSchedule, ddim_sample, forward_noise
from .errors import ConfigError, DivergenceError
from .probe import EvalPair, attention_precision, evaluate_pair, layer_maps
from .reports import write_metrics
from .scene import plucker_embedding
from .tensors import make_rng
from .utils import float_dtype, progress

log = logging.getLogger(__name__)

LOSS_TYPES = ('CE', 'L1')
LOG_FLOOR = 1e-12


@dataclass
class TrainConfig:
    '''Optimization settings of one training run.

    Attributes:
        loss_weight: lambda, the weight of the CAMEO term
        tau: cycle threshold of the correspondence masks, token units
        cfg_drop_prob: probability of zeroing the camera conditioning
        batch_size: scenes per iteration
        iterations: optimizer steps
        learning_rate: RMSProp step size
        loss_type: "CE" or "L1"
        probe_rho: precision radius of the training monitor, meters
        eval_every: iterations between precision checks and checkpoints
        log_every: iterations between metric rows
    '''

    loss_weight: float = field(default_factory=lambda: config.loss_weight)
    tau: float = field(default_factory=lambda: config.tau)
    cfg_drop_prob: float = field(default_factory=lambda: config.cfg_drop_prob)
    batch_size: int = 1
    iterations: int = 2000
    learning_rate: float = 1e-3
    loss_type: str = 'CE'
    seed: int = field(default_factory=lambda: config.seed)
    probe_rho: float = 0.1
    probe_topk: int = field(default_factory=lambda: config.topk)
    eval_every: int = 100
    log_every: int = 1
    eval_scenes: int = 4
    rms_decay: float = 0.99
    clip_norm: float = 1.0
    precision: int = field(default_factory=lambda: config.precision)

    def __post_init__(self):
        self.loss_type = str(self.loss_type).upper()
        if self.loss_type not in LOSS_TYPES:
            raise ConfigError('loss_type must be one of {}'.format(LOSS_TYPES))
        if not self.loss_weight >= 0:
            raise ConfigError('lambda must be >= 0')
        if not 0.0 <= self.cfg_drop_prob <= 1.0:
            raise ConfigError('cfg_drop_prob must lie in [0, 1]')
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError('need iterations >= 0 and batch_size >= 1')
        if self.eval_every < 1 or self.log_every < 1:
            raise ConfigError('eval_every and log_every must be >= 1')
        float_dtype(self.precision)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass
class Sample:
    '''One training example: a scene with target views noised at step t.'''

    x0: np.ndarray
    plucker: np.ndarray
    target: np.ndarray
    t: int
    eps: np.ndarray
    drop_cond: bool = False
    corrs: list = field(default_factory=list, repr=False)

    def model_inputs(self, sched):
        '''(x_t, cond): noised targets, clean references.'''

        noisy = forward_noise(self.x0, self.t, self.eps, sched)
        x_t = np.where(self.target[:, None, None], noisy, self.x0)
        cond = conditioning(self.plucker, ~self.target, self.drop_cond)
        return x_t, cond


@dataclass
class LossResult:
    total: float
    denoise: float
    cameo: float
    grads: dict = field(default_factory=dict, repr=False)


def make_batch(dataset, rng, train_config, sched, views=None):
    '''Draw batch_size samples.

    Every sample picks a scene, masks 1 to F - 1 random views as targets,
    draws t uniformly in [1, T] and decides on condition dropping.
    '''

    if not dataset:
        raise ValueError('dataset is empty')
    samples = []
    for _ in range(train_config.batch_size):
        data = dataset[int(rng.integers(len(dataset)))]
        F = views or data.views
        count = int(rng.integers(1, F))
        target = np.zeros(F, dtype=bool)
        target[rng.permutation(F)[:count]] = True
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(data.latents.shape)
        drop = bool(rng.uniform() < train_config.cfg_drop_prob)
        samples.append(Sample(data.latents, data.plucker, target, t, eps,
                              drop, data.corrs))
    return samples


def cameo_loss(attn, corrs, loss_type='CE'):
    '''Visibility-masked alignment of cross-view distributions to one-hot
    correspondences.

    The loss is the sum over entries and rows of M * CE(A, P) (or
    M * |A - P|_1) divided by the sum of M; an all-zero mask gives 0.

    Arguments:
        attn (list): CrossViewAttention per supervised entry; gradients are
            taken w.r.t. its logits, entries without logits get None
        corrs (list): TokenCorrespondence aligned with attn
        loss_type (str): "CE" or "L1"

    Returns:
        (loss, grads): scalar and a logit gradient per entry
    '''

    loss_type = str(loss_type).upper()
    if loss_type not in LOSS_TYPES:
        raise ValueError('loss_type must be one of {}'.format(LOSS_TYPES))
    if len(attn) != len(corrs):
        raise ValueError('{} attention maps for {} correspondences'.format(
            len(attn), len(corrs)))

    total = 0.0
    weight = 0.0
    grads = []
    for a, corr in zip(attn, corrs):
        if tuple(a.pair) != tuple(corr.pair):
            raise ValueError('pair {} does not match correspondence {}'.format(
                a.pair, corr.pair))
        n = corr.size
        if a.probs.shape != (n, n):
            raise ValueError('map of shape {} for a {}x{} grid'.format(
                a.probs.shape, corr.h, corr.w))

        rows = np.arange(n)
        mask = corr.mask.astype(a.probs.dtype)
        if a.logits is not None:
            logp = log_softmax(a.logits)
            probs = np.exp(logp)
        else:
            probs = a.probs
            logp = np.log(np.maximum(probs, LOG_FLOOR))

        residual = probs.copy()
        residual[rows, corr.match] -= 1.0
        if loss_type == 'CE':
            per_row = -logp[rows, corr.match]
            grad = residual
        else:
            per_row = np.abs(residual).sum(axis=1)
            grad = softmax_backward(probs, np.sign(residual))

        total += float(np.sum(mask * per_row))
        weight += float(mask.sum())
        grads.append(None if a.logits is None else grad * mask[:, None])

    if weight == 0.0:
        return 0.0, [None if g is None else np.zeros_like(g) for g in grads]
    return total / weight, [None if g is None else g / weight for g in grads]


def _add(grads, other, scale=1.0):
    for name, value in other.items():
        if name in grads:
            grads[name] = grads[name] + scale * value
        else:
            grads[name] = scale * value
    return grads


def sample_loss(sample, model, corrs, train_config, sched, params=None):
    '''Loss and gradients of one Sample.'''

    params = params or model.params
    x_t, cond = sample.model_inputs(sched)
    eps_hat, cache = model.forward(x_t, cond, sample.t, params)

    target = sample.target[:, None, None]
    count = float(target.sum() * eps_hat.shape[1] * eps_hat.shape[2])
    diff = np.where(target, eps_hat - sample.eps, 0.0)
    denoise = float(np.sum(diff ** 2) / count)
    d_eps = 2.0 * diff / count

    maps = model.supervised_maps(cache, params)
    by_pair = {c.pair: c for c in corrs}
    missing = [m.attention.pair for m in maps if m.attention.pair not in by_pair]
    if missing:
        raise ValueError('no correspondence for pairs {}'.format(missing))
    cameo, d_maps = cameo_loss(
        [m.attention for m in maps],
        [by_pair[m.attention.pair] for m in maps],
        train_config.loss_type,
    )

    lam = train_config.loss_weight
    d_logits = d_tokens = None
    head_grads = {}
    if lam > 0:
        scaled = [None if g is None else lam * g for g in d_maps]
        d_logits, d_tokens, head_grads = model.supervised_backward(
            maps, scaled, params)
    grads = model.backward(d_eps, cache, params, d_logits, d_tokens)
    _add(grads, head_grads)
    total = denoise + lam * cameo if lam > 0 else denoise
    return LossResult(total, denoise, cameo, grads)


def total_loss(batch, model, corrs, train_config, sched=None, params=None):
    '''L_denoise + lambda * L_cameo averaged over a batch, with gradients.

    Arguments:
        batch (list): Samples, or a single Sample
        model (ToyDenoiser): model
        corrs (list): per sample correspondence set, None to use the
            correspondences carried by each Sample
        train_config (TrainConfig): loss settings
        sched (NoiseSchedule): defaults to the linear schedule of the model

    Returns:
        LossResult
    '''

    if isinstance(batch, Sample):
        batch = [batch]
        if corrs is not None:
            corrs = [corrs]
    if not batch:
        raise ValueError('empty batch')
    sched = sched or NoiseSchedule.linear(model.config.T)
    corrs = corrs or [s.corrs for s in batch]
    scale = 1.0 / len(batch)
    result = LossResult(0.0, 0.0, 0.0, {})
    for sample, sample_corrs in zip(batch, corrs):
        r = sample_loss(sample, model, sample_corrs, train_config, sched, params)
        result.total += scale * r.total
        result.denoise += scale * r.denoise
        result.cameo += scale * r.cameo
        _add(result.grads, r.grads, scale)
    return result


class RMSProp(object):
    '''Momentum-free RMSProp with a fixed step size.'''

    def __init__(self, learning_rate, decay=0.99, eps=1e-8):
        self.learning_rate = learning_rate
        self.decay = decay
        self.eps = eps
        self.state = {}

    def step(self, params, grads):
        for name in sorted(params):
            grad = grads.get(name)
            if grad is None:
                continue
            square = self.state.get(name)
            if square is None:
                square = np.zeros_like(params[name])
            square = self.decay * square + (1.0 - self.decay) * grad ** 2
            self.state[name] = square
            update = self.learning_rate * grad / (np.sqrt(square) + self.eps)
            params[name] = (params[name] - update).astype(params[name].dtype)
        return params


def clip_gradients(grads, max_norm):
    '''Scale grads so their global L2 norm is at most max_norm.'''

    if not max_norm:
        return grads
    norm = math.sqrt(math.fsum(float(np.sum(g ** 2)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {name: g * scale for name, g in grads.items()}
    return grads


@dataclass
class TrainResult:
    model: ToyDenoiser
    schedule: NoiseSchedule
    metrics: List[dict]
    checkpoints: dict = field(default_factory=dict)


def _finite_row(row):
    return all(
        value is None or math.isfinite(value)
        for key, value in row.items() if key != 'iter'
    )


def train(dataset, train_config, model_config=None, out=None, eval_set=None):
    '''Optimize a fresh ToyDenoiser on a dataset of SceneData.

    Arguments:
        dataset (list): SceneData used for training
        train_config (TrainConfig): optimization settings
        model_config (ModelConfig): model shape
        out (str): folder receiving checkpoints and metrics.csv
        eval_set (list): SceneData for the precision monitor, defaults to
            the first eval_scenes training scenes

    Returns:
        TrainResult
    '''

    if not dataset:
        raise ValueError('dataset is empty')
    model_config = model_config or ModelConfig()
    tc = train_config
    dtype = float_dtype(tc.precision)
    if dataset[0].views != model_config.views:
        raise ConfigError('dataset has {} views, model expects {}'.format(
            dataset[0].views, model_config.views))

    model = ToyDenoiser(model_config, make_rng(tc.seed, 0), dtype)
    sched = NoiseSchedule.linear(model_config.T)
    data_rng = make_rng(tc.seed, 1)
    optimizer = RMSProp(tc.learning_rate, tc.rms_decay)
    eval_set = eval_set or dataset[:tc.eval_scenes]
    extra = dict(train=tc.to_dict())

    def monitor():
        report = attention_precision(
            model, eval_set, k=tc.probe_topk, rho=tc.probe_rho)
        return report.overall

    def checkpoint(iteration):
        if not out:
            return None
        path = lib.checkpoint_path(out, iteration)
        return lib.save_checkpoint(path, model, iteration, sched, extra)

    metrics = []
    checkpoints = {}
    if out and not os.path.isdir(out):
        os.makedirs(out)
    if out:
        checkpoints[0] = checkpoint(0)

    last_row = None
    for iteration in progress(range(1, tc.iterations + 1), desc='train'):
        batch = make_batch(dataset, data_rng, tc, sched, model_config.views)
        result = total_loss(batch, model, None, tc, sched)
        if not (math.isfinite(result.total) and math.isfinite(result.cameo)):
            raise DivergenceError(iteration, last_row)

        grads = clip_gradients(result.grads, tc.clip_norm)
        optimizer.step(model.params, grads)

        evaluate = iteration % tc.eval_every == 0 or iteration == tc.iterations
        if iteration % tc.log_every == 0 or evaluate:
            row = dict(
                iter=iteration,
                loss_denoise=result.denoise,
                loss_cameo=result.cameo,
                precision_supervised_layer=monitor() if evaluate else None,
            )
            metrics.append(row)
            if _finite_row(row):
                last_row = row
            if evaluate:
                log.debug('iter %d denoise %.5f cameo %.5f precision %.4f',
                          iteration, row['loss_denoise'], row['loss_cameo'],
                          row['precision_supervised_layer'])
        if evaluate and out:
            checkpoints[iteration] = checkpoint(iteration)

    if out:
        write_metrics(metrics, os.path.join(out, 'metrics.csv'))
    log.info('Trained %d iterations (lambda=%g)', tc.iterations, tc.loss_weight)
    return TrainResult(model, sched, metrics, checkpoints)


def guided_noise(eps_uncond, eps_cond, cfg_weight):
    '''eps_uncond + w (eps_cond - eps_uncond).'''

    return eps_uncond + cfg_weight * (eps_cond - eps_uncond)


def sample(checkpoint, cameras, references, steps=None, cfg_weight=None,
           seed=0):
    '''Generate the target latents of a set of views with DDIM.

    Arguments:
        checkpoint (str or tuple): checkpoint folder, or (model, schedule)
        cameras (list): one Camera per view
        references (dict): view index -> clean latent, (h*w) x c or
            h x w x c; all other views are generated
        steps (int): DDIM updates
        cfg_weight (float): classifier-free guidance weight

    Returns:
        F x (h*w) x c latents, references equal to their inputs
    '''

    steps = config.sample_steps if steps is None else int(steps)
    cfg_weight = config.cfg_weight if cfg_weight is None else float(cfg_weight)
    if steps < 1:
        raise ValueError('steps must be >= 1')
    if isinstance(checkpoint, str):
        model, sched, _ = lib.load_checkpoint(checkpoint)
    else:
        model, sched = checkpoint

    c = model.config
    F, n = c.views, c.tokens_per_view
    if len(cameras) != F:
        raise ConfigError('checkpoint expects {} views, got {} cameras'.format(
            F, len(cameras)))

    reference = np.zeros(F, dtype=bool)
    clean = np.zeros((F, n, c.channels), dtype=model.dtype)
    for view, latent in references.items():
        latent = np.asarray(latent, dtype=model.dtype)
        if latent.size != n * c.channels:
            raise ConfigError('reference {} has shape {}'.format(
                view, latent.shape))
        reference[int(view)] = True
        clean[int(view)] = latent.reshape(n, c.channels)

    plucker = np.stack([
        plucker_embedding(cam, (c.h, c.w)).values.reshape(n, 6)
        for cam in cameras
    ])
    cond = conditioning(plucker, reference)
    uncond = conditioning(plucker, reference, drop=True)

    def eps_fn(x, t):
        eps_cond, _ = model.forward(x, cond, t)
        if cfg_weight == 1.0:
            return eps_cond
        eps_uncond, _ = model.forward(x, uncond, t)
        return guided_noise(eps_uncond, eps_cond, cfg_weight)

    rng = make_rng(seed, 2)
    x_init = rng.standard_normal((F, n, c.channels)).astype(model.dtype)
    mask = np.broadcast_to(reference[:, None, None], x_init.shape)
    return ddim_sample(eps_fn, x_init, sched, steps, clamp=(mask, clean))


def _denoise_effect(model, data, layer, pair, params, sched, rng, samples):
    '''Noise MSE on view i, the target, with references clean, before and
    after the identity perturbation of one block, plus the RMS change of
    the predicted noise.'''

    i = pair[0]
    target = np.arange(model.config.views) == i
    clean, perturbed, change = [], [], []
    for _ in range(samples):
        t = int(rng.integers(1, sched.T + 1))
        eps = rng.standard_normal(data.latents.shape)
        x_t, cond = Sample(data.latents, data.plucker, target, t,
                           eps).model_inputs(sched)
        eps_clean, _ = model.forward(x_t, cond, t, params)
        eps_perturbed, _ = model.forward(x_t, cond, t, params, perturb=(layer,))
        clean.append(float(np.mean((eps_clean[i] - eps[i]) ** 2)))
        perturbed.append(float(np.mean((eps_perturbed[i] - eps[i]) ** 2)))
        change.append(float(np.sqrt(np.mean(
            (eps_perturbed[i] - eps_clean[i]) ** 2))))
    return (math.fsum(clean) / samples, math.fsum(perturbed) / samples,
            math.fsum(change) / samples)


def perturbation_effect(model, dataset, layer=None, params=None, k=None,
                        rho=None, loss_type='CE', samples=4, seed=0):
    '''Effect of forcing one block's attention to the identity, per
    evaluated pair (i, j).

    The cross-view map of a perturbed block is scored as eye(h*w), the
    match every token would make to its own position. The downstream
    effect is measured by running the model with the block perturbed:
    denoising view i with the other views as clean references.

    Returns:
        list of dicts with name, pair, theta, precision, precision_perturbed,
        loss, loss_perturbed, denoise, denoise_perturbed and eps_change
    '''

    layer = model.config.supervised_layer if layer is None else layer
    params = params or model.params
    sched = NoiseSchedule.linear(model.config.T)
    rng = make_rng(seed, 4)
    rows = []
    for data in dataset:
        by_pair = {c.pair: c for c in data.corrs}
        clean = layer_maps(model, data, layer, params)
        perturbed = layer_maps(model, data, layer, params, perturb=True)
        for pair in sorted(clean):
            i, j = pair
            result = dict(name=data.name, pair=list(pair),
                          theta=data.thetas[pair])
            for suffix, maps in (('', clean), ('_perturbed', perturbed)):
                attn = maps[pair]
                eval_pair = EvalPair(data.thetas[pair], data.grids[i],
                                     data.grids[j], attention=attn, pair=pair)
                precision, _ = evaluate_pair(eval_pair, 'attention', k=k, rho=rho)
                loss, _ = cameo_loss([attn], [by_pair[pair]], loss_type)
                result['precision' + suffix] = precision
                result['loss' + suffix] = loss
            (result['denoise'], result['denoise_perturbed'],
             result['eps_change']) = _denoise_effect(
                model, data, layer, pair, params, sched, rng, samples)
            rows.append(result)
    return rows


def evaluate_denoise(model, dataset, train_config, samples=8, seed=0):
    '''Mean denoising loss over a fixed draw of samples per scene.'''

    sched = NoiseSchedule.linear(model.config.T)
    rng = make_rng(seed, 3)
    tc = replace(train_config, batch_size=samples, cfg_drop_prob=0.0,
                 loss_weight=0.0)
    losses = []
    for data in dataset:
        batch = make_batch([data], rng, tc, sched, model.config.views)
        losses.append(total_loss(batch, model, None, tc, sched).denoise)
    return math.fsum(losses) / len(losses)
