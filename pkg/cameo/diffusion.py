# -*- coding: utf-8 -*-
'''
DDPM noise schedules and DDPM / DDIM update rules.

Schedules are indexed by t in [0, T]; t = 0 is clean data with
alpha_bar = 1.
'''

# Standard library imports
import logging
from dataclasses import dataclass

# Third party imports
import numpy as np

log = logging.getLogger(__name__)


@dataclass
class NoiseSchedule:
    '''Variance schedule over T steps.

    Attributes:
        beta, alpha, alpha_bar: arrays of length T + 1 indexed by t, with
            beta[0] = 0 and alpha_bar[0] = 1
    '''

    T: int
    beta: np.ndarray
    kind: str = 'linear'

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        if self.beta.shape != (self.T + 1,):
            raise ValueError('beta must have T + 1 entries')
        steps = self.beta[1:]
        if np.any(steps <= 0.0) or np.any(steps >= 1.0):
            raise ValueError('beta_t must lie in (0, 1)')
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    @classmethod
    def linear(cls, T=1000, beta_start=1e-4, beta_end=2e-2):
        '''The DDPM linear schedule.'''

        beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
        return cls(T, beta, 'linear')

    @classmethod
    def from_betas(cls, betas, kind='custom'):
        betas = np.asarray(betas, dtype=np.float64)
        return cls(len(betas), np.concatenate([[0.0], betas]), kind)

    @property
    def sigma(self):
        '''DDPM posterior standard deviation per step (sigma[0] = 0).'''

        prev = np.concatenate([[1.0], self.alpha_bar[:-1]])
        with np.errstate(divide='ignore', invalid='ignore'):
            var = self.beta * (1.0 - prev) / (1.0 - self.alpha_bar)
        var[0] = 0.0
        return np.sqrt(np.nan_to_num(var))

    def check_step(self, t):
        t = int(t)
        if not 0 <= t <= self.T:
            raise ValueError('step {} outside [0, {}]'.format(t, self.T))
        return t

    def to_dict(self):
        return dict(T=int(self.T), kind=self.kind,
                    beta=[float(b) for b in self.beta[1:]])

    @classmethod
    def from_dict(cls, data):
        return cls.from_betas(data['beta'], data.get('kind', 'custom'))


def mix_noise(x0, eps, alpha_bar):
    '''sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps.'''

    return np.sqrt(alpha_bar) * x0 + np.sqrt(1.0 - alpha_bar) * eps


def unmix_noise(x_t, eps_hat, alpha_bar):
    '''Clean-sample estimate from x_t and a noise prediction.'''

    if alpha_bar <= 0.0:
        raise ValueError('alpha_bar is 0, x0 is not recoverable')
    return (x_t - np.sqrt(1.0 - alpha_bar) * eps_hat) / np.sqrt(alpha_bar)


def forward_noise(x0, t, eps, sched):
    '''Sample x_t from q(x_t | x0) with the given noise.'''

    t = sched.check_step(t)
    if np.shape(eps) != np.shape(x0):
        raise ValueError('eps and x0 shapes differ')
    return mix_noise(x0, eps, sched.alpha_bar[t])


def predict_x0(x_t, t, eps_hat, sched):
    t = sched.check_step(t)
    return unmix_noise(x_t, eps_hat, sched.alpha_bar[t])


def ddim_step(x_t, t, t_prev, eps_hat, sched):
    '''Deterministic DDIM update from t to t_prev < t.'''

    t = sched.check_step(t)
    t_prev = sched.check_step(t_prev)
    if t_prev >= t:
        raise ValueError('t_prev={} must be smaller than t={}'.format(t_prev, t))
    x0_hat = predict_x0(x_t, t, eps_hat, sched)
    return mix_noise(x0_hat, eps_hat, sched.alpha_bar[t_prev])


def ddpm_step(x_t, t, eps_hat, sched, noise):
    '''Ancestral DDPM update from t to t - 1.'''

    t = sched.check_step(t)
    if t < 1:
        raise ValueError('ddpm_step needs t >= 1')
    beta = sched.beta[t]
    mean = (x_t - beta / np.sqrt(1.0 - sched.alpha_bar[t]) * eps_hat) \
        / np.sqrt(sched.alpha[t])
    return mean + sched.sigma[t] * noise


def ddim_timesteps(T, steps):
    '''Decreasing integer timesteps from T to 0 with `steps` updates.'''

    if steps < 1:
        raise ValueError('steps must be >= 1')
    steps = min(int(steps), int(T))
    grid = np.round(np.linspace(T, 0, steps + 1)).astype(np.int64)
    return [int(t) for t in grid]


def ddim_sample(eps_fn, x_init, sched, steps, clamp=None):
    '''Run a DDIM trajectory from x_init at t = T down to t = 0.

    Arguments:
        eps_fn (callable): eps_fn(x_t, t) -> predicted noise
        x_init (ndarray): starting latent at t = T
        sched (NoiseSchedule): schedule
        steps (int): number of DDIM updates
        clamp (tuple): optional (mask, x_clean); entries where mask is true
            are reset to x_clean before every model call and at the end

    Returns:
        latent at t = 0
    '''

    x = np.array(x_init, copy=True)
    if clamp is not None:
        mask, clean = clamp
        x = np.where(mask, clean, x)
    times = ddim_timesteps(sched.T, steps)
    for t, t_prev in zip(times[:-1], times[1:]):
        eps_hat = eps_fn(x, t)
        x = ddim_step(x, t, t_prev, eps_hat, sched)
        if clamp is not None:
            x = np.where(mask, clean, x)
    return x
