# -*- coding: utf-8 -*-
import os


def _cpu_count():
    return max(1, os.cpu_count() or 1)


seed = int(os.getenv('CAMEO_SEED', '0'))

threads = int(os.getenv('CAMEO_THREADS', str(_cpu_count())))

precision = int(os.getenv('CAMEO_PRECISION', '64'))

log_level = os.getenv('CAMEO_LOG_LEVEL', 'INFO')

# Training and evaluation defaults
loss_weight = float(os.getenv('CAMEO_LAMBDA', '0.02'))

tau = float(os.getenv('CAMEO_TAU', '1.5'))

rho = float(os.getenv('CAMEO_RHO', '0.02'))

topk = int(os.getenv('CAMEO_TOPK', '1000'))

cfg_drop_prob = float(os.getenv('CAMEO_CFG_DROP', '0.1'))

cfg_weight = float(os.getenv('CAMEO_CFG_WEIGHT', '2.0'))

sample_steps = int(os.getenv('CAMEO_SAMPLE_STEPS', '50'))

nn_method = os.getenv('CAMEO_NN_METHOD', 'brute')

# Artifact templates
view_template = os.getenv(
    'CAMEO_VIEW_FILE',
    '{view:d}.{kind}.camt'
)

pair_template = os.getenv(
    'CAMEO_PAIR_FILE',
    '{kind}_{src:d}_{dst:d}.camt'
)

checkpoint_template = os.getenv(
    'CAMEO_CHECKPOINT_DIR',
    'step_{iteration:06d}'
)

presets_root = os.getenv(
    'CAMEO_PRESETS',
    os.path.join(os.path.dirname(os.path.abspath(__file__)), 'presets')
)
