# -*- coding: utf-8 -*-

__version__ = '0.1.0'

from . import (
    config,
    lib,
    models,
)
from .api import *
