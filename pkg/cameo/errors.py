# -*- coding: utf-8 -*-
'''Exceptions raised by cameo.'''


class CameoError(Exception):
    '''Base class for all cameo errors.'''


class TensorFileError(CameoError, ValueError):
    '''A TensorFile could not be written or parsed.'''


class BadMagicError(TensorFileError):
    pass


class VersionMismatchError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


class UnsupportedDtypeError(TensorFileError):
    pass


class ConfigError(CameoError, ValueError):
    '''Invalid or inconsistent configuration.'''


class GeometryError(CameoError, ValueError):
    '''Geometry can not satisfy a request, eg. no valid tokens.'''


class SpreadError(CameoError, ValueError):
    '''Camera rotation spread can not be satisfied.'''


class MissingCacheError(CameoError, RuntimeError):
    '''Backward pass requested without a matching forward cache.'''


class DivergenceError(CameoError, RuntimeError):
    '''Training produced a non-finite loss.

    Arguments:
        iteration (int): Iteration at which the loss became non-finite
        last_row (dict): Last metrics row with finite values, if any
    '''

    def __init__(self, iteration, last_row=None):
        self.iteration = iteration
        self.last_row = last_row
        msg = 'Non-finite loss at iteration {}'.format(iteration)
        if last_row:
            msg += ' (last finite metrics: {})'.format(last_row)
        super(DivergenceError, self).__init__(msg)


class StageError(CameoError, RuntimeError):
    '''A pipeline stage failed.

    Arguments:
        stage (str): Name of the failing stage
        cause (Exception): Original exception
    '''

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super(StageError, self).__init__(
            '[{}] {}: {}'.format(stage, type(cause).__name__, cause)
        )


class MetricsError(CameoError, ValueError):
    '''A metrics or report file is empty or malformed.'''
