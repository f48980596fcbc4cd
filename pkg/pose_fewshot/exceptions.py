# -*- coding: utf-8 -*-


class Error(Exception):
    def __init__(self, message, code):
        self.message = message
        self.code = code
        super(Error, self).__init__(message, code)

    def __str__(self):
        return str(self.message)

    def __getnewargs__(self):
        return (self.message, self.code,)


class ConfigError(Error):
    """
    Raised when a configuration file, preset or override cannot be
    resolved. Unknown keys are always an error; there are no silent
    defaults for misspelled settings.
    """
    pass


class DataError(Error, ValueError):
    """
    Raised when samples, splits or annotations violate the dataset
    contracts (duplicate class ids, keypoints outside the image, classes
    too small to sample from, ...).

    `class_id` names the offending class when there is one.
    """

    def __init__(self, message, code, class_id=None):
        self.class_id = class_id
        super(DataError, self).__init__(message, code)

    def __getnewargs__(self):
        return (self.message, self.code, self.class_id)


class PlacementError(DataError):
    """
    The synthetic generator could not place all parts of an image
    without overlap within its allowed retries.
    """
    pass


class ShapeError(Error, ValueError):
    """
    A tensor does not have the shape an architecture or an operation
    expects. Both the expected and the actual shape are kept so callers
    can report them.
    """

    def __init__(self, message, code, expected=None, actual=None):
        self.expected = expected
        self.actual = actual
        super(ShapeError, self).__init__(message, code)

    def __getnewargs__(self):
        return (self.message, self.code, self.expected, self.actual)


class FrozenParameterError(Error, RuntimeError):
    """
    Raised on any attempt to update pose estimator parameters after base
    training froze them.
    """
    pass


class TrainingError(Error, RuntimeError):
    pass


class CheckpointError(Error):
    pass


class EvaluationError(Error, ValueError):
    pass
