class NumericalError(FloatingPointError):
    """A solver or sampler produced non-finite values."""


class ConfigurationError(ValueError):
    """Inputs are individually valid but do not fit together."""


class TrainingError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass
