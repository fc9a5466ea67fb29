class FeatureFormatError(ValueError):
    pass


class InvalidFeatureError(ValueError):
    pass


class DimensionMismatchError(ValueError):
    pass


class EmptyPyramidError(ValueError):
    pass


class FactorizationError(ValueError):
    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class ConfigError(ValueError):
    pass


class UnknownIdentifierError(KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ''


class NoTrueMatchError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, losses=(), rank1=None):
        super().__init__(message)
        self.losses = list(losses)
        self.rank1 = rank1


class VerificationError(RuntimeError):
    def __init__(self, message, reports=()):
        super().__init__(message)
        self.reports = list(reports)
