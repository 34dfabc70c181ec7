"""Exception hierarchy shared by every module."""


class HidimlrError(Exception):
    """Base class for all errors raised by this package."""


class NonFinite(HidimlrError, ValueError):
    pass


class DomainError(HidimlrError, ValueError):
    pass


class EmptyInput(HidimlrError, ValueError):
    pass


class NotPSD(HidimlrError, ValueError):
    pass


class NotSPD(HidimlrError, ValueError):
    pass


class RankDeficient(HidimlrError, ValueError):
    pass


class SingularFisher(HidimlrError, ValueError):
    pass


class DegenerateProbabilities(HidimlrError, ValueError):
    """Some fitted probability underflowed below the Woodbury threshold."""


class IndexOutOfRange(HidimlrError, IndexError):
    pass


class Unbounded(HidimlrError):
    """The MLE does not exist or left the boundedness region."""

    def __init__(self, message, metric=None, tau=None):
        super().__init__(message)
        self.metric = metric
        self.tau = tau


class MaxIterations(HidimlrError):
    def __init__(self, message, iterations=None, grad_norm=None):
        super().__init__(message)
        self.iterations = iterations
        self.grad_norm = grad_norm


class TooManyFailures(HidimlrError):
    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = failures or {}
