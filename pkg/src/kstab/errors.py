"""Exception hierarchy shared across the package."""


class KstabError(Exception):
    """Base class for all errors raised by kstab."""


class Unbounded(KstabError):
    pass


class OriginNotInterior(KstabError):
    pass


class NonReflexive(KstabError):
    pass


class NonConvex(KstabError):
    """The discrete Hessian lost positive definiteness somewhere."""


class DomainTooSmall(KstabError):
    """The computational box truncates a non-negligible amount of mass."""


class NotNormalized(KstabError):
    pass


class StepFailed(KstabError):
    pass


class TooFewSamples(KstabError):
    pass


class NotCauchy(KstabError):
    """The flow difference quotients have not settled at this resolution."""


class OrderViolated(KstabError):
    pass


class DenominatorMismatch(KstabError):
    pass


class TrivialConfiguration(KstabError):
    """Raised when a test configuration has vanishing L2 norm."""


class ConfigInvalid(KstabError):
    def __init__(self, key, message=""):
        self.key = key
        super().__init__(f"invalid config key {key!r}: {message}" if message else f"invalid config key {key!r}")
