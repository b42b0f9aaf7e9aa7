"""Exception types raised across the package."""


class NonFiniteInput(ValueError):
    pass


class NotPD(ValueError):
    """Matrix expected to be positive definite is not."""


class BadDimension(ValueError):
    pass


class OutOfDomain(ValueError):
    pass


class MissingBroadcast(RuntimeError):
    """A greedy client was asked to act before receiving a global estimate."""


class IncompleteRound(RuntimeError):
    """Server aggregation received uploads from fewer than all clients."""


class ConfigError(ValueError):
    pass
