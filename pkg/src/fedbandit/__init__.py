"""Federated linear contextual bandits under user-level central differential privacy."""

from . import audit, banditalgos, dpmech, envmod, numkit, simkit
from .errors import (
    BadDimension,
    ConfigError,
    IncompleteRound,
    MissingBroadcast,
    NonFiniteInput,
    NotPD,
    OutOfDomain,
)

__version__ = "0.1.0"
