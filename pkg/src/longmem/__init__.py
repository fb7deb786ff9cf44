"""Long-term memory for open-domain dialogue agents.

Two branches turn a stream of turns into memories: a narrative branch that
summarizes rounds into a level hierarchy, and a persona branch that keeps a
key-value profile of the user. A forgetting policy keeps the pool under a
character budget.
"""

from .config import EngineConfig, load_config
from .core import DialogueTurn, MemoryItem, MemoryKind, MemoryPool, Speaker, Transcript
from .engine import Backends, Engine, EngineState
from .errors import (
    BackendError,
    CapacityOverflowError,
    ConfigError,
    CorruptStateError,
    InputFormatError,
    LongMemError,
    TurnOrderError,
    VersionMismatchError,
)
from .forgetting import ForgettingConfig, Policy, compute_score

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "Backends",
    "CapacityOverflowError",
    "ConfigError",
    "CorruptStateError",
    "DialogueTurn",
    "Engine",
    "EngineConfig",
    "EngineState",
    "ForgettingConfig",
    "InputFormatError",
    "LongMemError",
    "MemoryItem",
    "MemoryKind",
    "MemoryPool",
    "Policy",
    "Speaker",
    "Transcript",
    "TurnOrderError",
    "VersionMismatchError",
    "compute_score",
    "load_config",
    "__version__",
]
