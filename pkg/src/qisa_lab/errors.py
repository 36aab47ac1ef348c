"""Exception types shared across the lab."""


class QisaLabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(QisaLabError):
    """Operand dimensions do not match the operation's contract."""


class NumericError(QisaLabError):
    """Non-finite or otherwise unusable numeric input (NaN logits, NaN grads)."""


class ContractError(QisaLabError):
    """An API precondition was violated (non-scalar backward, reused graph, ...)."""


class ConfigError(QisaLabError):
    """Invalid model/run configuration or CLI usage."""


class DegenerateTokenError(QisaLabError):
    """A zero-norm vector cannot be amplitude encoded."""


class CacheMissError(QisaLabError):
    """Observable cache lookup failed (missing entry or stale parameters)."""


class CorpusError(QisaLabError):
    """Corpus file missing, unreadable, too small, or out-of-vocabulary text."""


class CheckpointError(QisaLabError):
    """Checkpoint is incompatible with the current configuration or corrupted."""


class ContextOverflowError(QisaLabError):
    """Input sequence is longer than the model's context window."""


class InsufficientDataError(QisaLabError):
    """Not enough evaluation data for the requested number of windows."""


class TrainingDiverged(QisaLabError):
    """Loss exceeded the divergence guard for too many consecutive steps."""
