"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all fanpipe errors."""


class AlreadyExists(EngineError):
    """A shared region, registry entry, or name is already taken."""


class NotFound(EngineError):
    """A region, slot, card, or worker does not exist."""


class ResourceError(EngineError):
    """The OS refused a shared-memory or socket operation."""


class CorruptHandle(EngineError):
    """A share handle disagrees with the region it points at."""


class ShapeError(EngineError):
    """Tensor spec mismatch: wrong byte length, dtype, or dims."""


class LabelError(EngineError):
    """A label is not part of the channel's declared label set."""


class UseAfterConsume(EngineError):
    """A lease was consumed twice."""


class WriterError(EngineError):
    """The writer callback passed to push() raised; the slot was freed."""


class ConfigError(EngineError):
    """Invalid configuration value."""


class ProtocolError(EngineError):
    """Malformed control message."""


class StartupError(EngineError):
    """Engine start failed after partial initialization."""


class CorruptCard(EngineError):
    """A model card's checksum does not match its body."""
