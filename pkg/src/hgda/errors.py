"""Exception hierarchy. Every error raised by the package derives from HGDAError."""


class HGDAError(Exception):
    pass


# corpus / embeddings
class MalformedLine(HGDAError, ValueError):
    pass


class InvalidTag(HGDAError, ValueError):
    pass


class DanglingInside(InvalidTag):
    pass


class InvalidTagSequence(HGDAError, ValueError):
    pass


class EmptyCorpus(HGDAError, ValueError):
    pass


class DimensionMismatch(HGDAError, ValueError):
    pass


class UnparsableFloat(HGDAError, ValueError):
    pass


class EmptyManifest(HGDAError, ValueError):
    pass


# numerics
class NonFiniteScore(HGDAError, FloatingPointError):
    pass


class NonFiniteLoss(HGDAError, FloatingPointError):
    def __init__(self, message, task_entry=None):
        super().__init__(message)
        self.task_entry = task_entry


class NonFiniteGradient(HGDAError, FloatingPointError):
    pass


class TagIndexOutOfRange(HGDAError, IndexError):
    pass


class DomainIndexOutOfRange(HGDAError, IndexError):
    pass


class StaleCache(HGDAError, RuntimeError):
    """A backward pass was given a cache that was already consumed or belongs to another call."""


class NegativeLoss(HGDAError, ValueError):
    pass


# sampling
class InsufficientSentences(HGDAError, ValueError):
    pass


class NoEntitySentences(InsufficientSentences):
    pass


class InvalidBatchSize(HGDAError, ValueError):
    pass


# checkpoints / config
class IncompatibleCheckpoint(HGDAError, ValueError):
    pass


class ConfigError(HGDAError, ValueError):
    pass
