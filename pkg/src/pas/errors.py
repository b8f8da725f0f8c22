"""Exception hierarchy. CLI exit codes hang off these classes."""


class PasError(Exception):
    """Base class for engine errors."""


class ConfigError(PasError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class StageError(PasError):
    """A pipeline stage failed; its checkpoint predecessors are left intact."""


class CorruptionError(PasError):
    """Workspace contents do not match their recorded digests."""


class FormatError(PasError):
    """A file on disk does not follow its declared format."""


class IntegrityError(PasError):
    """Cross-record invariants violated (id collisions, missing embeddings)."""


class EmptyDomainError(StageError):
    """Concept generation produced nothing in its first round."""


class TransportError(PasError):
    """A provider could not be reached within its retry budget."""


class ProtocolError(PasError):
    """A provider answered, but not according to the wire contract."""

    def __init__(self, message, status=None, body=None):
        self.status = status
        self.body = body
        super().__init__(message)


class DomainError(PasError, ValueError):
    """Inputs outside an operation's mathematical domain."""
