"""Exception hierarchy shared across the pipeline."""


class RelinkError(Exception):
    """Base class for all pipeline errors."""


class CorpusFormatError(RelinkError):
    """Raised when a corpus or catalog file fails to parse."""

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class DuplicateDocumentError(RelinkError):
    pass


class UnknownEntityError(RelinkError):
    pass


class SelfLoopError(RelinkError):
    pass


class DimensionMismatchError(RelinkError):
    pass


class ZeroVectorError(RelinkError):
    pass


class GatewayError(RelinkError):
    """Chat or embedding call failed after exhausting retries."""


class ReplayMissError(GatewayError):
    """Replay transcript has no entry for the request hash."""

    def __init__(self, request_hash):
        super().__init__(f"no transcript entry for request hash {request_hash}")
        self.request_hash = request_hash


class InstantiationFailedError(RelinkError):
    """Latent relation could not be turned into a valid factual triple."""


class NoTopicEntityError(RelinkError):
    """No catalog entity could be grounded in the query text."""


class MissingArtifactError(RelinkError):
    """A prerequisite store/checkpoint file does not exist yet."""

    def __init__(self, path, hint):
        super().__init__(f"missing artifact {path}; run `{hint}` first")
        self.path = path
        self.hint = hint
