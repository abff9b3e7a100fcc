"""Exception types shared across the engine."""


class ValidationError(ValueError):
    """Input violates a documented precondition."""


class NotGeocodable(LookupError):
    """Free text matched no gazetteer alias."""


class AgentUnavailable(RuntimeError):
    """An agent backend failed to respond; the caller treats it as a non-participant."""


class PipelineFailed(RuntimeError):
    """No elected agent produced an answer."""


class DegenerateRow(ValueError):
    """A graph row has no positive outgoing weight."""


class NumericalFault(ArithmeticError):
    """A non-finite value appeared in the selection model."""


class MissingImage(LookupError):
    """An image reference cannot be resolved to features."""


class IngestError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)
