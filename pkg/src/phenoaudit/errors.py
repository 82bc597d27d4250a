"""Exception hierarchy shared across the pipeline."""


class PhenoAuditError(Exception):
    """Base class for all package errors."""


class ValidationError(PhenoAuditError):
    """A config or record violates a documented invariant."""


class IntegrityError(PhenoAuditError):
    """A table row references an id that does not exist."""


class TableParseError(PhenoAuditError):
    """A table file is malformed (bad numeric, missing column, ...)."""


class ConfigError(PhenoAuditError):
    """A model or run configuration is unusable."""


class ShapeError(PhenoAuditError):
    """Array dimensions do not match the model contract."""


class TrainingError(PhenoAuditError):
    """Training diverged or received non-finite gradients."""


class ContractError(PhenoAuditError):
    """An operation was called outside its documented protocol."""
