"""Error classes mapped to distinct CLI exit codes."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class SchemaError(ValueError):
    """Malformed dataset, checkpoint, or annotation file."""


class VocabMismatchError(ValueError):
    """Vocabularies of model and data are incompatible."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""
