"""Error types shared across the package.

Each class marks a distinct failure mode so callers (and the CLI exit-code
mapping) can tell user mistakes apart from corrupt artifacts.
"""


class ConfigurationError(ValueError):
    """A config value is out of range or internally inconsistent."""


class VocabularyError(ValueError):
    """A query names a category the model/vocab does not know."""


class ShapeError(ValueError):
    """A tensor argument has the wrong shape or dtype."""


class FormatError(ValueError):
    """An on-disk artifact (checkpoint, bank, dataset) is malformed or has
    an unsupported format_version."""


class EmptyAttentionError(ValueError):
    """An attention mask admits no keys for some query row."""


class ArgumentError(ValueError):
    """A function argument is unusable (e.g. an empty query list)."""


class GenerationError(RuntimeError):
    """Synthetic-data generation violated one of its own invariants."""
