"""Exception hierarchy shared across the package."""


class GraphDctError(Exception):
    """Base class for all errors raised by graphdct."""


class ParseError(GraphDctError):
    """Malformed graph record text."""


class ValidationError(GraphDctError):
    """Structurally invalid graph, label, or argument combination."""


class CapacityError(GraphDctError):
    """Graph does not fit into the requested padded size."""


class EmptyGraphError(GraphDctError):
    """Operation requires at least one real (masked-in) node."""


class DegenerateFeatureError(GraphDctError):
    """Zero-norm feature vector where a cosine similarity is required."""


class DimensionError(GraphDctError):
    """Array shapes are mutually inconsistent."""


class DomainError(GraphDctError):
    """Scalar argument outside its documented domain."""


class InsufficientNegativesError(GraphDctError):
    """Candidate pool has too few eligible negative examples."""


class GenerationError(GraphDctError):
    """Synthetic data generation budget exhausted."""


class ConfigError(GraphDctError):
    """Unreadable or inconsistent configuration."""


class DataError(GraphDctError):
    """Unreadable or inconsistent data file."""
