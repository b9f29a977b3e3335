"""Exception hierarchy shared across the package.

Errors are grouped into three families so the CLI can map them onto
exit codes: configuration problems, data problems, and numerical or
inferential failures.
"""


class CausalGroveError(Exception):
    """Base class for all package errors."""


class ConfigError(CausalGroveError):
    """Invalid run configuration (bad JSON, unknown keys, bad values)."""


class ParameterError(ConfigError):
    """A parameter value is outside its admissible range."""


class DataError(CausalGroveError):
    """Base class for dataset construction and ingestion errors."""


class SchemaError(DataError):
    """A named column is missing or the schema is inconsistent."""


class ParseError(DataError):
    """A cell could not be parsed; carries the offending file line."""


class ValidationError(DataError):
    """Dataset contents violate an invariant (non-finite, bad treatment)."""


class NumericalError(CausalGroveError):
    """Base class for numerical and inference-time failures."""


class DegenerateTreatmentError(NumericalError):
    """Treatment residuals have (numerically) zero variation."""


class OverlapError(NumericalError):
    """Estimated propensities hit 0 or 1 where a ratio is required."""


class InsufficientOverlapError(NumericalError):
    """The kernel-weighted treatment variation at a point is ~0."""


class PredictionError(NumericalError):
    """No tree could produce a prediction for the query point."""


class InferenceError(NumericalError):
    """Too little structure for the requested inference (e.g. < 2 clusters)."""


class DegenerateSplitError(NumericalError):
    """A subgroup split cannot be formed (e.g. constant CATE estimates)."""


class RatioUndefinedError(NumericalError):
    """A variance ratio has a zero denominator."""


class EvaluationError(NumericalError):
    """An objective could not be evaluated (e.g. all samples missing)."""
