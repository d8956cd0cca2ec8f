"""
Exception hierarchy for the slant study toolkit.
Every error carries the process exit code the CLI reports and a category used in logs.
"""

from typing import Iterable, Optional


class SlantStudyError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1
    category = "general_error"


class ConfigurationError(SlantStudyError, ValueError):
    """Invalid configuration, filter or sample parameters."""

    exit_code = 2
    category = "configuration_error"

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingArtifactError(SlantStudyError):
    """An upstream artifact has not been produced yet."""

    exit_code = 3
    category = "missing_artifact"

    def __init__(self, artifact: str, producer: str):
        self.artifact = artifact
        self.producer = producer
        super().__init__(f"missing artifact '{artifact}'; run the `{producer}` subcommand first")


class DomainError(SlantStudyError, ValueError):
    """Input outside the mathematical domain of an operation."""

    category = "domain_error"


class IntegrityError(SlantStudyError):
    """Artifacts disagree with each other (e.g. a score without a corpus row)."""

    category = "integrity_error"


class IdentificationError(SlantStudyError):
    """The treatment effect is not identified in the estimation sample."""

    category = "identification_error"


class InferenceError(SlantStudyError):
    """Cluster-robust inference cannot be computed."""

    category = "inference_error"


class SpecificationError(SlantStudyError, ValueError):
    """A regression or event-study specification is invalid for the panel."""

    category = "specification_error"


class DegenerateError(SlantStudyError):
    """A statistic is undefined on the given data (zero variance, too few users)."""

    category = "degenerate_error"


class EmptySelectionError(SlantStudyError):
    """A selection that must be nonempty came back empty."""

    category = "empty_selection"


class ConvergenceError(SlantStudyError):
    """An iterative solver stopped before reaching its tolerance."""

    category = "convergence_error"

    def __init__(self, message: str, final_delta: float, iterations: int):
        self.final_delta = final_delta
        self.iterations = iterations
        super().__init__(f"{message} (iterations={iterations}, final delta={final_delta:.3e})")


class ParseError(SlantStudyError, ValueError):
    """A file could not be parsed."""

    category = "parse_error"

    def __init__(self, message: str, line_no: Optional[int] = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class EmbeddingLookupError(SlantStudyError, KeyError):
    """Document id absent from a precomputed embedding table."""

    category = "missing_key"

    def __init__(self, doc_id: str):
        self.doc_id = doc_id
        super().__init__(f"no precomputed embedding for document id '{doc_id}'")

    def __str__(self) -> str:
        return self.args[0]


class UnmappedCountryError(SlantStudyError):
    """Corpus countries missing from the region map."""

    category = "configuration_error"

    def __init__(self, codes: Iterable[str]):
        self.codes = sorted(set(codes))
        super().__init__(f"countries missing from region map: {', '.join(self.codes)}")
