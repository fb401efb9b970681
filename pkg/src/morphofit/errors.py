"""Exception hierarchy.

Every error raised by the library derives from :class:`MorphofitError`.
``exit_code`` is what the CLI returns when the error escapes a command.
"""


class MorphofitError(Exception):
    exit_code = 2


class ParseError(MorphofitError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SerializationError(MorphofitError):
    pass


class MeshQueryError(MorphofitError):
    pass


class ParameterError(MorphofitError):
    pass


class GenerationError(MorphofitError):
    pass


class AlignmentError(MorphofitError):
    pass


class ConfigError(MorphofitError):
    exit_code = 1


class AssemblyError(MorphofitError):
    pass


class SingularSystemError(MorphofitError):
    exit_code = 3


class RegistrationError(MorphofitError):
    exit_code = 3


class SpecError(MorphofitError):
    pass


class TopologyMismatchError(MorphofitError):
    pass


class FitError(MorphofitError):
    exit_code = 3


class MetricError(MorphofitError):
    pass


class PlanError(MorphofitError):
    pass


class EvaluationError(MorphofitError):
    pass


class OracleError(MorphofitError):
    pass


class RecipeError(MorphofitError):
    pass
