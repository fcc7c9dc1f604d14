"""Exception hierarchy shared by every module of the package."""


class SocialLearningError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(SocialLearningError, ValueError):
    """A scalar or vector parameter is outside its admissible range."""


class StructuralError(SocialLearningError, ValueError):
    """Shapes or agent counts of the inputs do not match each other."""


class DegenerateInputError(SocialLearningError, ValueError):
    """The input is well-shaped but numerically unusable (non-PSD, singular, non-finite)."""

    def __init__(self, message, agent=None):
        super().__init__(message)
        self.agent = agent


class CapacityError(SocialLearningError, RuntimeError):
    """A dense construction would exceed its configured size budget."""


class ScenarioError(SocialLearningError, ValueError):
    """A scenario file failed to parse or validate.

    ``line`` is the 1-based line number the problem is anchored to, when known.
    """

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)
