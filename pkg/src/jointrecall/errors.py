"""Exception types shared across the package."""


class JointRecallError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(JointRecallError, ValueError):
    pass


class InvalidInputError(JointRecallError, ValueError):
    pass


class ResourceError(JointRecallError, RuntimeError):
    """A bounded search (rejection sampling, hash retries) ran out of budget."""


class TrainingDivergenceError(JointRecallError, FloatingPointError):
    pass
