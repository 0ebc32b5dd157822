"""Failure types shared across modules."""


class NumericFailure(RuntimeError):
    """A non-finite value appeared where finite math was required.

    ``context`` carries the location (step, latent index, iteration, ...)
    so long runs can be diagnosed from the error alone.
    """

    def __init__(self, message: str, **context):
        self.context = dict(context)
        if context:
            detail = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({detail})"
        super().__init__(message)


class TrainingFailure(RuntimeError):
    """Training diverged (NaN/Inf loss) or otherwise failed to make progress."""
