"""
Exception types raised by the NAAS package.

Every error derives from :class:`NAASError`, which carries a ``context`` dictionary. Callers
higher up the stack (the trainer, the CLI) attach their own context while the error
propagates, so a failure deep inside a simulation reports which stage and phase it came from.
The concrete classes also derive from the matching built-in (``ValueError`` or
``RuntimeError``) so generic handlers keep working.
"""


class NAASError(Exception):
    """Base class for all NAAS errors."""

    def __init__(self, message: str, **context):
        super().__init__(message)
        self.message = message
        self.context = dict(context)

    def add_context(self, **context) -> "NAASError":
        """
        Attach additional context without overwriting keys set closer to the failure.

        Returns
        -------
        NAASError
            The same instance, so ``raise err.add_context(...)`` reads naturally.
        """
        for key, value in context.items():
            self.context.setdefault(key, value)
        return self

    def __str__(self):
        if not self.context:
            return self.message
        details = ", ".join(f"{key}={value}" for key, value in self.context.items())
        return f"{self.message} [{details}]"


class InputError(NAASError, ValueError):
    """Invalid argument: wrong dimension, time out of range, unsupported variant."""


class ConfigError(InputError):
    """Invalid experiment configuration."""

    def __init__(self, message: str, source: str = None, line: int = None, key: str = None):
        location = source or "<config>"
        if line is not None:
            location = f"{location}:{line}"
        super().__init__(f"{location}: {message}")
        self.source = source
        self.line = line
        self.key = key


class SimulationError(NAASError, RuntimeError):
    """A simulated state became non-finite."""

    def __init__(self, message: str, step: int, stage: str, **context):
        super().__init__(message, step=step, stage=stage, **context)
        self.step = step
        self.stage = stage


class AdjointError(NAASError, RuntimeError):
    """The lean adjoint became non-finite during the backward solve."""

    def __init__(self, message: str, step: int, **context):
        super().__init__(message, step=step, **context)
        self.step = step


class TrainingError(NAASError, RuntimeError):
    """A regression loss was not finite; ``payload`` holds batch statistics."""

    def __init__(self, message: str, payload: dict = None, **context):
        super().__init__(message, **context)
        self.payload = payload or {}


class BufferStateError(NAASError, RuntimeError):
    """An operation needs state that is not there (empty buffer, all-zero weights)."""


class SinkhornConvergenceWarning(UserWarning):
    """Sinkhorn iterations stopped before the marginal tolerance was reached."""
