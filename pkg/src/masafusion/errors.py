"""Exception hierarchy shared by every module."""


class MasaError(Exception):
    """Base class for all library errors."""


class ShapeError(MasaError, ValueError):
    pass


class ConfigError(MasaError, ValueError):
    pass


class StepError(MasaError, IndexError):
    pass


class ContractError(MasaError, ValueError):
    pass


class EncodingError(MasaError, ValueError):
    pass


class InputError(MasaError, ValueError):
    pass


class HookError(MasaError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class DivergenceError(MasaError, RuntimeError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
