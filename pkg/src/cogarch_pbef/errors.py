"""Exception hierarchy shared by the library and the command line front end."""


class CogarchError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(CogarchError, ValueError):
    """Invalid model or parameter specification (CLI exit code 2)."""


class ConfigError(CogarchError, ValueError):
    """Malformed or inconsistent configuration file (CLI exit code 2)."""


class NumericalError(CogarchError, ArithmeticError):
    """A numerical procedure could not produce a valid result (CLI exit code 3)."""


class MomentError(NumericalError):
    """A requested moment does not exist or was not tabulated."""
