"""Exception hierarchy shared across the package.

The CLI maps these classes onto distinct exit codes, so new failure
modes should subclass one of the three categories below rather than
raising bare ValueError.
"""


class RuleTppError(Exception):
    """Base class for all package errors."""


class ConfigError(RuleTppError):
    """Invalid configuration value or malformed config file."""


class CorpusFormatError(RuleTppError):
    """A corpus / catalog / rule file failed to parse.

    Carries the offending line number when one is known.
    """

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        prefix = ""
        if path is not None:
            prefix += f"{path}"
        if line is not None:
            prefix += f":{line}"
        super().__init__(f"{prefix}: {message}" if prefix else message)


class ValidationError(RuleTppError):
    """Data violated an invariant (unsorted times, empty target list, ...)."""


class NumericsError(RuleTppError):
    """A numerical routine produced a non-finite or impossible value."""
