"""Exception types shared across the package.

The CLI maps these onto exit codes: config problems exit 2, data/format
problems exit 3, numeric contract violations exit 4.
"""


class ChiplabError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(ChiplabError):
    """An operation was called with arguments that break its precondition."""


class ConfigError(ChiplabError):
    """An experiment config file or flag combination is invalid."""


class FormatError(ChiplabError):
    """A binary artifact (weights, chips, cache, pruned model) is malformed.

    ``category`` is machine-readable: one of "magic", "version", "header",
    "truncation", "length", "dims".
    """

    def __init__(self, category: str, message: str, path=None):
        self.category = category
        self.path = path
        suffix = f" ({path})" if path is not None else ""
        super().__init__(f"{category}: {message}{suffix}")
