"""
Exception hierarchy shared by the engine modules.

Every error carries the CLI exit code it maps to:
2 = usage, 3 = data, 4 = internal (anything not listed here).
"""

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4


class HypergraphMatchingError(Exception):
    exit_code = EXIT_DATA


class ConfigError(HypergraphMatchingError, ValueError):
    exit_code = EXIT_USAGE


class MissingGroundTruthError(HypergraphMatchingError, KeyError):
    exit_code = EXIT_USAGE

    def __str__(self):
        # KeyError quotes its message otherwise
        return Exception.__str__(self)


class InvalidLabelError(HypergraphMatchingError, ValueError):
    pass


class ModelSizeError(HypergraphMatchingError, ValueError):
    pass


class LabelingMismatchError(HypergraphMatchingError, ValueError):
    pass


class NumericalDomainError(HypergraphMatchingError, ArithmeticError):
    pass


class SizeLimitError(HypergraphMatchingError, ValueError):
    pass


class DegenerateDescriptorError(HypergraphMatchingError, ValueError):
    pass


class MissingDescriptorsError(HypergraphMatchingError, ValueError):
    pass


class EmptyPointSetError(HypergraphMatchingError, ValueError):
    pass


class DegenerateTriangleError(HypergraphMatchingError, ValueError):
    pass


class BundleError(HypergraphMatchingError, OSError):
    pass


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, HypergraphMatchingError):
        return exc.exit_code
    if isinstance(exc, (FileNotFoundError, ValueError, KeyError)):
        return EXIT_DATA
    return EXIT_INTERNAL
