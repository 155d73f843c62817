"""Exception hierarchy shared across the package."""


class MMNetError(Exception):
    """Base class for every error raised by mmnet."""


class ShapeError(MMNetError, ValueError):
    pass


class NumericError(MMNetError, ArithmeticError):
    pass


class ConfigError(MMNetError, ValueError):
    pass


class ValidationError(MMNetError, ValueError):
    pass


class MissingParameterError(MMNetError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ContractError(MMNetError, RuntimeError):
    """A caller asked for something the component never provides, e.g. a frozen-layer gradient."""


class StratificationError(MMNetError, ValueError):
    pass


# weight container


class WeightFileError(MMNetError, ValueError):
    pass


class BadMagicError(WeightFileError):
    pass


class VersionMismatchError(WeightFileError):
    pass


class TruncatedFileError(WeightFileError):
    pass


class DuplicateEntryError(WeightFileError):
    pass


# fish database


class UnknownCategoryError(MMNetError, ValueError):
    pass


class MissingHeaderError(MMNetError, ValueError):
    pass


class DuplicateSpeciesError(MMNetError, ValueError):
    pass


class GenusNotFoundError(MMNetError, LookupError):
    pass
