"""Exception hierarchy shared by every molmix module."""


class MolMixError(Exception):
    """Base class; the CLI turns these into a one-line reason and exit code 1."""


class DimensionError(MolMixError, ValueError):
    pass


class ContractError(MolMixError, ValueError):
    """A documented precondition of an operation does not hold."""


class ConfigError(MolMixError, ValueError):
    pass


class DataError(MolMixError, ValueError):
    pass


class InputError(MolMixError, ValueError):
    pass


class IndexRangeError(MolMixError, IndexError):
    pass


class CheckpointError(MolMixError):
    pass


class TrainingError(MolMixError, ArithmeticError):
    pass
