"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as a
machine-readable prefix (``config: ...``, ``shape: ...``).
"""


class LrxError(Exception):
    category = "error"

    def __str__(self):
        return f"{self.category}: {super().__str__()}"


class ConfigurationError(LrxError, ValueError):
    category = "config"


class ShapeError(LrxError, ValueError):
    category = "shape"


class NumericalError(LrxError, ArithmeticError):
    category = "numerical"


class IngestionError(LrxError, ValueError):
    category = "ingest"


class CorruptionError(LrxError, ValueError):
    category = "corrupt"
