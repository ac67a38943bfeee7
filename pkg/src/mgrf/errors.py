"""Exception hierarchy shared by all modules."""


class MgrfError(Exception):
    """Base class for every error raised by this package."""


class NotPositiveDefinite(MgrfError, ValueError):
    def __init__(self, column, pivot=None):
        self.column = column
        self.pivot = pivot
        msg = f"matrix is not positive definite (pivot at permuted column {column}"
        if pivot is not None:
            msg += f", value {pivot:.3e}"
        super().__init__(msg + ")")


class DimensionMismatch(MgrfError, ValueError):
    pass


class DegenerateDomain(MgrfError, ValueError):
    pass


class PointOutsideMesh(MgrfError, ValueError):
    def __init__(self, index):
        self.index = index
        super().__init__(f"location {index} is outside the triangulated region")


class NonPositiveInput(MgrfError, ValueError):
    pass


class RhoTooExtreme(MgrfError, ValueError):
    pass


class OutOfSupport(MgrfError, ValueError):
    pass


class AtBaseModel(MgrfError, ValueError):
    pass


class NoSolution(MgrfError, ValueError):
    pass


class EmptyInput(MgrfError, ValueError):
    pass


class SingularConditional(MgrfError, ValueError):
    pass


class RankDeficientDesign(MgrfError, ValueError):
    pass


class NonPositiveSigma(MgrfError, ValueError):
    pass


class MissingColumn(MgrfError, KeyError):
    def __init__(self, column):
        self.column = column
        super().__init__(f"missing column {column!r}")

    def __str__(self):
        return self.args[0]


class UnparseableRow(MgrfError, ValueError):
    def __init__(self, line, detail=""):
        self.line = line
        super().__init__(f"cannot parse line {line}" + (f": {detail}" if detail else ""))


class ZeroVariance(MgrfError, ValueError):
    def __init__(self, variable):
        self.variable = variable
        super().__init__(f"variable {variable!r} has zero variance")


class ChainError(MgrfError, RuntimeError):
    """A sampler step failed; carries the iteration index."""

    def __init__(self, iteration, cause):
        self.iteration = iteration
        self.cause = cause
        super().__init__(f"iteration {iteration}: {cause}")


class ConfigError(MgrfError, ValueError):
    pass
