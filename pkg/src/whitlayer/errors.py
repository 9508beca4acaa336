"""Exception types raised across the package."""

import numpy as np


class StructuralError(ValueError):
    """Input arrays have the wrong shape, symmetry or sparsity structure."""


class DomainError(ValueError):
    """Input values fall outside the domain an operation is defined on."""


class NotPositiveDefinite(np.linalg.LinAlgError):
    """A Cholesky pivot was not strictly positive.

    Attributes
    ----------
    column : int
        Index of the column whose pivot failed.
    series : int or None
        Index of the failing matrix within a batch, if batched.
    """

    def __init__(self, column, series=None):
        self.column = int(column)
        self.series = None if series is None else int(series)
        where = f'column {self.column}'
        if self.series is not None:
            where = f'series {self.series}, {where}'
        super().__init__(f'matrix is not positive definite (non-positive pivot at {where})')


class DivergenceError(RuntimeError):
    """Optimization loss blew up; ``diagnostics`` holds the recent history."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DataFormatError(ValueError):
    """A series or parameter file is malformed; ``row`` is the 1-based line number."""

    def __init__(self, message, row=None):
        self.row = row
        super().__init__(message if row is None else f'row {row}: {message}')
