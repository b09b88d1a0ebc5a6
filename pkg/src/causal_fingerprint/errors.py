"""Exception hierarchy.

Input problems (bad files, bad shapes, bad indices) derive from
:class:`InputError`; failures of the numerics derive from
:class:`NumericalError`. The CLI maps the two families onto exit codes 1 and 2.
"""


class InputError(ValueError):
    """Invalid input data, configuration or file."""


class LoadError(InputError):
    """A recording file could not be parsed.

    ``line`` is the 1-based line number in the file (the header is line 1),
    ``column`` the 1-based field index when the problem is a single cell.
    """

    def __init__(self, message, path=None, line=None, column=None):
        self.path = path
        self.line = line
        self.column = column
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class NumericalError(ArithmeticError):
    """A computation could not produce a finite, well-defined result."""


class RankDeficiencyError(NumericalError):
    def __init__(self, row, rank, n_regressors):
        self.row = row
        self.rank = rank
        self.n_regressors = n_regressors
        super().__init__(
            f"state row {row}: regressor rank {rank} < {n_regressors} unknowns "
            "and ridge_lambda = 0; use a positive ridge or a longer recording"
        )


class InstabilityError(NumericalError):
    """Simulated state blew up past the guard threshold."""


class NonFiniteLossError(NumericalError):
    def __init__(self, graph_id, value):
        self.graph_id = graph_id
        self.value = value
        super().__init__(f"non-finite loss {value!r} on graph {graph_id!r}")
