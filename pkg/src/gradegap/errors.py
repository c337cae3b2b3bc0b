"""Exception types raised across the package."""


class GradeGapError(Exception):
    """Base class for validation errors (CLI exit code 1)."""


class SchemaError(GradeGapError):
    pass


class DuplicateKeyError(GradeGapError):
    def __init__(self, table, keys):
        self.table = table
        self.keys = list(keys)
        shown = ", ".join(str(k) for k in self.keys[:10])
        more = "" if len(self.keys) <= 10 else f" (+{len(self.keys) - 10} more)"
        super().__init__(f"duplicate key tuples in {table}: {shown}{more}")


class DegenerateCellError(GradeGapError):
    def __init__(self, cell, column=None):
        self.cell = cell
        self.column = column
        what = f" column {column!r}" if column else ""
        super().__init__(f"degenerate (zero-variance) cell {cell}{what}")


class MissingHistoryError(GradeGapError):
    pass


class RankDeficiencyError(GradeGapError):
    def __init__(self, columns, message=None):
        self.columns = list(columns)
        super().__init__(message or f"collinear columns: {', '.join(self.columns)}")


class ConvergenceError(GradeGapError):
    pass


class UnscorableError(GradeGapError):
    pass


class CalibrationError(GradeGapError):
    pass


class ConfigError(GradeGapError):
    pass
