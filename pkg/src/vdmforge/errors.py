"""Exception hierarchy shared by all vdmforge modules.

The CLI maps :class:`DataError` subclasses to exit code 3 and
:class:`NumericalError` subclasses to exit code 4.
"""

from __future__ import annotations


class VdmForgeError(Exception):
    """Base class for every error raised by the library."""

    exit_code = 3

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "message": str(self)}


class DataError(VdmForgeError, ValueError):
    """Invalid input data (bad mesh, bad file, violated precondition)."""


class MeshError(DataError):
    pass


class FormatError(DataError):
    """A file could not be parsed or failed a format check."""

    def __init__(self, message: str, *, line: int | None = None, offset: int | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if offset is not None:
            loc.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.line = line
        self.offset = offset


class NonManifoldError(MeshError):
    def __init__(self, edge: tuple[int, int], count: int):
        super().__init__(f"non-manifold edge {edge} shared by {count} triangles")
        self.edge = edge
        self.count = count


class OnSurfaceError(DataError):
    def __init__(self, point_index: int, triangle: int, distance: float):
        super().__init__(
            f"query {point_index} lies on triangle {triangle} (distance {distance:.3g}); "
            "perturb the query before evaluating the winding number"
        )
        self.point_index = point_index
        self.triangle = triangle


class LassoError(DataError):
    pass


class SeparationError(LassoError):
    """The voxel loop does not split the surface into two regions."""


class FlattenError(DataError):
    pass


class VdmFormatError(FormatError):
    pass


class NumericalError(VdmForgeError, ArithmeticError):
    exit_code = 4


class SolverError(NumericalError):
    pass


class NonFiniteError(NumericalError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} at step {step}")
        self.step = step


class ConvergenceError(NumericalError):
    def __init__(self, message: str, final_loss: float):
        super().__init__(f"{message} (final loss {final_loss:.6g})")
        self.final_loss = final_loss
