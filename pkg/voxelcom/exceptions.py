class VoxelcomError(Exception):
    """Base class for errors raised by the simulator."""


class ShapeError(VoxelcomError, ValueError):
    def __init__(self, op, *shapes, detail=None):
        self.op = op
        self.shapes = shapes
        rendered = " and ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: incompatible shapes {rendered}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class NumericError(VoxelcomError, ArithmeticError):
    """Non-finite values appeared, or an optimisation diverged."""


class FrameError(VoxelcomError):
    """A received frame or bitstream failed its integrity check."""


class FormatError(VoxelcomError):
    """A file on disk does not have the expected binary layout."""


class PrerequisiteError(VoxelcomError):
    def __init__(self, missing, command):
        self.missing = missing
        self.command = command
        super().__init__(f"{missing} not found; run `manage.py {command}` first")
