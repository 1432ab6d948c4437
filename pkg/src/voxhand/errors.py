"""Exception hierarchy shared by all voxhand modules."""


class VoxhandError(ValueError):
    pass


class EmptyForeground(VoxhandError):
    pass


class InvalidSpec(VoxhandError):
    pass


class ShapeMismatch(VoxhandError):
    pass


class TapeMismatch(VoxhandError):
    pass


class InvalidFraction(VoxhandError):
    pass


class EmptyDataset(VoxhandError):
    pass


class InvalidJointCount(VoxhandError):
    pass


class DimensionMismatch(VoxhandError):
    pass


class DegenerateFrame(VoxhandError):
    pass


class MissingJoint(VoxhandError):
    pass


class InvalidBounds(VoxhandError):
    pass


class ParseError(VoxhandError):
    def __init__(self, message, line=None, token=None):
        self.line = line
        self.token = token
        where = f"line {line}" if line is not None else "end of input"
        if token is not None:
            where += f", token {token!r}"
        super().__init__(f"{message} ({where})")


class ChannelMismatch(ParseError):
    pass


class InvalidScale(VoxhandError):
    pass


class EmptyPoseSource(VoxhandError):
    pass


class JointMismatch(VoxhandError):
    pass


class EmptyEvaluation(VoxhandError):
    pass


class FormatError(VoxhandError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


class PipelineError(VoxhandError):
    """Wraps a failure inside a pipeline stage; ``stage`` names it."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
