"""
异常定义。

ValidationError 对应命令行退出码 2（输入/配置/文件格式错误），
SimulationError 对应退出码 3（运行时失败）。
"""


class IldvsError(Exception):
    """所有异常的基类"""


class ValidationError(IldvsError, ValueError):
    pass


class SimulationError(IldvsError, RuntimeError):
    pass


# geom3d / perception

class BehindCamera(SimulationError):
    pass


class NoDetection(SimulationError):
    pass


class LabelNotFound(SimulationError):
    pass


class UnitMismatch(ValidationError):
    pass


# servo

class NonPositiveDepth(ValidationError):
    pass


class SingularSystem(SimulationError):
    pass


class DegenerateDirection(SimulationError):
    pass


# imitator

class NumericalBlowup(SimulationError):

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class SegmentTooLong(ValidationError):
    pass


class CheckpointFormatError(ValidationError):
    pass


# simworld / harness

class WorkspaceViolation(SimulationError):
    pass


class ObjectOutOfView(SimulationError):
    pass


class NoGroundTruth(ValidationError):
    pass


class DemoFormatError(ValidationError):

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number
