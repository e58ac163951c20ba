class KeySplatError(Exception):
    pass


class NonOrthonormalInput(KeySplatError):
    def __init__(self, max_deviation: float):
        super().__init__("Rotation matrix is not orthonormal (max deviation {:.3e})".format(max_deviation))
        self.max_deviation = max_deviation


class EmptyTrajectory(KeySplatError):
    pass


class InvalidFactor(KeySplatError):
    pass


class UnknownRecipe(KeySplatError):
    pass


class UnknownKind(KeySplatError):
    pass


class UncoveredFrameIndex(KeySplatError):
    def __init__(self, frame_index: int):
        super().__init__("Frame {} is not covered by any chunk".format(frame_index))
        self.frame_index = frame_index


class InvalidCount(KeySplatError):
    pass


class ShapeMismatch(KeySplatError):
    pass


class NonFiniteLoss(KeySplatError):
    def __init__(self, step: int, loss: float):
        super().__init__("Loss became non-finite ({}) at step {}".format(loss, step))
        self.step = step
        self.loss = loss


class NoValidDepth(KeySplatError):
    pass


class DegenerateConfiguration(KeySplatError):
    def __init__(self, message: str, chunk_index: int = None):
        if chunk_index is not None:
            message = "chunk {}: {}".format(chunk_index, message)
        super().__init__(message)
        self.chunk_index = chunk_index


class CountMismatch(KeySplatError):
    pass


class MissingManifest(KeySplatError):
    pass


class DimensionMismatch(KeySplatError):
    pass


class ConfigError(KeySplatError):
    pass


class StageFailure(KeySplatError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__("Stage '{}' failed: {}".format(stage, cause))
        self.stage = stage
        self.cause = cause
