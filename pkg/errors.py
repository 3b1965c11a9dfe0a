"""Error taxonomy shared by every cribra module.

ConfigError subclasses are contract or configuration violations (CLI exit 1).
DataError subclasses are failures of a single data item (CLI exit 2 when the
batch only partially succeeds).
"""

from typing import Iterable


class CribraError(Exception):
    exit_code = 1


class ConfigError(CribraError):
    exit_code = 1


class DataError(CribraError):
    exit_code = 2


# image_io
class UnreadableFile(DataError):
    def __init__(self, path: str, reason: str = ""):
        self.path = path
        super().__init__(f"Cannot read {path}" + (f": {reason}" if reason else ""))


class UnsupportedPixelFormat(DataError):
    def __init__(self, path: str, mode: str):
        self.path = path
        self.mode = mode
        super().__init__(f"Unsupported pixel format {mode!r} in {path}")


class NonSquareTile(ConfigError):
    pass


class UpscaleRequested(ConfigError):
    pass


class InvalidTheta(ConfigError):
    def __init__(self, theta: float, allowed: Iterable[float]):
        self.theta = theta
        self.allowed = tuple(allowed)
        super().__init__(f"Rotation {theta} not in {self.allowed}")


# segmentation / features
class DegenerateImage(DataError):
    pass


class EmptyInput(DataError):
    pass


class NegativeValue(DataError):
    pass


class NoNuclei(DataError):
    pass


class ShapeMismatch(ConfigError):
    pass


class TooFewPoints(DataError):
    def __init__(self, n: int, needed: int):
        self.n = n
        self.needed = needed
        super().__init__(f"Need at least {needed} points, got {n}")


class DegenerateCollinear(DataError):
    pass


# classifiers
class SingleClassInput(DataError):
    pass


class NonFiniteFeature(DataError):
    pass


class DimensionMismatch(ConfigError):
    def __init__(self, expected: int, got: int):
        self.expected = expected
        self.got = got
        super().__init__(f"DimensionMismatch: model expects width {expected}, got {got}")


class NonFiniteLoss(DataError):
    def __init__(self, epoch: int, lr: float):
        self.epoch = epoch
        self.lr = lr
        super().__init__(
            f"Loss became non-finite at epoch {epoch} with lr={lr}; try a lower --lr"
        )


class MissingEmbedding(DataError):
    def __init__(self, tile_id: str, path: str):
        self.tile_id = tile_id
        self.path = path
        super().__init__(f"Tile {tile_id!r} missing from embedding file {path}")


class WidthMismatch(ConfigError):
    pass


# evaluation
class PatientOverlap(ConfigError):
    def __init__(self, patients: Iterable[str]):
        self.patients = tuple(sorted(patients))
        super().__init__("Patients assigned to more than one set: " + ", ".join(self.patients))


class UnassignedPatient(ConfigError):
    def __init__(self, patients: Iterable[str], reason: str = ""):
        self.patients = tuple(sorted(patients))
        msg = reason or "Patients not assigned to any set: " + ", ".join(self.patients)
        super().__init__(msg)


class InsufficientTiles(DataError):
    def __init__(self, role: str, label: str, available: int, needed: int):
        self.role = role
        self.label = label
        self.available = available
        self.needed = needed
        super().__init__(
            f"InsufficientTiles: {role}/{label} has {available} tiles, needs {needed}"
        )


# synthgen
class InfeasibleGeometry(DataError):
    pass


# file formats
class ManifestError(ConfigError):
    pass


class FormatVersionMismatch(ConfigError):
    pass
