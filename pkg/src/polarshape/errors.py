"""Exception hierarchy shared by the pipeline.

Every error carries a short machine-readable ``category`` so the CLI can map
failures to distinct exit codes.
"""


class PolarshapeError(Exception):
    category = "error"


class InputError(PolarshapeError):
    """Malformed or inconsistent input data (dimension mismatch, bad ranges)."""

    category = "input"


class UnphysicalStokesError(PolarshapeError):
    """Stokes components violate degree-of-polarization <= 1."""

    category = "unphysical-stokes"


class ObjParseError(PolarshapeError):
    """OBJ file could not be parsed; message names the offending line."""

    category = "parse"

    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = path
        self.line_no = line_no


class SceneError(PolarshapeError):
    """Scene violates a geometric precondition (e.g. behind the near plane)."""

    category = "scene"


class MissingAssetError(PolarshapeError):
    category = "missing-asset"


class FitDivergenceError(PolarshapeError):
    """Optimization loss increased for too many consecutive iterations."""

    category = "fit-divergence"


class ConfigError(PolarshapeError):
    category = "config"
