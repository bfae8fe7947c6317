"""Exception types shared across the package."""


class BuddError(Exception):
    """Base class for all package errors."""


class CubeError(BuddError):
    """Raised for malformed cube directories, manifests or rasters."""


class PipelineError(BuddError):
    """Raised when a tile stage fails; carries the tile id and stage name."""

    def __init__(self, tile_id: str, stage: str, message: str):
        super().__init__(f"tile {tile_id}, stage {stage}: {message}")
        self.tile_id = tile_id
        self.stage = stage
