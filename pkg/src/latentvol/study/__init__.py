from .png import encode_gray_png, window_to_bytes
from .server import create_app, register_volume_dir
from .store import (
    CATEGORIES,
    DEFAULT_LABELS,
    OPTIONS,
    AggregateReport,
    RatingRecord,
    StudyDefinition,
    StudyStore,
)

__all__ = [
    "AggregateReport",
    "CATEGORIES",
    "DEFAULT_LABELS",
    "OPTIONS",
    "RatingRecord",
    "StudyDefinition",
    "StudyStore",
    "create_app",
    "encode_gray_png",
    "register_volume_dir",
    "window_to_bytes",
]
