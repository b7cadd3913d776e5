"""Python bindings of the icod C++ core."""

from ._core import (
    ArgumentError,
    ConfigError,
    Dataset,
    IntegrityError,
    Model,
    ParseError,
    VersionError,
    iou,
    make_dataset,
    mean_ap,
    nms,
    run_cli,
    smooth_l1,
)

__all__ = [
    "ArgumentError",
    "ConfigError",
    "Dataset",
    "IntegrityError",
    "Model",
    "ParseError",
    "VersionError",
    "iou",
    "make_dataset",
    "mean_ap",
    "nms",
    "run_cli",
    "smooth_l1",
]
