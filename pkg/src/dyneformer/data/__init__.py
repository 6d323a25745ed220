from .io import CsvSchema, ingest_long_csv, load_dataset, read_statics_csv, save_dataset
from .preprocess import (
    Normalizer,
    Prepared,
    Split,
    WindowSample,
    WindowSet,
    chronological_split,
    fit_apply_normalizer,
    fit_normalizers,
    make_time_marks,
    make_windows,
    prepare_windows,
    resample_hourly_max,
)
from .synthetic import GeneratorConfig, archetype_curve, generate_synthetic_dataset, split_bounds
from .types import BEHAVIOR_TAGS, Dataset, Event, StaticContext, WorkloadSeries

__all__ = [
    "BEHAVIOR_TAGS", "CsvSchema", "Dataset", "Event", "GeneratorConfig", "Normalizer", "Prepared",
    "Split", "StaticContext", "WindowSample", "WindowSet", "WorkloadSeries", "archetype_curve",
    "chronological_split", "fit_apply_normalizer", "fit_normalizers", "generate_synthetic_dataset",
    "ingest_long_csv", "load_dataset", "make_time_marks", "make_windows", "prepare_windows",
    "read_statics_csv", "resample_hourly_max", "save_dataset", "split_bounds",
]
