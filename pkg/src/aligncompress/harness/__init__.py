"""Synthetic data, configuration and the experiment grid."""

from .config import ALL_SUBSETS, ExperimentConfig, config_from_dict, load_config
from .datasets import Dataset, gen_blobs, gen_seg_blobs, rasterize_ellipse
from .experiment import (
    aggregate,
    compare_reports,
    make_dataset,
    read_csv,
    run_cell,
    run_experiment,
    train_reference,
    write_csv,
)
