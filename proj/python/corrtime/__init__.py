"""Correction-timing models, goal inference and synthetic benchmarks."""

import json

from ._core import (
    ConfigError,
    DivergenceError,
    IoError,
    SpatialModels,
    TimingModel,
    combined_posterior_onset,
    config_hash,
    discounted_legibility,
    f1_from_counts,
    feature_names,
    featurize,
    kld,
    pdf_from_cdf,
    predict_correction_time,
    read_episodes,
    when_posterior,
    where_posterior_release,
)

__all__ = [
    "ConfigError",
    "DivergenceError",
    "IoError",
    "SpatialModels",
    "TimingModel",
    "combined_posterior_onset",
    "config_hash",
    "discounted_legibility",
    "f1_from_counts",
    "feature_names",
    "featurize",
    "kld",
    "load_episodes",
    "pdf_from_cdf",
    "predict_correction_time",
    "when_posterior",
    "where_posterior_release",
]


def load_episodes(dataset_dir):
    """Episodes of a simulated dataset directory as dicts."""
    return [json.loads(line) for line in read_episodes(str(dataset_dir))]
