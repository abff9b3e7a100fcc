"""Datasets, synthetic worlds, configuration, evaluation and the command line."""

from .config import RunConfig, load_config, write_config
from .data import DatasetRecord, SynthWorld, build_roster, ingest, split, synth_world, write_dataset
from .evaluate import RunReport, evaluate, fit, solo_accuracies, specialist_rate, training_samples, without_timing

__all__ = ["DatasetRecord", "RunConfig", "RunReport", "SynthWorld", "build_roster", "evaluate", "fit", "ingest",
           "load_config", "solo_accuracies", "specialist_rate", "split", "synth_world", "training_samples",
           "without_timing", "write_config", "write_dataset"]
