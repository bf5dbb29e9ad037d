"""Synthetic data and manifest-based datasets."""

from .synth import (NEUTRAL, GroundTruth, SynthConfig, SynthDataset, build_ground_truth,
                    generate_dataset, generate_sample, template_mesh)

__all__ = [name for name in dir() if not name.startswith("_")]
