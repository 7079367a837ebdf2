"""NavFormer: rotation-aware transformer forecasting from magnetometer triads.

Modules
-------
linalg3    3x3 symmetric eigensolver and rotation utilities
features   rotation-invariant features, harmonics, variate embedding, state summary
spd        Gram spectra, canonical SPD modulation, stability diagnostics
engine     float64 reverse-mode autodiff, Adam, checkpoints
model      the patch-channel grid transformer
data       synthetic flights, CSV ingestion, splits and normalization
harness    training, evaluation and experiment protocols
"""
from .data import (
    FlightRecord, Normalization, Schema, SyntheticSpec, WindowSet, default_schema,
    generate_synthetic, ingest_csv, split_and_window, subsample_fewshot,
)
from .errors import NavFormerError
from .features import (
    ChannelPartition, InvariantFeatures, TriadWindow, augment, compute_harmonics, compute_phi,
    invariant_features, phi_from_triads, state_summary, variate_embed,
)
from .harness import (
    ExperimentConfig, MetricsReport, evaluate, format_summary, gramstats, load_config, run_ablation,
    run_fewshot, run_standard, run_zeroshot, train,
)
from .linalg3 import SymEig3, apply_rotation, eig_sym3, random_rotation
from .model import ModelConfig, NavFormer, navformer_forward, patchify
from .spd import (
    GramSpectrum, ScaleMlp, SpdModulator, aggregate_gram, build_modulator, modulate,
    perturbation_angles, scales_from_state, verify_proposition1,
)

__version__ = "0.1.0"
