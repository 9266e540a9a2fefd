"""loadforge: training-data loading pipelines, a record container format and a
benchmark harness comparing reader and allocation strategies."""

__version__ = "0.1.0"

from .augment import AugmentChain, AugmentPreset, AugmentTransformer, apply_chain, preset_chain
from .pipeline import (
    Batch,
    HostOnly,
    Pipeline,
    PipelineConfig,
    Shared,
    build_pipeline,
    reference_epoch,
)
from .record_format import SamplePayload, open_container, write_container
from .sample_store import ContainerSource, FilePerSampleSource, Sample, scan_directory
from .trainer import MiniBatchLogisticRegression, TrainConfig, train_epoch

__all__ = [
    "AugmentChain", "AugmentPreset", "AugmentTransformer", "Batch", "ContainerSource",
    "FilePerSampleSource", "HostOnly", "MiniBatchLogisticRegression", "Pipeline",
    "PipelineConfig", "Sample", "SamplePayload", "Shared", "TrainConfig", "apply_chain",
    "build_pipeline", "open_container", "preset_chain", "reference_epoch", "scan_directory",
    "train_epoch", "write_container",
]
