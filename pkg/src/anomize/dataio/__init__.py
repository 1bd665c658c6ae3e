"""Feature files, manifests, checkpoints and the synthetic benchmark."""
from .checkpoint import (Checkpoint, CheckpointCorruptError, CheckpointMigrationError, load_checkpoint,
                         restore_model, save_checkpoint)
from .features import FeatureFormatError, read_feature_file, write_feature_file
from .manifest import (Dataset, ManifestError, ProtocolError, VideoRecord, load_manifest, rle_decode,
                       rle_encode)
from .synth import SynthCorpus, SynthSpec, SynthSpecError, generate_synthetic_benchmark

__all__ = [
    "Checkpoint", "CheckpointCorruptError", "CheckpointMigrationError", "load_checkpoint", "restore_model",
    "save_checkpoint", "FeatureFormatError", "read_feature_file", "write_feature_file", "Dataset",
    "ManifestError", "ProtocolError", "VideoRecord", "load_manifest", "rle_decode", "rle_encode",
    "SynthCorpus", "SynthSpec", "SynthSpecError", "generate_synthetic_benchmark",
]
