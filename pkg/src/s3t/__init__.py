"""Self-supervised Swin-T pretraining on constant-Q spectrograms with momentum contrast."""
from .audio import AudioClip, CqtConfig, Spectrogram, compress_time, cqt, resample
from .augment import AugmentConfig, AugmentedPair, augment_pair, replay
from .backbone import SwinConfig, SwinTransformer
from .moco import MoCoConfig, MoCoState, info_nce, init_state
from .preproc import ModelInput, frequency_tile, preprocess, time_fold

__version__ = "0.1.0"

__all__ = [
    "AudioClip", "CqtConfig", "Spectrogram", "compress_time", "cqt", "resample",
    "AugmentConfig", "AugmentedPair", "augment_pair", "replay",
    "SwinConfig", "SwinTransformer",
    "MoCoConfig", "MoCoState", "info_nce", "init_state",
    "ModelInput", "frequency_tile", "preprocess", "time_fold",
]
