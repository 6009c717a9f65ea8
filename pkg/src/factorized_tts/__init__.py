"""Factorized speech codec and factorized masked discrete diffusion TTS at desk scale."""

from .codec.estimator import FACodec, compute_bitrate
from .codes_io import UtteranceCodes, read_codes, write_codes
from .config import CodecConfig, CodecTrainConfig, DiffusionTrainConfig, LossWeights, OptimizerConfig, TTSConfig
from .data import AlignmentRecord, Dataset, ingest, read_wav, write_wav
from .diffusion import cfg_combine, cfg_train_drop, forward_mask, mask_ratio, masked_ce_loss, remask_step, sample
from .fvq import FVQBranch, quantize_vector
from .tts.pipeline import FactorizedTTS, PromptAudio, SynthesisRequest

__version__ = "0.1.0"

__all__ = [
    "AlignmentRecord", "CodecConfig", "CodecTrainConfig", "Dataset", "DiffusionTrainConfig", "FACodec",
    "FVQBranch", "FactorizedTTS", "LossWeights", "OptimizerConfig", "PromptAudio", "SynthesisRequest",
    "TTSConfig", "UtteranceCodes", "cfg_combine", "cfg_train_drop", "compute_bitrate", "forward_mask",
    "ingest", "mask_ratio", "masked_ce_loss", "quantize_vector", "read_codes", "read_wav", "remask_step",
    "sample", "write_codes", "write_wav",
]
