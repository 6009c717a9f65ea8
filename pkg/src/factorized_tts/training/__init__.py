from .checkpoint import MetricsLog, load_checkpoint, read_metrics, save_checkpoint
from .losses import GENERATOR_TERMS, codec_loss_terms, codec_total_loss, lr_at, multi_scale_mel_loss

__all__ = ["GENERATOR_TERMS", "MetricsLog", "codec_loss_terms", "codec_total_loss", "load_checkpoint",
           "lr_at", "multi_scale_mel_loss", "read_metrics", "save_checkpoint"]
