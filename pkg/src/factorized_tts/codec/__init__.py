from .estimator import FACodec, compute_bitrate
from .network import ATTRIBUTES, CodecOutput, FACodecNetwork

__all__ = ["ATTRIBUTES", "CodecOutput", "FACodec", "FACodecNetwork", "compute_bitrate"]
