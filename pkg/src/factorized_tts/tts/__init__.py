from .modules import PhonemeEncoder, TokenDenoiser, length_regulate, phoneme_pool
from .pipeline import (FactorizedTTS, PromptAudio, SynthesisRequest, SynthesisResult, generate_attribute,
                       generate_duration, generate_phone_prosody)

__all__ = ["FactorizedTTS", "PhonemeEncoder", "PromptAudio", "SynthesisRequest", "SynthesisResult",
           "TokenDenoiser", "generate_attribute", "generate_duration", "generate_phone_prosody",
           "length_regulate", "phoneme_pool"]
