"""FACodec as a scikit-learn style estimator."""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .._validation import ValidationError, check_waveform
from ..codes_io import ATTRIBUTES, UtteranceCodes
from ..config import CodecConfig, CodecTrainConfig
from ..training.checkpoint import load_checkpoint, save_checkpoint
from .network import FACodecNetwork


def compute_bitrate(config: CodecConfig | None = None) -> float:
    """Bits per second: total quantizer levels x log2(codebook size) x frame rate."""
    config = config or CodecConfig()
    return config.total_levels * math.log2(config.codebook_size) * config.sample_rate / config.hop


class FACodec(TransformerMixin, BaseEstimator):
    """Waveforms in, factorized attribute codes plus a timbre vector out.

    ``transform`` maps waveforms to :class:`UtteranceCodes`; ``inverse_transform``
    decodes them.  Every reconstruction goes through the discrete codes, so a
    dumped code file decodes to exactly the same samples.

    Parameters
    ----------
    config : CodecConfig, optional
    train_config : CodecTrainConfig, optional
    random_state : int
        Seed for weight initialization.
    """

    def __init__(self, config=None, train_config=None, random_state=0):
        self.config = config
        self.train_config = train_config
        self.random_state = random_state

    def _config(self) -> CodecConfig:
        return self.config if self.config is not None else CodecConfig()

    def initialize(self):
        """Build untrained weights (deterministic in ``random_state``)."""
        torch.manual_seed(self.random_state)
        self.network_ = FACodecNetwork(self._config()).eval()
        self.speakers_ = []
        self.phones_ = []
        self.n_steps_ = 0
        return self

    def fit(self, X, y=None, out_dir=None, resume_from=None, max_steps=None, callback=None):
        """Train on a :class:`~factorized_tts.data.Dataset`."""
        from ..training.codec_trainer import train_codec

        self.initialize()
        cfg = self.train_config if self.train_config is not None else CodecTrainConfig()
        cfg = dataclasses.replace(cfg, seed=self.random_state) if cfg.seed != self.random_state else cfg
        self.history_ = train_codec(self.network_, X, cfg, out_dir=out_dir, resume_from=resume_from,
                                    max_steps=max_steps, callback=callback)
        self.speakers_ = list(X.speakers)
        self.phones_ = list(X.vocab.symbols) if getattr(X, "vocab", None) is not None else []
        self.n_steps_ = self.history_[-1][0] if self.history_ else 0
        return self

    # waveform-level helpers

    def _wave(self, x, sample_rate: int = 16000) -> torch.Tensor:
        x = check_waveform(x, sample_rate, self._config().sample_rate)
        return torch.from_numpy(np.ascontiguousarray(x)).unsqueeze(0)

    @torch.no_grad()
    def encode(self, x, sample_rate: int = 16000) -> torch.Tensor:
        """Frame latents h [T, D]."""
        check_is_fitted(self, "network_")
        return self.network_.encode(self._wave(x, sample_rate))[0]

    @torch.no_grad()
    def extract_timbre(self, x, sample_rate: int = 16000) -> np.ndarray:
        h = self.encode(x, sample_rate).unsqueeze(0)
        return self.network_.extract_timbre(h)[0].numpy()

    @torch.no_grad()
    def factorize(self, x, sample_rate: int = 16000):
        """Full ``CodecOutput`` of one utterance in inference mode (no detail dropout)."""
        check_is_fitted(self, "network_")
        h = self.network_.encode(self._wave(x, sample_rate))
        return self.network_.factorize(h, training=False)

    def encode_codes(self, x, utt_id: str = "utt", sample_rate: int = 16000) -> UtteranceCodes:
        out = self.factorize(x, sample_rate)
        return UtteranceCodes(utt_id=utt_id, h_t=out.h_t[0].numpy(),
                              **{n: out.codes[n][0].numpy() for n in ATTRIBUTES})

    def transform(self, X, utt_ids=None):
        """Waveforms (or a Dataset) -> list of :class:`UtteranceCodes`."""
        check_is_fitted(self, "network_")
        if hasattr(X, "utterances"):
            utt_ids = [u.utt_id for u in X]
            X = [u.audio for u in X]
        if utt_ids is None:
            utt_ids = [f"utt{i:05d}" for i in range(len(X))]
        return [self.encode_codes(x, uid) for x, uid in zip(X, utt_ids)]

    @torch.no_grad()
    def decode(self, z_p, z_c, z_d, h_t) -> np.ndarray:
        """Latents [T, D] and timbre [D_t] -> waveform of T * hop samples."""
        check_is_fitted(self, "network_")
        as_t = lambda v: torch.as_tensor(np.asarray(v) if not torch.is_tensor(v) else v, dtype=torch.float32)
        y = self.network_.decode(as_t(z_p).unsqueeze(0), as_t(z_c).unsqueeze(0), as_t(z_d).unsqueeze(0),
                                 as_t(h_t).unsqueeze(0))
        return y[0].numpy()

    @torch.no_grad()
    def embed_codes(self, codes):
        """Code grids -> (z_p, z_c, z_d) latents [T, D]."""
        check_is_fitted(self, "network_")
        grids = codes.as_dict() if isinstance(codes, UtteranceCodes) else codes
        batch = {n: torch.as_tensor(np.asarray(grids[n]), dtype=torch.long).unsqueeze(0) for n in ATTRIBUTES}
        return tuple(z[0] for z in self.network_.embed_codes(batch))

    def decode_codes(self, codes: UtteranceCodes, h_t=None, drop_detail: bool = False) -> np.ndarray:
        z_p, z_c, z_d = self.embed_codes(codes)
        if drop_detail:
            z_d = torch.zeros_like(z_d)
        return self.decode(z_p, z_c, z_d, codes.h_t if h_t is None else h_t)

    def inverse_transform(self, X):
        return [self.decode_codes(c) for c in X]

    def reconstruct(self, x, sample_rate: int = 16000) -> np.ndarray:
        return self.decode_codes(self.encode_codes(x, sample_rate=sample_rate))

    def voice_convert(self, source, prompt, sample_rate: int = 16000) -> np.ndarray:
        """Decode the source's prosody, content and detail codes with the prompt's timbre."""
        src = self.encode_codes(source, "source", sample_rate)
        h_t = self.encode_codes(prompt, "prompt", sample_rate).h_t
        return self.decode_codes(src, h_t=h_t)

    @torch.no_grad()
    def predict_speaker(self, x, sample_rate: int = 16000) -> int:
        """Speaker index from the codec's own speaker head on the timbre vector."""
        out = self.factorize(x, sample_rate)
        return int(out.aux_logits["speaker"][0].argmax())

    def compute_bitrate(self) -> float:
        return compute_bitrate(self._config())

    def score(self, X, y=None) -> float:
        """Negative mean mel-cepstral distortion of reconstructions (higher is better)."""
        from ..metrics import mel_cepstral_distortion

        waves = [u.audio for u in X] if hasattr(X, "utterances") else list(X)
        if not waves:
            raise ValidationError("nothing to score")
        return -float(np.mean([mel_cepstral_distortion(w, self.reconstruct(w)) for w in waves]))

    # persistence

    def save(self, path, extra: dict | None = None):
        check_is_fitted(self, "network_")
        payload = dict(model=self.network_.state_dict(), codec_config=dataclasses.asdict(self._config()),
                       speakers=list(self.speakers_), phones=list(getattr(self, "phones_", [])),
                       step=int(self.n_steps_), random_state=self.random_state)
        if extra:
            payload.update(extra)
        save_checkpoint(path, "codec", payload)

    @classmethod
    def load(cls, path) -> "FACodec":
        ckpt = load_checkpoint(path, "codec")
        cfg = CodecConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in ckpt["codec_config"].items()})
        est = cls(config=cfg, random_state=ckpt.get("random_state", 0)).initialize()
        est.network_.load_state_dict(ckpt["model"])
        est.network_.eval()
        est.speakers_ = list(ckpt.get("speakers", []))
        est.phones_ = list(ckpt.get("phones", []))
        est.n_steps_ = int(ckpt.get("step", 0))
        return est
