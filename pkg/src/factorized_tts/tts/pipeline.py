"""Factorized generation: phoneme-level prosody, duration, then frame-level prosody, content and detail.

Timbre is never generated; it is read from the (timbre) prompt by the codec.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .._validation import OrderingError, SynthesisError, ValidationError, check_durations, check_tokens
from ..codes_io import UtteranceCodes
from ..config import DiffusionTrainConfig, TTSConfig
from ..diffusion import CountingDenoiser, MaskSchedule, sample, temperature_schedule
from .modules import FRAME_SLOTS, PhonemeEncoder, TokenDenoiser, frame_slot_conditions, length_regulate, phoneme_pool

STAGES = ("ph_prosody", "duration", "prosody", "content", "detail")
ATTRIBUTE_SLOTS = {
    "prosody": ("prosody0",),
    "content": ("content0", "content1"),
    "detail": ("detail0", "detail1", "detail2"),
}


class TTSNetworks(nn.Module):
    """Phoneme encoder plus the phone-level and frame-level token denoisers."""

    def __init__(self, config: TTSConfig, num_phones: int, codebook_size: int = 1024):
        super().__init__()
        c = config
        self.codebook_size = codebook_size
        self.duration_classes = c.max_duration + 1
        self.encoder = PhonemeEncoder(num_phones, c.dim, c.phone_encoder_layers, c.heads, c.ffn_mult,
                                      c.phone_encoder_kernel, c.dropout)
        self.phone_net = TokenDenoiser(
            {"ph_prosody": codebook_size, "duration": self.duration_classes}, {"ph_prosody": codebook_size},
            c.dim, c.phone_level_layers, c.heads, c.ffn_mult, c.ffn_kernel, dropout=c.dropout)
        self.frame_net = TokenDenoiser(
            {s: codebook_size for s in FRAME_SLOTS}, {s: codebook_size for s in FRAME_SLOTS[:-1]},
            c.dim, c.frame_level_layers, c.heads, c.ffn_mult, c.ffn_kernel, dropout=c.dropout)

    def net_for(self, slot: str) -> TokenDenoiser:
        return self.phone_net if slot in self.phone_net.slots else self.frame_net


def network_denoiser(net: TokenDenoiser, slot: str):
    """Adapt a batched network to the sampler's ``(tokens, prompt_len, cond, t)`` signature."""
    def denoise(tokens, prompt_len, cond, t):
        feats = cond["features"].unsqueeze(0)
        codes = {k: v.unsqueeze(0) for k, v in cond.get("codes", {}).items()}
        logits = net(slot, tokens.unsqueeze(0), torch.tensor([prompt_len]), torch.tensor([float(t)]), feats, codes)
        return logits[0]
    return denoise


@dataclass
class PromptAudio:
    """A prompt waveform, optionally with its phoneme alignment (ids and frame durations)."""

    waveform: np.ndarray
    phonemes: np.ndarray | None = None
    durations: np.ndarray | None = None
    sample_rate: int = 16000

    @property
    def aligned(self) -> bool:
        return self.phonemes is not None and self.durations is not None


@dataclass
class SynthesisRequest:
    phonemes: np.ndarray
    prompt: PromptAudio
    prosody_prompt: PromptAudio | None = None
    duration_prompt: PromptAudio | None = None
    timbre_prompt: PromptAudio | None = None
    alpha: float = 1.0
    steps: int = 4
    seed: int = 0

    def resolved(self):
        """Attribute prompts with unset entries falling back to ``prompt``."""
        return dict(prosody=self.prosody_prompt or self.prompt, duration=self.duration_prompt or self.prompt,
                    timbre=self.timbre_prompt or self.prompt, content=self.prompt, detail=self.prompt)


@dataclass
class FactorizedPrompt:
    """Codec view of a prompt, cropped to the prompt budget."""

    codes: dict                 # slot -> LongTensor [P]
    h_t: np.ndarray
    durations: np.ndarray | None = None
    ph_prosody: torch.Tensor | None = None   # [L_p]
    num_frames: int = 0


@dataclass
class SynthesisResult:
    waveform: np.ndarray
    codes: UtteranceCodes
    durations: np.ndarray
    ph_prosody: np.ndarray
    nfe: dict = field(default_factory=dict)


def crop_prompt(durations, max_frames: int | None):
    """Number of prompt phonemes and frames kept under a frame budget (phoneme boundary)."""
    d = check_durations(durations)
    if max_frames is None or d.sum() <= max_frames:
        return len(d), int(d.sum())
    cum = np.cumsum(d)
    k = max(1, int(np.searchsorted(cum, max_frames, side="right")))
    return k, int(cum[k - 1])


def factorize_prompt(codec, prompt: PromptAudio, max_frames: int | None = None) -> FactorizedPrompt:
    out = codec.factorize(prompt.waveform, prompt.sample_rate)
    total = out.codes["prosody"].shape[-1]
    grids = {f"{a}{lvl}": out.codes[a][0, lvl] for a in ("prosody", "content", "detail")
             for lvl in range(out.codes[a].shape[1])}
    durations = ph_prosody = None
    frames = total if max_frames is None else min(total, max_frames)
    if prompt.aligned:
        d = check_durations(prompt.durations)
        if int(d.sum()) != total:
            raise ValidationError(f"prompt alignment covers {int(d.sum())} frames, audio has {total}")
        k, frames = crop_prompt(d, max_frames)
        durations = d[:k]
        branch = codec.network_.quantizers["prosody"]
        ph_prosody = phoneme_pool(out.pre_quant["prosody"][0, :frames], durations, branch)
    return FactorizedPrompt(codes={s: g[:frames] for s, g in grids.items()}, h_t=out.h_t[0].numpy(),
                            durations=durations, ph_prosody=ph_prosody, num_frames=frames)


def _features(prompt_len: int, target: torch.Tensor) -> torch.Tensor:
    return torch.cat([target.new_zeros(prompt_len, target.shape[1]), target])


def generate_phone_prosody(denoiser, phone_features: torch.Tensor, prompt_codes=None, steps: int = 4,
                           alpha: float = 1.0, generator=None, vocab_size: int = 1024, **kw) -> torch.Tensor:
    """Per-phoneme prosody codes [L] with classifier-free guidance."""
    p = 0 if prompt_codes is None else len(prompt_codes)
    cond = {"features": _features(p, phone_features)}
    return sample(denoiser, phone_features.shape[0], prompt=prompt_codes, cond=cond, steps=steps, alpha=alpha,
                  generator=generator, vocab_size=vocab_size, **kw)


def generate_duration(denoiser, phone_features: torch.Tensor, ph_prosody: torch.Tensor, dur_prompt=None,
                      prompt_ph_prosody=None, steps: int = 4, generator=None, max_duration: int = 127,
                      **kw) -> np.ndarray:
    """Integer frame durations [L]; runs without guidance."""
    if ph_prosody is None:
        raise OrderingError("duration generation needs phoneme-level prosody first")
    if dur_prompt is not None and prompt_ph_prosody is None:
        raise ValidationError("a duration prompt needs its phoneme-level prosody codes")
    p = 0 if dur_prompt is None else len(dur_prompt)
    prompt = None if dur_prompt is None else torch.as_tensor(np.minimum(check_durations(dur_prompt), max_duration))
    pro = ph_prosody if p == 0 else torch.cat([torch.as_tensor(prompt_ph_prosody), ph_prosody])
    cond = {"features": _features(p, phone_features), "codes": {"ph_prosody": pro}}
    kw.pop("alpha", None)
    out = sample(denoiser, phone_features.shape[0], prompt=prompt, cond=cond, steps=steps, alpha=0.0,
                 generator=generator, vocab_size=max_duration + 1, **kw)
    return out.numpy().astype(np.int64)


def generate_attribute(attribute: str, denoisers: dict, frame_features: torch.Tensor, prompt_codes: dict,
                       upstream: dict, steps: int = 4, alpha: float = 1.0, generator=None,
                       vocab_size: int = 1024, **kw) -> torch.Tensor:
    """Generate every level of ``attribute`` ([levels, T]), one sampler call per level.

    ``prompt_codes`` maps slot -> prompt codes from this attribute's prompt (all
    slots the chain needs).  ``upstream`` maps earlier slots -> generated codes.
    """
    if attribute not in ATTRIBUTE_SLOTS:
        raise ValidationError(f"unknown attribute {attribute!r}")
    n = frame_features.shape[0]
    generated = dict(upstream)
    levels = []
    for slot in ATTRIBUTE_SLOTS[attribute]:
        needed = frame_slot_conditions(slot)
        missing = [s for s in needed if s not in generated]
        if missing:
            raise OrderingError(f"{slot} needs {missing} generated first")
        prompt = prompt_codes.get(slot)
        p = 0 if prompt is None else len(prompt)
        codes = {}
        for s in needed:
            if generated[s].shape[0] != n:
                raise ValidationError(f"{s} has {generated[s].shape[0]} frames, expected {n}")
            codes[s] = generated[s] if p == 0 else torch.cat([prompt_codes[s], generated[s]])
        cond = {"features": _features(p, frame_features), "codes": codes}
        out = sample(denoisers[slot], n, prompt=prompt, cond=cond, steps=steps, alpha=alpha,
                     generator=generator, vocab_size=vocab_size, **kw)
        generated[slot] = out
        levels.append(out)
    return torch.stack(levels)


class FactorizedTTS(BaseEstimator):
    """Zero-shot TTS over a trained :class:`~factorized_tts.codec.FACodec`.

    Parameters
    ----------
    codec : FACodec
        Fitted codec; frozen during training.
    config : TTSConfig, optional
    train_config : DiffusionTrainConfig, optional
    random_state : int
    """

    def __init__(self, codec=None, config=None, train_config=None, random_state=0):
        self.codec = codec
        self.config = config
        self.train_config = train_config
        self.random_state = random_state

    def _config(self) -> TTSConfig:
        return self.config if self.config is not None else TTSConfig()

    def initialize(self):
        if self.codec is None:
            raise ValidationError("FactorizedTTS needs a codec")
        check_is_fitted(self.codec, "network_")
        torch.manual_seed(self.random_state)
        ccfg = self.codec.network_.config
        self.networks_ = TTSNetworks(self._config(), ccfg.num_phones, ccfg.codebook_size).eval()
        self.n_steps_ = 0
        return self

    def fit(self, X, y=None, out_dir=None, resume_from=None, max_steps=None, callback=None):
        from ..training.diffusion_trainer import train_diffusion

        self.initialize()
        cfg = self.train_config if self.train_config is not None else DiffusionTrainConfig()
        if cfg.seed != self.random_state:
            cfg = dataclasses.replace(cfg, seed=self.random_state)
        self.history_ = train_diffusion(self, X, cfg, out_dir=out_dir, resume_from=resume_from,
                                        max_steps=max_steps, callback=callback)
        self.n_steps_ = self.history_[-1][0] if self.history_ else 0
        return self

    def denoisers(self) -> dict:
        check_is_fitted(self, "networks_")
        nets = self.networks_
        slots = ("ph_prosody", "duration") + FRAME_SLOTS
        return {s: network_denoiser(nets.net_for(s), s) for s in slots}

    def _prompt_frames(self):
        secs = self._config().prompt_seconds
        if secs is None:
            return None
        ccfg = self.codec.network_.config
        return int(round(secs * ccfg.sample_rate / ccfg.hop))

    @torch.no_grad()
    def synthesize(self, request: SynthesisRequest, denoisers: dict | None = None,
                   counter: dict | None = None) -> SynthesisResult:
        """Run the full chain.  ``denoisers`` may override any slot (e.g. with oracles)."""
        check_is_fitted(self, "networks_")
        cfg = self._config()
        ccfg = self.codec.network_.config
        table = self.denoisers()
        table.update(denoisers or {})
        counter = {} if counter is None else counter
        counted = {s: CountingDenoiser(fn, counter, key=s) for s, fn in table.items()}
        gen = torch.Generator().manual_seed(int(request.seed))
        kw = dict(top_k=cfg.top_k, gumbel=cfg.gumbel, gumbel_scale=cfg.gumbel_scale, cfg_axis=cfg.cfg_std_axis,
                  schedule=MaskSchedule(cfg.schedule_horizon),
                  temperatures=temperature_schedule(request.steps, cfg.temperature_start, cfg.temperature_end))
        stage = "factorize_prompt"
        try:
            phones = check_tokens(request.phonemes, ccfg.num_phones, "phonemes")
            if phones.ndim != 1 or phones.numel() == 0:
                raise ValidationError("need a non-empty 1-D phoneme sequence")
            prompts = request.resolved()
            budget = self._prompt_frames()
            cache = {}

            def fp(which):
                key = id(prompts[which])
                if key not in cache:
                    cache[key] = factorize_prompt(self.codec, prompts[which], budget)
                return cache[key]

            factored = {k: fp(k) for k in ("prosody", "duration", "timbre", "content", "detail")}
            features = self.networks_.encoder(phones.unsqueeze(0))[0]

            stage = "ph_prosody"
            pp = factored["prosody"]
            ph_prosody = generate_phone_prosody(counted["ph_prosody"], features, pp.ph_prosody, request.steps,
                                                request.alpha, gen, ccfg.codebook_size, **kw)

            stage = "duration"
            dp = factored["duration"]
            durations = generate_duration(counted["duration"], features, ph_prosody,
                                          dp.durations, dp.ph_prosody, request.steps, gen, cfg.max_duration, **kw)
            if durations.sum() == 0:
                raise ValidationError("all generated durations are zero")

            stage = "length_regulate"
            c_ph = length_regulate(features, durations)

            generated = {}
            for attr in ("prosody", "content", "detail"):
                stage = attr
                grid = generate_attribute(attr, counted, c_ph, factored[attr].codes, generated, request.steps,
                                          request.alpha, gen, ccfg.codebook_size, **kw)
                for lvl, slot in enumerate(ATTRIBUTE_SLOTS[attr]):
                    generated[slot] = grid[lvl]

            stage = "decode"
            codes = UtteranceCodes(
                utt_id="synth", h_t=factored["timbre"].h_t,
                prosody=torch.stack([generated["prosody0"]]).numpy(),
                content=torch.stack([generated["content0"], generated["content1"]]).numpy(),
                detail=torch.stack([generated["detail0"], generated["detail1"], generated["detail2"]]).numpy(),
                meta={"seed": int(request.seed), "steps": int(request.steps), "alpha": float(request.alpha)})
            wave = self.codec.decode_codes(codes)
        except SynthesisError:
            raise
        except Exception as err:  # surface the failing stage
            raise SynthesisError(stage, err) from err
        counter["nfe"] = sum(counter.get(s, 0) for s in table)
        return SynthesisResult(waveform=wave, codes=codes, durations=durations,
                               ph_prosody=ph_prosody.numpy(), nfe=dict(counter))

    def predict(self, X):
        """List of :class:`SynthesisRequest` -> list of waveforms."""
        return [self.synthesize(r).waveform for r in X]

    # persistence

    def save(self, path):
        from ..training.checkpoint import save_checkpoint

        check_is_fitted(self, "networks_")
        save_checkpoint(path, "tts", dict(
            model=self.networks_.state_dict(), tts_config=dataclasses.asdict(self._config()),
            codec_model=self.codec.network_.state_dict(),
            codec_config=dataclasses.asdict(self.codec.network_.config),
            speakers=list(self.codec.speakers_), phones=list(getattr(self.codec, "phones_", [])),
            step=int(self.n_steps_), random_state=self.random_state))

    @classmethod
    def load(cls, path) -> "FactorizedTTS":
        from ..codec.estimator import FACodec
        from ..config import CodecConfig
        from ..training.checkpoint import load_checkpoint

        ckpt = load_checkpoint(path, "tts")
        tup = lambda d: {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        codec = FACodec(config=CodecConfig(**tup(ckpt["codec_config"]))).initialize()
        codec.network_.load_state_dict(ckpt["codec_model"])
        codec.speakers_ = list(ckpt.get("speakers", []))
        codec.phones_ = list(ckpt.get("phones", []))
        est = cls(codec=codec, config=TTSConfig(**tup(ckpt["tts_config"])),
                  random_state=ckpt.get("random_state", 0)).initialize()
        est.networks_.load_state_dict(ckpt["model"])
        est.networks_.eval()
        est.n_steps_ = int(ckpt.get("step", 0))
        return est
