"""Codec training loop: random crops, full loss assembly, resumable checkpoints."""

from __future__ import annotations

import dataclasses
import logging
from pathlib import Path

import numpy as np
import torch

from .._validation import ValidationError
from ..codec.critics import CombinedCritic, critic_loss, generator_adversarial_losses
from ..codec.network import FACodecNetwork
from ..codec.pitch import estimate_f0, normalize_f0
from ..config import CodecTrainConfig
from .checkpoint import MetricsLog, load_checkpoint, save_checkpoint
from .losses import codec_loss_terms, codec_total_loss, lr_at

log = logging.getLogger(__name__)


def prepare_codec_data(dataset, hop: int = 200, num_phones: int | None = None, num_speakers: int | None = None):
    """Per-utterance frame labels: padded audio, phones, z-scored F0, voicing, speaker id."""
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    items = []
    for u in dataset:
        frames = u.num_frames
        audio = np.zeros(frames * hop, dtype=np.float32)
        n = min(len(u.audio), frames * hop)
        audio[:n] = u.audio[:n]
        f0 = u.f0 if u.f0 is not None else estimate_f0(u.audio, hop=hop)
        f0 = np.pad(f0, (0, max(0, frames - len(f0))))[:frames]
        u.f0 = f0
        z, voiced = normalize_f0(f0)
        phones = u.frame_phones()
        if num_phones is not None and phones.max() >= num_phones:
            raise ValidationError(f"{u.utt_id}: phoneme id {phones.max()} exceeds codec num_phones={num_phones}")
        if num_speakers is not None and u.speaker_id >= num_speakers:
            raise ValidationError(f"speaker index {u.speaker_id} exceeds codec num_speakers={num_speakers}")
        items.append(dict(audio=audio, phones=phones, f0_z=z.astype(np.float32), voiced=voiced,
                          speaker=u.speaker_id, frames=frames))
    return items


def sample_batch(items, rng: np.random.Generator, batch_size: int, crop_frames: int, hop: int):
    picks = rng.integers(0, len(items), size=batch_size)
    audio = np.zeros((batch_size, crop_frames * hop), dtype=np.float32)
    phones = np.zeros((batch_size, crop_frames), dtype=np.int64)
    f0_z = np.zeros((batch_size, crop_frames), dtype=np.float32)
    voiced = np.zeros((batch_size, crop_frames), dtype=bool)
    mask = np.zeros((batch_size, crop_frames), dtype=bool)
    speakers = np.zeros(batch_size, dtype=np.int64)
    for b, i in enumerate(picks):
        it = items[i]
        span = min(crop_frames, it["frames"])
        start = int(rng.integers(0, it["frames"] - span + 1))
        audio[b, :span * hop] = it["audio"][start * hop:(start + span) * hop]
        phones[b, :span] = it["phones"][start:start + span]
        f0_z[b, :span] = it["f0_z"][start:start + span]
        voiced[b, :span] = it["voiced"][start:start + span]
        mask[b, :span] = True
        speakers[b] = it["speaker"]
    t = torch.from_numpy
    return dict(audio=t(audio), phones=t(phones), f0_z=t(f0_z), voiced=t(voiced), mask=t(mask),
                speakers=t(speakers))


def codec_step_losses(net: FACodecNetwork, batch: dict, cfg: CodecTrainConfig, generator=None, critic=None):
    h = net.encode(batch["audio"])
    out = net.factorize(h, training=True, generator=generator)
    y_hat = net.decode(out.z_p, out.z_c, out.z_d_decoder, out.h_t)
    terms = codec_loss_terms(out, y_hat, batch["audio"], batch["phones"], batch["f0_z"], batch["voiced"],
                             batch["speakers"], batch["mask"], cfg.mel_scales)
    if critic is not None:
        terms["adv"], terms["feat"] = generator_adversarial_losses(critic, batch["audio"], y_hat)
    return terms, y_hat


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def train_codec(net: FACodecNetwork, dataset, cfg: CodecTrainConfig | None = None, out_dir=None,
                resume_from=None, max_steps: int | None = None, callback=None):
    """Train ``net`` in place.

    Checkpoints go to ``out_dir/codec_step{N}.ckpt`` (plus ``codec_last.ckpt``) and
    per-term metrics to ``out_dir/metrics.jsonl``.  ``max_steps`` stops early
    without changing the schedule, which makes interrupted-run tests possible.
    Returns a list of ``(step, breakdown)`` pairs.
    """
    cfg = cfg or CodecTrainConfig()
    if dataset.skip_fraction > cfg.max_skip_fraction:
        raise ValidationError(f"{dataset.skip_fraction:.0%} of utterances were skipped during ingestion; aborting")
    hop = net.hop
    items = prepare_codec_data(dataset, hop, net.config.num_phones, net.config.num_speakers)
    weights = cfg.loss_weights
    use_critic = cfg.use_critic and (weights.adv > 0 or weights.feat > 0)

    torch.manual_seed(cfg.seed)
    critic = CombinedCritic(cfg.critic) if use_critic else None
    ocfg = cfg.optimizer
    opt = torch.optim.Adam(net.parameters(), lr=ocfg.lr, betas=(ocfg.beta1, ocfg.beta2))
    opt_c = torch.optim.Adam(critic.parameters(), lr=ocfg.lr, betas=(ocfg.beta1, ocfg.beta2)) if critic else None
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    start = 1

    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, "codec")
        net.load_state_dict(ckpt["model"])
        opt.load_state_dict(ckpt["optimizer"])
        if critic is not None and "critic" in ckpt:
            critic.load_state_dict(ckpt["critic"])
            opt_c.load_state_dict(ckpt["critic_optimizer"])
        rng.bit_generator.state = ckpt["numpy_rng"]
        gen.set_state(ckpt["torch_rng"])
        start = int(ckpt["step"]) + 1

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics = MetricsLog(out_dir / "metrics.jsonl" if out_dir else None)
    history = []
    last = cfg.steps if max_steps is None else min(cfg.steps, max_steps)
    net.train()
    for step in range(start, last + 1):
        lr = lr_at(step, ocfg)
        _set_lr(opt, lr)
        batch = sample_batch(items, rng, cfg.batch_size, cfg.crop_frames, hop)
        terms, y_hat = codec_step_losses(net, batch, cfg, gen, critic)
        total, breakdown = codec_total_loss(terms, weights)
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        if critic is not None:
            _set_lr(opt_c, lr)
            d_loss = critic_loss(critic, batch["audio"], y_hat)
            opt_c.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_c.step()
            breakdown["critic"] = float(d_loss.detach())
        raw = {k: float(v.detach()) for k, v in terms.items()}
        record = dict(breakdown, total=float(total.detach()), **{f"raw_{k}": v for k, v in raw.items()})
        history.append((step, record))
        if step % cfg.log_every == 0 or step in (start, last):
            metrics.log(step, record)
        if callback is not None:
            callback(step, record)
        if out_dir is not None and (step % cfg.checkpoint_every == 0 or step == last):
            payload = dict(model=net.state_dict(), optimizer=opt.state_dict(), step=step,
                           numpy_rng=rng.bit_generator.state, torch_rng=gen.get_state(),
                           codec_config=dataclasses.asdict(net.config))
            if critic is not None:
                payload.update(critic=critic.state_dict(), critic_optimizer=opt_c.state_dict())
            save_checkpoint(out_dir / f"codec_step{step}.ckpt", "codec", payload)
            save_checkpoint(out_dir / "codec_last.ckpt", "codec", payload)
    net.eval()
    return history
