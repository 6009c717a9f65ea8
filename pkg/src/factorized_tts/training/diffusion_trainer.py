"""Diffusion training over frozen codec codes: prompt split, forward masking, masked CE per slot."""

from __future__ import annotations

import dataclasses
import logging
import math
from pathlib import Path

import numpy as np
import torch

from .._validation import NumericError, ValidationError
from ..config import DiffusionTrainConfig
from ..diffusion import MaskSchedule, cfg_train_drop, forward_mask, masked_ce_loss
from ..tts.modules import FRAME_SLOTS, frame_slot_conditions, length_regulate, phoneme_pool
from .checkpoint import MetricsLog, load_checkpoint, save_checkpoint
from .losses import lr_at

log = logging.getLogger(__name__)


def prepare_diffusion_data(codec, dataset, max_duration: int = 127) -> list:
    """Frozen-codec targets per utterance: frame codes per slot, phone ids, durations, pooled prosody."""
    if len(dataset) == 0:
        raise ValidationError("dataset is empty")
    branch = codec.network_.quantizers["prosody"]
    items = []
    for u in dataset:
        out = codec.factorize(u.audio)
        frames = out.codes["prosody"].shape[-1]
        if frames != u.num_frames:
            log.warning("skipping %s: %d codec frames vs %d aligned frames", u.utt_id, frames, u.num_frames)
            continue
        codes = {f"{a}{lvl}": out.codes[a][0, lvl].clone() for a in ("prosody", "content", "detail")
                 for lvl in range(out.codes[a].shape[1])}
        ph_prosody = phoneme_pool(out.pre_quant["prosody"][0], u.durations, branch)
        items.append(dict(utt_id=u.utt_id, phones=torch.as_tensor(u.phone_ids), durations=u.durations.copy(),
                          dur_tokens=torch.as_tensor(np.minimum(u.durations, max_duration)),
                          ph_prosody=ph_prosody, codes=codes))
    return items


def _pad_stack(seqs, value=0):
    n = max(s.shape[0] for s in seqs)
    out = seqs[0].new_full((len(seqs), n) + tuple(seqs[0].shape[1:]), value)
    pad = torch.ones(len(seqs), n, dtype=torch.bool)
    for i, s in enumerate(seqs):
        out[i, :s.shape[0]] = s
        pad[i, :s.shape[0]] = False
    return out, pad


def build_example(item, rng: np.random.Generator, gen: torch.Generator, cfg: DiffusionTrainConfig, p_cfg: float):
    """Choose a prompt split at a phoneme boundary and apply the guidance drop."""
    n_ph = len(item["durations"])
    lo, hi = cfg.prompt_fraction
    k = int(math.floor(rng.uniform(lo, hi) * n_ph))
    if item["durations"][k:].sum() == 0:
        k = 0
    frames_p = int(item["durations"][:k].sum())
    # the drop is drawn for every example so the measured rate is unbiased by empty splits
    dropped = cfg_train_drop(torch.zeros(1), gen, p_cfg).numel() == 0
    return dict(k=k, P=frames_p, use_prompt=k > 0 and not dropped, dropped=dropped)


def _slot_batch(seqs, prompt_lens, t, gen, mask_id, schedule):
    """Forward-mask each sequence's target region and pad into a batch."""
    noisy, targets, masks = [], [], []
    for x, p, tt in zip(seqs, prompt_lens, t):
        state = forward_mask(x, float(tt), prompt_len=int(p), generator=gen, mask_id=mask_id, schedule=schedule)
        noisy.append(state.tokens)
        targets.append(x)
        masks.append(state.mask)
    tokens, pad = _pad_stack(noisy, mask_id)
    targets, _ = _pad_stack(targets, 0)
    masks, _ = _pad_stack(masks, False)
    return tokens, targets, masks, pad


def diffusion_step_losses(networks, batch_items, examples, rng, gen, schedule) -> dict:
    """Masked CE per slot for one batch of utterances."""
    enc = networks.encoder
    # phone encoder over the target phonemes of each example
    tgt_phones = [it["phones"][ex["k"]:] for it, ex in zip(batch_items, examples)]
    phones, ph_pad = _pad_stack(tgt_phones, 0)
    feats_all = enc(phones, ph_pad)
    feats = [feats_all[i, :len(p)] for i, p in enumerate(tgt_phones)]
    b = len(batch_items)
    losses = {}

    def prompt_split(seq, ex, frame_level):
        cut = ex["P"] if frame_level else ex["k"]
        if ex["use_prompt"]:
            return seq, cut
        return seq[cut:], 0

    def t_draw():
        # uniform on (0, 1]
        return 1.0 - torch.rand(b, generator=gen, dtype=torch.float64)

    # phone level
    net = networks.phone_net
    for slot in ("ph_prosody", "duration"):
        src = "ph_prosody" if slot == "ph_prosody" else "dur_tokens"
        seqs, plens, fts, cond = [], [], [], []
        for it, ex, f in zip(batch_items, examples, feats):
            s, p = prompt_split(it[src], ex, False)
            seqs.append(s)
            plens.append(p)
            fts.append(torch.cat([f.new_zeros(p, f.shape[1]), f]))
            if slot == "duration":
                cond.append(prompt_split(it["ph_prosody"], ex, False)[0])
        t = t_draw()
        tokens, targets, masks, pad = _slot_batch(seqs, plens, t, gen, net.mask_id(slot), schedule)
        features, _ = _pad_stack(fts, 0.0)
        codes = {"ph_prosody": _pad_stack(cond, 0)[0]} if cond else {}
        logits = net(slot, tokens, torch.tensor(plens), t, features, codes, pad)
        losses[slot] = masked_ce_loss(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                                      (masks & ~pad).reshape(-1))

    # frame level
    net = networks.frame_net
    frame_feats = [length_regulate(f, it["durations"][ex["k"]:]) for it, ex, f in zip(batch_items, examples, feats)]
    for slot in FRAME_SLOTS:
        seqs, plens, fts, conds = [], [], [], {s: [] for s in frame_slot_conditions(slot)}
        for it, ex, f in zip(batch_items, examples, frame_feats):
            s, p = prompt_split(it["codes"][slot], ex, True)
            seqs.append(s)
            plens.append(p)
            fts.append(torch.cat([f.new_zeros(p, f.shape[1]), f]))
            for c in conds:
                conds[c].append(prompt_split(it["codes"][c], ex, True)[0])
        t = t_draw()
        tokens, targets, masks, pad = _slot_batch(seqs, plens, t, gen, net.mask_id(slot), schedule)
        features, _ = _pad_stack(fts, 0.0)
        codes = {c: _pad_stack(v, 0)[0] for c, v in conds.items()}
        logits = net(slot, tokens, torch.tensor(plens), t, features, codes, pad)
        losses[slot] = masked_ce_loss(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1),
                                      (masks & ~pad).reshape(-1))
    return losses


def train_diffusion(tts, dataset, cfg: DiffusionTrainConfig | None = None, out_dir=None, resume_from=None,
                    max_steps: int | None = None, callback=None):
    """Train the TTS networks of ``tts`` (an initialized FactorizedTTS) with its codec frozen.

    The logged ``mask`` value is the mean masked cross-entropy over all eight
    slots.  Returns a list of ``(step, record)`` pairs; ``record['cfg_drops']``
    counts guidance drops in that step.
    """
    cfg = cfg or DiffusionTrainConfig()
    if dataset.skip_fraction > cfg.max_skip_fraction:
        raise ValidationError(f"{dataset.skip_fraction:.0%} of utterances were skipped during ingestion; aborting")
    tcfg = tts._config()
    networks = tts.networks_
    for p in tts.codec.network_.parameters():
        p.requires_grad_(False)
    items = prepare_diffusion_data(tts.codec, dataset, tcfg.max_duration)
    if len(items) < (1 - cfg.max_skip_fraction) * len(dataset):
        raise ValidationError("too many utterances failed codec/alignment checks; aborting")
    schedule = MaskSchedule(tcfg.schedule_horizon)

    ocfg = cfg.optimizer
    opt = torch.optim.AdamW(networks.parameters(), lr=ocfg.lr, betas=(ocfg.beta1, ocfg.beta2),
                            weight_decay=ocfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    start = 1
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, "tts")
        networks.load_state_dict(ckpt["model"])
        opt.load_state_dict(ckpt["optimizer"])
        rng.bit_generator.state = ckpt["numpy_rng"]
        gen.set_state(ckpt["torch_rng"])
        start = int(ckpt["step"]) + 1

    out_dir = Path(out_dir) if out_dir is not None else None
    metrics = MetricsLog(out_dir / "metrics.jsonl" if out_dir else None)
    history = []
    last = cfg.steps if max_steps is None else min(cfg.steps, max_steps)
    networks.train()
    for step in range(start, last + 1):
        for group in opt.param_groups:
            group["lr"] = lr_at(step, ocfg)
        # frame budget: add utterances until the batch would exceed max_frames
        batch_items, frames = [], 0
        while len(batch_items) < cfg.batch_size:
            it = items[int(rng.integers(0, len(items)))]
            n = int(it["durations"].sum())
            if batch_items and frames + n > cfg.max_frames:
                break
            batch_items.append(it)
            frames += n
        examples = [build_example(it, rng, gen, cfg, tcfg.cfg_drop_prob) for it in batch_items]
        losses = diffusion_step_losses(networks, batch_items, examples, rng, gen, schedule)
        for name, v in losses.items():
            if not torch.isfinite(v):
                raise NumericError(f"loss term '{name}' is not finite", step=step)
        total = torch.stack(list(losses.values())).mean()
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()
        record = {f"mask_{k}": float(v.detach()) for k, v in losses.items()}
        record["mask"] = float(total.detach())
        record["cfg_drops"] = sum(ex["dropped"] for ex in examples)
        record["examples"] = len(examples)
        history.append((step, record))
        if step % cfg.log_every == 0 or step in (start, last):
            metrics.log(step, record)
        if callback is not None:
            callback(step, record)
        if out_dir is not None and (step % cfg.checkpoint_every == 0 or step == last):
            tts.n_steps_ = step
            payload = dict(model=networks.state_dict(), optimizer=opt.state_dict(), step=step,
                           numpy_rng=rng.bit_generator.state, torch_rng=gen.get_state(),
                           tts_config=dataclasses.asdict(tcfg),
                           codec_model=tts.codec.network_.state_dict(),
                           codec_config=dataclasses.asdict(tts.codec.network_.config),
                           speakers=list(tts.codec.speakers_), phones=list(getattr(tts.codec, "phones_", [])),
                           random_state=tts.random_state)
            save_checkpoint(out_dir / f"tts_step{step}.ckpt", "tts", payload)
            save_checkpoint(out_dir / "tts_last.ckpt", "tts", payload)
    networks.eval()
    return history
