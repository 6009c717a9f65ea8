"""Command-line interface: ``factorized-tts <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import apply_overrides, preset, read_config_file
from .data import PhoneVocab, ingest, read_alignments, read_wav, write_wav

log = logging.getLogger("factorized_tts")


# helpers

def _data_paths(args):
    if args.data:
        root = Path(args.data)
        return root / "wavs", root / "alignments.jsonl"
    if not (args.audio_dir and args.alignments):
        raise SystemExit("error: pass --data DIR or both --audio-dir and --alignments")
    return Path(args.audio_dir), Path(args.alignments)


def _load_dataset(args):
    audio_dir, align = _data_paths(args)
    return ingest(audio_dir, align, vocab=getattr(args, "vocab", None))


def _configs(args):
    cfgs = preset(args.preset)
    if args.config:
        values = read_config_file(args.config)
        known = set(cfgs)
        for key in values:
            if key.split(".", 1)[0] not in known:
                raise ValueError(f"config key {key!r} must start with one of {sorted(known)}")
        for name, obj in cfgs.items():
            apply_overrides(obj, values, prefix=name)
    return cfgs


def _load_codec(path):
    from .codec.estimator import FACodec
    from .training.checkpoint import read_header
    from .tts.pipeline import FactorizedTTS

    _, kind = read_header(path)
    return FactorizedTTS.load(path).codec if kind == "tts" else FACodec.load(path)


def _vocab_for(args, model=None):
    """--vocab, else phones.txt beside --alignments, else the inventory stored in the model."""
    if getattr(args, "vocab", None):
        return PhoneVocab.from_file(args.vocab)
    if getattr(args, "alignments", None):
        cand = Path(args.alignments).with_name("phones.txt")
        if cand.exists():
            return PhoneVocab.from_file(cand)
    phones = getattr(getattr(model, "codec", None), "phones_", None)
    return PhoneVocab(phones) if phones else None


def _read_phonemes(path, vocab):
    tokens = Path(path).read_text().split()
    if not tokens:
        raise ValueError(f"{path} contains no phonemes")
    if vocab is not None:
        return vocab.encode([int(t) if t.isdigit() and t not in vocab.index else t for t in tokens])
    return np.asarray([int(t) for t in tokens], dtype=np.int64)


def _prompt(path, alignments: dict, vocab):
    from .tts.pipeline import PromptAudio

    if path is None:
        return None
    wav = read_wav(path)
    rec = alignments.get(Path(path).stem)
    if rec is None:
        return PromptAudio(wav)
    phones = vocab.encode(rec.phonemes) if vocab is not None else np.asarray(rec.phonemes, dtype=np.int64)
    return PromptAudio(wav, phones, np.asarray(rec.durations, dtype=np.int64))


def _synthesis_request(args, model=None):
    from .tts.pipeline import SynthesisRequest

    vocab = _vocab_for(args, model)
    alignments = {r.utt_id: r for r in read_alignments(args.alignments)} if args.alignments else {}
    main = _prompt(args.prompt, alignments, vocab)
    same = lambda p: None if p is None or Path(p).resolve() == Path(args.prompt).resolve() else p
    return SynthesisRequest(
        phonemes=_read_phonemes(args.text_phonemes, vocab), prompt=main,
        prosody_prompt=_prompt(same(args.prosody_prompt), alignments, vocab),
        duration_prompt=_prompt(same(args.duration_prompt), alignments, vocab),
        timbre_prompt=_prompt(same(args.timbre_prompt), alignments, vocab),
        alpha=args.alpha, steps=args.steps, seed=args.seed)


# subcommands

def cmd_make_synthetic(args):
    from .synthetic import SyntheticSpec, make_synthetic

    spec = SyntheticSpec(num_speakers=args.speakers, utterances_per_speaker=args.utterances, seed=args.seed)
    records = make_synthetic(args.out, spec)
    print(f"wrote {len(records)} utterances to {args.out}")


def cmd_train_codec(args):
    from .codec.estimator import FACodec

    cfgs = _configs(args)
    train = cfgs["codec_train"]
    if args.steps is not None:
        train.steps = args.steps
    ds = _load_dataset(args)
    cfgs["codec"].num_speakers = max(cfgs["codec"].num_speakers, len(ds.speakers))
    codec = FACodec(config=cfgs["codec"], train_config=train, random_state=args.seed)
    codec.fit(ds, out_dir=args.out, resume_from=args.resume)
    codec.save(Path(args.out) / "codec.ckpt")
    print(f"saved {Path(args.out) / 'codec.ckpt'} after {codec.n_steps_} steps")


def cmd_train_tts(args):
    from .tts.pipeline import FactorizedTTS

    cfgs = _configs(args)
    train = cfgs["diffusion_train"]
    if args.steps is not None:
        train.steps = args.steps
    ds = _load_dataset(args)
    codec = _load_codec(args.codec)
    tts = FactorizedTTS(codec=codec, config=cfgs["tts"], train_config=train, random_state=args.seed)
    tts.fit(ds, out_dir=args.out, resume_from=args.resume)
    tts.save(Path(args.out) / "tts.ckpt")
    print(f"saved {Path(args.out) / 'tts.ckpt'} after {tts.n_steps_} steps")


def _run_synthesis(args):
    from .tts.pipeline import FactorizedTTS

    tts = FactorizedTTS.load(args.model)
    if args.prompt_seconds is not None:
        tts.config.prompt_seconds = args.prompt_seconds if args.prompt_seconds > 0 else None
    return tts, tts.synthesize(_synthesis_request(args, tts))


def cmd_synthesize(args):
    from .codes_io import write_codes

    _, result = _run_synthesis(args)
    write_wav(args.output, result.waveform)
    if args.dump_codes:
        write_codes(args.dump_codes, [result.codes])
    print(f"wrote {args.output} ({len(result.waveform)} samples, {result.nfe['nfe']} denoiser passes)")


def cmd_convert(args):
    codec = _load_codec(args.model)
    y = codec.voice_convert(read_wav(args.source), read_wav(args.prompt))
    write_wav(args.output, y)
    print(f"wrote {args.output}")


def cmd_dump_codes(args):
    from .codes_io import write_codes

    if args.text_phonemes:
        _, result = _run_synthesis(args)
        records = [result.codes]
    else:
        if not args.audio:
            raise ValueError("pass --audio WAV... to analyse recordings, or synthesis arguments")
        codec = _load_codec(args.model)
        records = [codec.encode_codes(read_wav(p), Path(p).stem) for p in args.audio]
    write_codes(args.output, records)
    print(f"wrote {len(records)} code records to {args.output}")


def cmd_decode_codes(args):
    from .codes_io import read_codes

    codec = _load_codec(args.model)
    records = read_codes(args.codes)
    if len(records) == 1 and args.output.endswith(".wav"):
        write_wav(args.output, codec.decode_codes(records[0]))
    else:
        for rec in records:
            write_wav(Path(args.output) / f"{rec.utt_id}.wav", codec.decode_codes(rec))
    print(f"decoded {len(records)} record(s)")


def cmd_eval(args):
    from .metrics import eval_reconstruction

    codec = _load_codec(args.model)
    report = eval_reconstruction(codec, _load_dataset(args))
    text = report.to_json()
    if args.output:
        Path(args.output).write_text(text + "\n")
    print(text)


# parser

def _add_data_args(p):
    p.add_argument("--data", help="corpus directory with wavs/ and alignments.jsonl")
    p.add_argument("--audio-dir")
    p.add_argument("--alignments")
    p.add_argument("--vocab", help="phoneme vocabulary file (one symbol per line)")


def _add_config_args(p):
    p.add_argument("--config", help="key = value config file (codec.*, tts.*, codec_train.*, diffusion_train.*)")
    p.add_argument("--preset", default="desk", choices=["desk", "paper"])
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics.jsonl")


def _add_synthesis_args(p, required: bool):
    p.add_argument("--model", required=required, help="TTS checkpoint")
    p.add_argument("--text-phonemes", required=required, help="file of whitespace-separated phonemes")
    p.add_argument("--prompt", required=required, help="prompt WAV")
    p.add_argument("--prosody-prompt")
    p.add_argument("--duration-prompt")
    p.add_argument("--timbre-prompt")
    p.add_argument("--alignments", help="alignment JSONL for prompts, matched by file stem")
    p.add_argument("--vocab")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--prompt-seconds", type=float, help="prompt budget; 0 uses the whole prompt")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="factorized-tts", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="write the toy multi-speaker corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=2)
    p.add_argument("--utterances", type=int, default=20, help="utterances per speaker")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train-codec", help="train the factorized codec")
    _add_data_args(p)
    _add_config_args(p)
    p.set_defaults(func=cmd_train_codec)

    p = sub.add_parser("train-tts", help="train the diffusion models over a frozen codec")
    _add_data_args(p)
    _add_config_args(p)
    p.add_argument("--codec", required=True, help="codec checkpoint")
    p.set_defaults(func=cmd_train_tts)

    p = sub.add_parser("synthesize", help="zero-shot synthesis from phonemes and a prompt")
    _add_synthesis_args(p, required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--dump-codes", help="also write the generated codes (JSONL)")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("convert", help="voice conversion by timbre swap")
    p.add_argument("--model", required=True, help="codec or TTS checkpoint")
    p.add_argument("--source", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("dump-codes", help="write attribute codes of recordings or of a synthesis run")
    _add_synthesis_args(p, required=False)
    p.add_argument("--audio", nargs="+", help="recordings to analyse (with --model as codec)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_dump_codes)

    p = sub.add_parser("decode-codes", help="decode a code dump to WAV")
    p.add_argument("--model", required=True, help="codec or TTS checkpoint")
    p.add_argument("--codes", required=True)
    p.add_argument("-o", "--output", required=True, help="WAV path (single record) or directory")
    p.set_defaults(func=cmd_decode_codes)

    p = sub.add_parser("eval", help="objective reconstruction metrics")
    p.add_argument("--model", required=True, help="codec or TTS checkpoint")
    _add_data_args(p)
    p.add_argument("-o", "--output", help="write the report as JSON")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        args.func(args)
    except SystemExit:
        raise
    except Exception as err:  # report cleanly, non-zero exit
        print(f"error: {err}", file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
