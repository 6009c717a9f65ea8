import time

import numpy as np
import pytest
import torch

from factorized_tts.codec import FACodec
from factorized_tts.config import CodecTrainConfig, DiffusionTrainConfig, TTSConfig
from factorized_tts.data import ingest
from factorized_tts.synthetic import SyntheticSpec, make_synthetic
from factorized_tts.tts import FactorizedTTS

TINY_TTS = dict(dim=32, heads=2, phone_encoder_layers=1, phone_level_layers=1, frame_level_layers=1)


def pytest_configure(config):
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Two speakers, three utterances each."""
    root = tmp_path_factory.mktemp("small_corpus")
    make_synthetic(root, SyntheticSpec(num_speakers=2, utterances_per_speaker=3, seed=3))
    return root


@pytest.fixture(scope="session")
def small_dataset(small_corpus):
    return ingest(small_corpus / "wavs", small_corpus / "alignments.jsonl")


@pytest.fixture(scope="session")
def codec():
    """Untrained codec with the desk configuration (inference only)."""
    est = FACodec(random_state=0).initialize()
    est.speakers_ = ["spk00", "spk01"]
    return est


@pytest.fixture(scope="session")
def tiny_tts(codec):
    return FactorizedTTS(codec=codec, config=TTSConfig(**TINY_TTS), random_state=0).initialize()


@pytest.fixture(scope="session")
def desk_corpus(tmp_path_factory):
    """The 2-speaker, 40-utterance synthetic corpus used for desk training."""
    root = tmp_path_factory.mktemp("desk_corpus")
    make_synthetic(root, SyntheticSpec(num_speakers=2, utterances_per_speaker=20, seed=0))
    return root


@pytest.fixture(scope="session")
def desk_models(desk_corpus, tmp_path_factory):
    """Codec and TTS trained for the desk budget (2000 steps each), with their histories."""
    ds = ingest(desk_corpus / "wavs", desk_corpus / "alignments.jsonl")
    out = tmp_path_factory.mktemp("desk_models")
    t0 = time.time()
    codec = FACodec(train_config=CodecTrainConfig(steps=2000), random_state=0)
    codec.fit(ds, out_dir=out / "codec")
    t1 = time.time()
    tts = FactorizedTTS(codec=codec, train_config=DiffusionTrainConfig(steps=2000), random_state=0)
    tts.fit(ds, out_dir=out / "tts")
    t2 = time.time()
    return dict(dataset=ds, codec=codec, tts=tts, codec_seconds=t1 - t0, tts_seconds=t2 - t1, out=out)


def one_hot_oracle(truth, vocab: int, margin: float = 1e4):
    """Denoiser that puts all probability on ``truth`` for the generated region."""
    truth = torch.as_tensor(np.asarray(truth), dtype=torch.long)

    def denoise(tokens, prompt_len, cond, t):
        logits = torch.zeros(tokens.shape[0], vocab)
        logits[prompt_len + torch.arange(len(truth)), truth] = margin
        return logits
    return denoise


TINY_CODEC = dict(encoder_channels=(4, 8, 8, 16, 16), timbre_dim=16, timbre_heads=2, timbre_layers=1,
                  codebook_size=64, num_speakers=4)


@pytest.fixture(scope="session")
def tiny_codec_config():
    from factorized_tts.config import CodecConfig

    return CodecConfig(**TINY_CODEC)


# acceptance gate: one pass/fail line per criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
