import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY_TTS, one_hot_oracle
from factorized_tts._validation import OrderingError, SynthesisError, ValidationError
from factorized_tts.config import TTSConfig
from factorized_tts.fvq import FVQBranch
from factorized_tts.tts import FactorizedTTS, PromptAudio, SynthesisRequest
from factorized_tts.tts.modules import (FRAME_SLOTS, PhonemeEncoder, TokenDenoiser, frame_slot_conditions,
                                        frame_to_phone, length_regulate, phoneme_pool)
from factorized_tts.tts.pipeline import (crop_prompt, factorize_prompt, generate_attribute, generate_duration)


def loop_regulate(features, durations):
    rows = []
    for row, d in zip(features.tolist(), durations):
        rows.extend([row] * int(d))
    return rows


class TestLengthRegulate:
    @given(st.lists(st.integers(0, 6), min_size=1, max_size=12))
    @settings(max_examples=60, deadline=None)
    def test_matches_loop(self, durations):
        feats = torch.randn(len(durations), 3)
        out = length_regulate(feats, durations)
        assert out.shape == (sum(durations), 3)
        assert out.tolist() == loop_regulate(feats, durations)

    def test_frame_to_phone(self):
        assert frame_to_phone([2, 0, 3]).tolist() == [0, 0, 2, 2, 2]

    def test_count_mismatch(self):
        with pytest.raises(ValidationError):
            length_regulate(torch.zeros(3, 2), [1, 2])

    @pytest.mark.parametrize("bad", [[1, -1], [1.5, 2]])
    def test_bad_durations(self, bad):
        with pytest.raises(ValidationError):
            length_regulate(torch.zeros(2, 2), bad)


class TestPhonemePool:
    def test_matches_oracle(self):
        torch.manual_seed(0)
        branch = FVQBranch("prosody", 16, codebook_size=32, codebook_dim=4)
        durations = [3, 0, 2, 5]
        pre = torch.randn(10, 4, dtype=torch.float64)
        codes = phoneme_pool(pre, durations, branch)
        cb = branch.codebooks[0].detach().double()
        start, expected = 0, []
        for d in durations:
            mean = pre[start:start + d].mean(0) if d else torch.zeros(4, dtype=torch.float64)
            start += d
            dists = [float(((mean - row) ** 2).sum()) for row in cb]
            expected.append(int(np.argmin(dists)))
        assert codes.tolist() == expected

    def test_frame_count_checked(self):
        branch = FVQBranch("prosody", 8, codebook_size=8, codebook_dim=4)
        with pytest.raises(ValidationError):
            phoneme_pool(torch.zeros(5, 4), [2, 2], branch)


def test_crop_prompt():
    assert crop_prompt([3, 4, 5], None) == (3, 12)
    assert crop_prompt([3, 4, 5], 8) == (2, 7)
    assert crop_prompt([3, 4, 5], 7) == (2, 7)
    assert crop_prompt([10, 4], 5) == (1, 10)


class TestNetworks:
    def test_encoder_padding_invariance(self):
        torch.manual_seed(0)
        enc = PhonemeEncoder(20, 32, layers=2, heads=2).eval()
        a = torch.tensor([[1, 4, 6, 2]])
        padded = torch.tensor([[1, 4, 6, 2, 0, 0, 0]])
        mask = torch.tensor([[False] * 4 + [True] * 3])
        with torch.no_grad():
            torch.testing.assert_close(enc(a)[0], enc(padded, mask)[0, :4], atol=1e-5, rtol=1e-5)

    def test_encoder_range(self):
        with pytest.raises(ValidationError):
            PhonemeEncoder(5, 16, layers=1, heads=2)(torch.tensor([[5]]))

    def test_denoiser_shapes(self):
        net = TokenDenoiser({"a": 10, "b": 7}, {"a": 10}, dim=16, layers=1, heads=2)
        logits = net("b", torch.full((2, 9), net.mask_id("b")), torch.tensor([0, 3]), torch.tensor([0.5, 1.0]),
                     torch.zeros(2, 9, 16), {"a": torch.zeros(2, 9, dtype=torch.long)})
        assert logits.shape == (2, 9, 7) and net.mask_id("b") == 7

    def test_frame_slot_chain(self):
        assert frame_slot_conditions("prosody0") == ()
        assert frame_slot_conditions("content1") == ("prosody0", "content0")
        assert frame_slot_conditions("detail2")[-1] == "detail1"
        assert FRAME_SLOTS == ("prosody0", "content0", "content1", "detail0", "detail1", "detail2")


class TestStageOrdering:
    def test_duration_needs_prosody(self):
        with pytest.raises(OrderingError):
            generate_duration(None, torch.zeros(3, 8), None)

    def test_attribute_needs_upstream(self):
        with pytest.raises(OrderingError):
            generate_attribute("content", {}, torch.zeros(5, 8), {}, upstream={})
        with pytest.raises(OrderingError):
            generate_attribute("detail", {}, torch.zeros(5, 8), {},
                               upstream={"prosody0": torch.zeros(5, dtype=torch.long)})

    def test_unknown_attribute(self):
        with pytest.raises(ValidationError):
            generate_attribute("timbre", {}, torch.zeros(5, 8), {}, upstream={})


def _request(u, steps=4, seed=0, **kw):
    return SynthesisRequest(phonemes=u.phone_ids[:6], prompt=PromptAudio(u.audio, u.phone_ids, u.durations),
                            steps=steps, seed=seed, **kw)


class TestSynthesis:
    @pytest.mark.parametrize("steps,nfe", [(4, 60), (1, 15)])
    def test_nfe(self, tiny_tts, small_dataset, steps, nfe):
        counter = {}
        res = tiny_tts.synthesize(_request(small_dataset[0], steps=steps), counter=counter)
        assert counter["nfe"] == res.nfe["nfe"] == nfe
        assert counter["duration"] == steps
        assert counter["ph_prosody"] == counter["detail2"] == 2 * steps

    def test_output_length(self, tiny_tts, small_dataset):
        res = tiny_tts.synthesize(_request(small_dataset[0], steps=2))
        assert len(res.waveform) == 200 * int(res.durations.sum()) == 200 * res.codes.num_frames
        assert len(res.durations) == len(res.ph_prosody) == 6

    def test_deterministic(self, tiny_tts, small_dataset):
        a = tiny_tts.synthesize(_request(small_dataset[1], steps=2, seed=5))
        b = tiny_tts.synthesize(_request(small_dataset[1], steps=2, seed=5))
        assert np.array_equal(a.waveform, b.waveform) and a.codes.equals(b.codes)

    def test_timbre_prompt(self, tiny_tts, small_dataset):
        other = small_dataset[4]
        res = tiny_tts.synthesize(_request(small_dataset[0], steps=1, timbre_prompt=PromptAudio(other.audio)))
        assert np.array_equal(res.codes.h_t, tiny_tts.codec.extract_timbre(other.audio))

    def test_unaligned_prompt(self, tiny_tts, small_dataset):
        u = small_dataset[0]
        req = SynthesisRequest(phonemes=u.phone_ids[:4], prompt=PromptAudio(u.audio), steps=1)
        assert np.isfinite(tiny_tts.synthesize(req).waveform).all()

    def test_prompt_budget(self, codec, small_dataset):
        u = small_dataset[0]
        fp = factorize_prompt(codec, PromptAudio(u.audio, u.phone_ids, u.durations), max_frames=30)
        assert fp.num_frames <= 30 and fp.num_frames == int(fp.durations.sum())
        assert all(len(v) == fp.num_frames for v in fp.codes.values())
        assert len(fp.ph_prosody) == len(fp.durations)

    def test_stage_error_names_stage(self, tiny_tts, small_dataset):
        def broken(*args):
            raise RuntimeError("boom")

        with pytest.raises(SynthesisError) as info:
            tiny_tts.synthesize(_request(small_dataset[0], steps=1), denoisers={"content1": broken})
        assert info.value.stage == "content"

    def test_bad_alignment_is_a_prompt_error(self, tiny_tts, small_dataset):
        u = small_dataset[0]
        req = SynthesisRequest(phonemes=u.phone_ids[:4],
                               prompt=PromptAudio(u.audio, u.phone_ids, u.durations + 1), steps=1)
        with pytest.raises(SynthesisError) as info:
            tiny_tts.synthesize(req)
        assert info.value.stage == "factorize_prompt"

    def test_bad_phoneme(self, tiny_tts, small_dataset):
        u = small_dataset[0]
        req = SynthesisRequest(phonemes=np.array([1, 999]), prompt=PromptAudio(u.audio), steps=1)
        with pytest.raises(SynthesisError):
            tiny_tts.synthesize(req)

    def test_save_load(self, tiny_tts, small_dataset, tmp_path):
        tiny_tts.save(tmp_path / "t.ckpt")
        back = FactorizedTTS.load(tmp_path / "t.ckpt")
        req = _request(small_dataset[2], steps=1)
        assert np.array_equal(back.synthesize(req).waveform, tiny_tts.synthesize(req).waveform)


def oracle_denoisers(codec, u, max_duration=127):
    """One-hot denoisers that know the source utterance's codes and durations."""
    out = codec.factorize(u.audio)
    k = codec.network_.config.codebook_size
    pooled = phoneme_pool(out.pre_quant["prosody"][0], u.durations, codec.network_.quantizers["prosody"])
    table = {"ph_prosody": one_hot_oracle(pooled, k),
             "duration": one_hot_oracle(u.durations, max_duration + 1)}
    for attr in ("prosody", "content", "detail"):
        for lvl in range(out.codes[attr].shape[1]):
            table[f"{attr}{lvl}"] = one_hot_oracle(out.codes[attr][0, lvl], k)
    return table


@pytest.mark.parametrize("steps", [4, 1])
def test_oracle_end_to_end_matches_codec_reconstruction(tiny_tts, small_dataset, steps):
    u = small_dataset[3]
    t0 = time.time()
    req = SynthesisRequest(phonemes=u.phone_ids, prompt=PromptAudio(u.audio, u.phone_ids, u.durations),
                           steps=steps, seed=1)
    res = tiny_tts.synthesize(req, denoisers=oracle_denoisers(tiny_tts.codec, u))
    assert np.array_equal(res.durations, u.durations)
    assert np.array_equal(res.waveform, tiny_tts.codec.reconstruct(u.audio))
    assert time.time() - t0 < 60


def test_predict(tiny_tts, small_dataset):
    waves = tiny_tts.predict([_request(small_dataset[0], steps=1), _request(small_dataset[1], steps=1)])
    assert len(waves) == 2


def test_needs_codec():
    with pytest.raises(ValidationError):
        FactorizedTTS(config=TTSConfig(**TINY_TTS)).initialize()
