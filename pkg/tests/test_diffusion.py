import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from factorized_tts._validation import NumericError, OrderingError, ValidationError
from factorized_tts.diffusion import (
    CountingDenoiser,
    DiffusionState,
    MaskSchedule,
    cfg_combine,
    cfg_train_drop,
    forward_mask,
    mask_ratio,
    masked_ce_loss,
    remask_count,
    remask_step,
    sample,
    temperature_schedule,
    time_grid,
)


class TestMaskRatio:
    def test_knots(self):
        assert mask_ratio(1.0) == 1.0
        assert mask_ratio(1.0 / 3.0) == 0.5
        assert mask_ratio(0.0) == 0.0

    def test_half(self):
        assert abs(mask_ratio(0.5) - 0.70711) < 1e-5

    def test_horizon_scaling(self):
        sched = MaskSchedule(horizon=3.0)
        assert sched(1.0) == 0.5
        assert sched(3.0) == 1.0

    @pytest.mark.parametrize("t", [-0.1, 1.0001, float("nan")])
    def test_out_of_range(self, t):
        with pytest.raises(ValidationError):
            mask_ratio(t)

    def test_monotone(self):
        vals = [mask_ratio(t) for t in np.linspace(0, 1, 200)]
        assert all(b > a for a, b in zip(vals, vals[1:]))


class TestForwardMask:
    def test_zero_time_masks_nothing(self):
        x = torch.arange(50)
        state = forward_mask(x, 0.0, generator=torch.Generator().manual_seed(0), mask_id=99)
        assert state.num_masked == 0

    def test_full_time_masks_all_but_prompt(self):
        x = torch.arange(50)
        state = forward_mask(x, 1.0, prompt_len=7, generator=torch.Generator().manual_seed(0), mask_id=99)
        assert not state.mask[:7].any()
        assert state.mask[7:].all()
        assert torch.equal(state.tokens[:7], x[:7])

    def test_binomial_concentration(self):
        x = torch.zeros(10_000, dtype=torch.long)
        state = forward_mask(x, 1.0 / 3.0, generator=torch.Generator().manual_seed(1), mask_id=5)
        assert 4800 <= state.num_masked <= 5200

    def test_mask_flags_match_tokens(self):
        x = torch.randint(0, 10, (200,), generator=torch.Generator().manual_seed(2))
        state = forward_mask(x, 0.6, prompt_len=20, generator=torch.Generator().manual_seed(3), mask_id=10)
        assert torch.equal(state.mask, state.tokens == 10)


class TestMaskedLoss:
    def _logits_with_nll(self, nlls):
        # two-class logits whose target (class 0) has the requested NLL
        rows = []
        for nll in nlls:
            p = math.exp(-nll)
            rows.append([math.log(p), math.log(1 - p)])
        return torch.tensor(rows, dtype=torch.float64)

    def test_unmasked_excluded(self):
        logits = self._logits_with_nll([0.5, 9.9])
        loss = masked_ce_loss(logits, torch.tensor([0, 0]), torch.tensor([1, 0]))
        assert float(loss) == pytest.approx(0.5, abs=1e-12)

    def test_uniform_logits(self):
        logits = torch.zeros(7, 1024)
        loss = masked_ce_loss(logits, torch.randint(0, 1024, (7,)), torch.ones(7, dtype=torch.bool))
        assert float(loss) == pytest.approx(math.log(1024), abs=1e-4)
        assert float(loss) == pytest.approx(6.9315, abs=1e-4)

    def test_empty_mask(self):
        loss = masked_ce_loss(torch.randn(4, 3), torch.zeros(4, dtype=torch.long), torch.zeros(4))
        assert float(loss) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            masked_ce_loss(torch.randn(4, 3), torch.zeros(5, dtype=torch.long), torch.ones(4))


class TestRemask:
    def _state(self, n_gen, prompt_len=0, t=1.0, mask_id=50):
        tokens = torch.cat([torch.arange(prompt_len), torch.full((n_gen,), mask_id)])
        mask = torch.cat([torch.zeros(prompt_len, dtype=torch.bool), torch.ones(n_gen, dtype=torch.bool)])
        return DiffusionState(tokens=tokens, mask=mask, t=t, prompt_len=prompt_len, mask_id=mask_id)

    def test_budget_example(self):
        # floor(16 * sin(3 pi / 8)) evaluated directly
        assert math.floor(16 * math.sin(3 * math.pi / 8)) == 14
        state = self._state(16)
        new = remask_step(torch.arange(16), torch.rand(16), 0.75, state)
        assert new.num_masked == 14

    def test_terminal_commits_everything(self):
        state = self._state(16)
        new = remask_step(torch.arange(16), torch.rand(16), 0.0, state)
        assert new.num_masked == 0
        assert torch.equal(new.tokens, torch.arange(16))

    def test_committed_never_remasked(self):
        state = DiffusionState(tokens=torch.tensor([7, 50]), mask=torch.tensor([False, True]),
                               t=1.0, prompt_len=0, mask_id=50)
        # budget floor(2 * sigma) == 1 at sigma = 0.5
        new = remask_step(torch.tensor([3, 4]), torch.tensor([1.0, 0.2]), 1.0 / 3.0, state)
        assert new.mask.tolist() == [False, True]
        assert int(new.tokens[0]) == 7

    def test_lowest_confidence_remasked(self):
        state = self._state(4)
        conf = torch.tensor([0.9, 0.1, 0.5, 0.3])
        new = remask_step(torch.arange(4), conf, 1.0 / 3.0, state)  # budget 2
        assert new.mask.tolist() == [False, True, False, True]

    def test_ordering_error(self):
        state = self._state(4, t=0.5)
        with pytest.raises(OrderingError):
            remask_step(torch.arange(4), torch.rand(4), 0.75, state)

    def test_prompt_untouched_with_gumbel(self):
        state = self._state(10, prompt_len=5)
        gen = torch.Generator().manual_seed(0)
        new = remask_step(torch.arange(15), torch.rand(15), 0.5, state, gen, gumbel=True)
        assert not new.mask[:5].any()
        assert torch.equal(new.tokens[:5], torch.arange(5))
        assert new.num_masked == math.floor(10 * mask_ratio(0.5))


class TestCFG:
    def test_alpha_zero_identity(self):
        g = torch.randn(5, 11)
        assert torch.equal(cfg_combine(g, torch.randn(5, 11), 0.0), g)

    def test_hand_example(self):
        out = cfg_combine(torch.tensor([[1.0, 3.0]], dtype=torch.float64),
                          torch.tensor([[0.0, 1.0]], dtype=torch.float64), 1.0)
        np.testing.assert_allclose(out.numpy(), [[4 / 3, 10 / 3]], atol=1e-12)

    @given(st.floats(0.0, 5.0), st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_std_preserved(self, alpha, seed):
        gen = torch.Generator().manual_seed(seed)
        g_c = torch.randn(6, 20, generator=gen, dtype=torch.float64)
        g_u = torch.randn(6, 20, generator=gen, dtype=torch.float64)
        out = cfg_combine(g_c, g_u, alpha)
        np.testing.assert_allclose(out.std(-1, unbiased=False), g_c.std(-1, unbiased=False), atol=1e-6)

    @given(st.floats(-3.0, 5.0))
    @settings(max_examples=25, deadline=None)
    def test_equal_branches(self, alpha):
        g = torch.randn(3, 9, dtype=torch.float64)
        np.testing.assert_allclose(cfg_combine(g, g.clone(), alpha), g, atol=1e-6)

    def test_zero_spread_fallback(self):
        g_c = torch.tensor([[1.0, 1.0, 1.0]])
        out = cfg_combine(g_c, torch.tensor([[1.0, 1.0, 1.0]]), 2.0)
        assert torch.equal(out, g_c)

    def test_sequence_axis(self):
        g_c = torch.randn(4, 8, dtype=torch.float64)
        out = cfg_combine(g_c, torch.randn(4, 8, dtype=torch.float64), 1.0, axis="sequence")
        assert float(out.std(unbiased=False)) == pytest.approx(float(g_c.std(unbiased=False)), abs=1e-9)


class TestCfgDrop:
    def test_never(self):
        gen = torch.Generator().manual_seed(0)
        prompt = torch.arange(5)
        assert all(cfg_train_drop(prompt, gen, 0.0).numel() == 5 for _ in range(100))

    def test_always(self):
        gen = torch.Generator().manual_seed(0)
        assert all(cfg_train_drop(torch.arange(5), gen, 1.0).numel() == 0 for _ in range(100))

    def test_rate(self):
        gen = torch.Generator().manual_seed(0)
        drops = sum(cfg_train_drop(torch.arange(3), gen, 0.15).numel() == 0 for _ in range(10_000))
        assert 0.13 <= drops / 10_000 <= 0.17


def onehot_oracle(target: torch.Tensor, vocab: int, scale: float = 1e4):
    """Denoiser returning a (finite) one-hot posterior on the true sequence."""
    def denoiser(tokens, prompt_len, cond, t):
        n = tokens.shape[0]
        truth = target[-n:]
        return F_onehot(truth, vocab) * scale
    return denoiser


def F_onehot(idx, vocab):
    return torch.nn.functional.one_hot(idx, vocab).float()


class TestSample:
    def test_remask_schedule_counts(self):
        target = torch.randint(0, 30, (16,), generator=torch.Generator().manual_seed(0))
        counts = []
        sample(onehot_oracle(target, 30), 16, steps=4, vocab_size=30,
               generator=torch.Generator().manual_seed(1),
               callback=lambda k, s: counts.append(s.num_masked))
        expected = [math.floor(16 * math.sin(math.pi * u / 2)) for u in (0.75, 0.5, 0.25, 0.0)]
        assert expected == [14, 11, 6, 0]
        assert counts == expected

    @pytest.mark.parametrize("steps", [1, 2, 4, 7])
    def test_oracle_recovers_target(self, steps):
        target = torch.randint(0, 5, (23,), generator=torch.Generator().manual_seed(steps))
        out = sample(onehot_oracle(target, 5), 23, steps=steps, vocab_size=5, alpha=1.0,
                     generator=torch.Generator().manual_seed(0))
        assert torch.equal(out, target)

    def test_prompt_is_immutable(self):
        target = torch.randint(0, 9, (12,))
        prompt = torch.tensor([1, 2, 3])
        full = torch.cat([prompt, target])
        seen = []
        sample(onehot_oracle(full, 9), 12, prompt=prompt, steps=4, vocab_size=9, alpha=1.0,
               generator=torch.Generator().manual_seed(0),
               callback=lambda k, s: seen.append(s.tokens[:3].clone()))
        assert all(torch.equal(s, prompt) for s in seen)

    def test_determinism(self):
        def noisy(tokens, p, cond, t):
            g = torch.Generator().manual_seed(int(t * 1000) + tokens.shape[0])
            return torch.randn(tokens.shape[0], 40, generator=g)
        a = sample(noisy, 20, steps=4, vocab_size=40, alpha=1.0, generator=torch.Generator().manual_seed(5))
        b = sample(noisy, 20, steps=4, vocab_size=40, alpha=1.0, generator=torch.Generator().manual_seed(5))
        assert torch.equal(a, b)

    def test_nfe_with_and_without_cfg(self):
        target = torch.zeros(8, dtype=torch.long)
        counter = {}
        den = CountingDenoiser(onehot_oracle(target, 4), counter)
        sample(den, 8, steps=4, vocab_size=4, alpha=1.0)
        assert den.calls == 8
        den2 = CountingDenoiser(onehot_oracle(target, 4))
        sample(den2, 8, steps=4, vocab_size=4, alpha=0.0)
        assert den2.calls == 4

    def test_non_finite_logits(self):
        def bad(tokens, p, cond, t):
            out = torch.zeros(tokens.shape[0], 4)
            if t < 0.6:
                out[0, 0] = float("nan")
            return out
        with pytest.raises(NumericError) as err:
            sample(bad, 5, steps=4, vocab_size=4, generator=torch.Generator().manual_seed(0))
        assert err.value.step == 2

    def test_uncond_pass_sees_no_prompt(self):
        lengths = []

        def den(tokens, p, cond, t):
            lengths.append((tokens.shape[0], p, None if cond is None else cond.shape[0]))
            return torch.zeros(tokens.shape[0], 6)
        sample(den, 4, prompt=torch.tensor([1, 1, 1]), cond=torch.ones(7, 2), steps=1, vocab_size=6, alpha=1.0)
        assert lengths == [(7, 3, 7), (4, 0, 4)]

    @given(st.integers(1, 40), st.integers(0, 10), st.integers(1, 6), st.integers(0, 2**31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_invariants(self, n, prompt_len, steps, seed):
        gen = torch.Generator().manual_seed(seed)
        vocab = 7
        prompt = torch.randint(0, vocab, (prompt_len,), generator=gen)

        def den(tokens, p, cond, t):
            g = torch.Generator().manual_seed(tokens.shape[0] * 31 + int(t * 997))
            return torch.randn(tokens.shape[0], vocab, generator=g)
        grid = time_grid(steps)
        prev_unmasked = torch.zeros(n, dtype=torch.bool)
        record = []

        def cb(k, s):
            record.append((k, s.tokens.clone(), s.mask.clone()))
        out = sample(den, n, prompt=prompt, steps=steps, vocab_size=vocab, alpha=1.0, gumbel=False,
                     generator=gen, callback=cb)
        for k, tokens, mask in record:
            assert torch.equal(tokens[:prompt_len], prompt)
            assert int(mask.sum()) == remask_count(n, grid[k + 1])
            unmasked = ~mask[prompt_len:]
            assert bool((unmasked | ~prev_unmasked).all())  # monotone commitment
            prev_unmasked = unmasked
        assert out.shape == (n,) and int(out.max()) < vocab


def test_temperature_schedule():
    assert temperature_schedule(4) == [1.5, 1.0, 0.5, 0.0]
    assert temperature_schedule(1) == [0.0]
