import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from factorized_tts._validation import EmptyInputError, ValidationError
from factorized_tts.fvq import FVQBranch, codebook_perplexity, nearest_codeword, quantize_vector


def brute_force_nn(v, codebook):
    """Independent oracle: plain Python loop, strict < keeps the first minimum."""
    best, best_d = 0, None
    for k, row in enumerate(codebook):
        d = sum((float(a) - float(b)) ** 2 for a, b in zip(v, row))
        if best_d is None or d < best_d:
            best, best_d = k, d
    return best


class TestQuantizeVector:
    CB = [[0.0, 0.0], [1.0, 1.0]]

    def test_nearest(self):
        idx, q = quantize_vector([0.9, 0.8], self.CB)
        assert idx == 1 and q.tolist() == [1.0, 1.0]

    def test_exact_match(self):
        idx, q = quantize_vector([0.0, 0.0], self.CB)
        assert idx == 0 and q.tolist() == [0.0, 0.0]

    def test_tie_lowest_index(self):
        assert quantize_vector([0.5, 0.5], self.CB)[0] == 0

    @pytest.mark.parametrize("bad", [[np.nan, 0.0], [np.inf, 1.0]])
    def test_non_finite(self, bad):
        with pytest.raises(ValidationError):
            quantize_vector(bad, self.CB)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            quantize_vector([1.0, 2.0, 3.0], self.CB)

    @given(arrays(np.float64, 3, elements=st.floats(-4, 4)),
           arrays(np.float64, (6, 3), elements=st.floats(-4, 4)))
    @settings(max_examples=200, deadline=None)
    def test_matches_oracle(self, v, cb):
        idx, q = quantize_vector(v, cb)
        assert idx == brute_force_nn(v, cb)
        assert 0 <= idx < len(cb)
        np.testing.assert_array_equal(q, cb[idx])

    def test_duplicate_entries_pick_first(self):
        cb = np.array([[2.0, 2.0], [1.0, 1.0], [1.0, 1.0]])
        assert quantize_vector([1.0, 1.0], cb)[0] == 1


def test_batched_oracle_agreement():
    gen = torch.Generator().manual_seed(0)
    v = torch.randn(500, 8, generator=gen, dtype=torch.float64)
    cb = torch.randn(64, 8, generator=gen, dtype=torch.float64)
    idx, q = nearest_codeword(v, cb, chunk=37)
    oracle = [brute_force_nn(row.tolist(), cb.tolist()) for row in v]
    assert idx.tolist() == oracle
    assert torch.equal(q, cb[idx])


def _identity_branch(levels=1, dim=2, k=4):
    br = FVQBranch("prosody", dim, levels, codebook_size=k, bottleneck=False)
    return br


class TestBranch:
    def test_codeword_input_zero_commitment(self):
        br = _identity_branch()
        with torch.no_grad():
            br.codebooks[0] = torch.tensor([[0.0, 0.0], [1.0, -1.0], [3.0, 2.0], [-2.0, 5.0]])
        h = br.codebooks[0][torch.tensor([2, 2, 1])].detach().unsqueeze(0)
        out = br(h)
        assert out.codes[0, 0].tolist() == [2, 2, 1]
        assert float(out.commit_loss) == 0.0
        assert torch.equal(out.z, h)

    def test_commitment_positive_off_codebook(self):
        br = _identity_branch()
        out = br(torch.full((1, 3, 2), 0.123456))
        assert float(out.commit_loss) > 0

    def test_codes_in_range_and_shapes(self):
        br = FVQBranch("detail", 16, codebook_size=32, codebook_dim=8)
        out = br(torch.randn(2, 7, 16))
        assert out.codes.shape == (2, 3, 7)
        assert int(out.codes.min()) >= 0 and int(out.codes.max()) < 32
        assert out.z.shape == (2, 7, 16)
        assert out.pre_quant.shape == (2, 7, 8)

    def test_residual_error_non_increasing(self):
        torch.manual_seed(0)
        br = FVQBranch("content", 16, codebook_size=64, codebook_dim=8)
        v = br.project_down(torch.randn(1, 200, 16)).detach()
        codes, qs, _ = br.quantize_residual(v)
        err1 = (v - qs[0]).norm(dim=-1)
        err2 = (v - qs[0] - qs[1]).norm(dim=-1)
        assert bool((err2 <= err1 + 1e-6).all())

    @given(st.integers(0, 2**31 - 1), st.sampled_from(["content", "detail"]), st.floats(0.01, 10.0))
    @settings(max_examples=40, deadline=None)
    def test_error_non_increasing_property(self, seed, attribute, scale):
        torch.manual_seed(seed)
        br = FVQBranch(attribute, 12, codebook_size=32, codebook_dim=8)
        v = scale * torch.randn(1, 30, 8)
        _, qs, _ = br.quantize_residual(v)
        errs = [(v - torch.stack(qs[:n + 1]).sum(0)).norm(dim=-1) for n in range(len(qs))]
        for a, b in zip(errs, errs[1:]):
            assert bool((b <= a + 1e-5).all())

    def test_quantized_entries_belong_to_codebooks(self):
        br = FVQBranch("detail", 8, codebook_size=16, codebook_dim=4)
        v = br.project_down(torch.randn(1, 20, 8))
        codes, qs, _ = br.quantize_residual(v)
        for level, q in enumerate(qs):
            assert torch.equal(q, br.level_codebook(level)[codes[level]])

    def test_determinism(self):
        br = FVQBranch("content", 16, codebook_size=32)
        h = torch.randn(1, 10, 16)
        assert torch.equal(br(h).codes, br(h).codes)

    def test_embed_matches_forward(self):
        br = FVQBranch("detail", 16, codebook_size=32)
        out = br(torch.randn(1, 9, 16))
        torch.testing.assert_close(br.embed(out.codes), out.z, rtol=0, atol=1e-6)

    def test_embed_rejects_bad_codes(self):
        br = FVQBranch("content", 4, codebook_size=8)
        with pytest.raises(ValidationError):
            br.embed(torch.zeros(1, 3, 5, dtype=torch.long))
        with pytest.raises(ValidationError):
            br.embed(torch.full((1, 2, 5), 8))

    def test_empty_input(self):
        br = FVQBranch("content", 4, codebook_size=8)
        with pytest.raises(EmptyInputError):
            br(torch.zeros(1, 0, 4))

    def test_bottleneck_switch_changes_codes(self):
        torch.manual_seed(0)
        narrow = FVQBranch("content", 16, codebook_size=64, codebook_dim=8, bottleneck=True)
        torch.manual_seed(0)
        wide = FVQBranch("content", 16, codebook_size=64, bottleneck=False)
        assert wide.codebooks.shape[-1] == 16 and narrow.codebooks.shape[-1] == 8
        h = torch.randn(1, 50, 16)
        assert not torch.equal(narrow(h).codes, wide(h).codes)

    def test_default_levels(self):
        assert [FVQBranch(a, 4).num_levels for a in ("prosody", "content", "detail")] == [1, 2, 3]


def test_straight_through_matches_identity_jacobian():
    """Finite differences on the identity-quantizer surrogate vs autograd through the estimator."""
    torch.manual_seed(1)
    br = FVQBranch("content", 6, codebook_size=16, codebook_dim=8).double()
    h = torch.randn(1, 4, 6, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 4, 6, dtype=torch.float64)
    (br(h).z * w).sum().backward()
    grad_ste = h.grad.clone()

    def surrogate(x):
        return (br.up_proj(br.down_proj(x)) * w).sum()

    eps = 1e-6
    fd = torch.zeros_like(h)
    with torch.no_grad():
        for idx in np.ndindex(*h.shape):
            e = torch.zeros_like(h)
            e[idx] = eps
            fd[idx] = (surrogate(h + e) - surrogate(h - e)) / (2 * eps)
    torch.testing.assert_close(grad_ste, fd, atol=1e-4, rtol=0)


def test_codebook_loss_reaches_codebooks_only_via_codebook_term():
    br = FVQBranch("prosody", 4, codebook_size=8, codebook_dim=2)
    out = br(torch.randn(1, 6, 4))
    out.commit_loss.backward()
    assert br.codebooks.grad is None or float(br.codebooks.grad.abs().sum()) == 0.0
    br.zero_grad()
    out = br(torch.randn(1, 6, 4))
    out.codebook_loss.backward()
    assert float(br.codebooks.grad.abs().sum()) > 0
    assert br.down_proj.weight.grad is None or float(br.down_proj.weight.grad.abs().sum()) == 0.0


class TestPerplexity:
    def test_uniform(self):
        assert codebook_perplexity(np.arange(1024), 1024) == pytest.approx(1024.0, rel=1e-12)

    def test_single_code(self):
        assert codebook_perplexity([5, 5, 5], 1024) == pytest.approx(1.0)

    def test_two_equal(self):
        assert codebook_perplexity([0, 1] * 10, 4) == pytest.approx(2.0)
