"""Masked discrete diffusion over token sequences.

Forward process: every non-prompt token is replaced by ``[MASK]`` independently
with probability ``sigma(t) = sin(pi t / 2T)``.  Reverse process: predict all
masked tokens, keep the confident ones and re-mask exactly
``floor(N_gen * sigma(t_next))`` of the least confident, repeating down a
uniform time grid until nothing is masked.  Classifier-free guidance mixes a
prompted and an unprompted prediction and rescales the result back to the
prompted logits' standard deviation.

A denoiser is any callable ``denoiser(tokens, prompt_len, cond, t) -> logits``
where ``tokens`` is a LongTensor [N] (prompt first, ``mask_id`` marking masked
positions) and ``logits`` is [N, V].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import mpmath
import torch
import torch.nn.functional as F

from ._validation import NumericError, OrderingError, ValidationError, check_probability


@dataclass(frozen=True)
class MaskSchedule:
    horizon: float = 1.0

    def __post_init__(self):
        if not self.horizon > 0:
            raise ValidationError("schedule horizon must be positive")

    def __call__(self, t: float) -> float:
        return mask_ratio(t, self)


def mask_ratio(t: float, schedule: MaskSchedule = MaskSchedule()) -> float:
    """sin(pi t / 2T), correctly rounded to double precision.

    Correct rounding makes the knots exact: sigma(T) = 1 and sigma(T/3) = 0.5.
    """
    t = float(t)
    T = schedule.horizon
    if not 0.0 <= t <= T:
        raise ValidationError(f"t must lie in [0, {T}], got {t}")
    with mpmath.workprec(128):
        return float(mpmath.sin(mpmath.pi * mpmath.mpf(t) / (2 * mpmath.mpf(T))))


def mask_ratio_tensor(t: torch.Tensor, schedule: MaskSchedule = MaskSchedule()) -> torch.Tensor:
    """Vectorized schedule for training batches (plain float arithmetic)."""
    return torch.sin(math.pi * t / (2 * schedule.horizon))


@dataclass
class DiffusionState:
    tokens: torch.Tensor   # LongTensor [N]; mask_id where masked
    mask: torch.Tensor     # BoolTensor [N]
    t: float
    prompt_len: int
    mask_id: int

    def __post_init__(self):
        if self.tokens.shape != self.mask.shape:
            raise ValidationError("tokens and mask must have the same shape")
        if not 0 <= self.prompt_len <= self.tokens.shape[0]:
            raise ValidationError("prompt_len out of range")

    @property
    def num_generated(self) -> int:
        return self.tokens.shape[0] - self.prompt_len

    @property
    def num_masked(self) -> int:
        return int(self.mask.sum())


def forward_mask(x: torch.Tensor, t: float, prompt_len: int = 0, generator: torch.Generator | None = None,
                 mask_id: int | None = None, schedule: MaskSchedule = MaskSchedule()) -> DiffusionState:
    """Corrupt ``x`` [N] at time ``t``; the first ``prompt_len`` tokens stay clean."""
    x = torch.as_tensor(x, dtype=torch.long)
    if x.ndim != 1 or x.shape[0] < 1:
        raise ValidationError("forward_mask expects a non-empty 1-D token sequence")
    if mask_id is None:
        mask_id = int(x.max()) + 1
    sigma = mask_ratio(t, schedule)
    mask = torch.rand(x.shape[0], generator=generator, dtype=torch.float64) < sigma
    mask[:prompt_len] = False
    tokens = torch.where(mask, torch.full_like(x, mask_id), x)
    return DiffusionState(tokens=tokens, mask=mask, t=float(t), prompt_len=prompt_len, mask_id=mask_id)


def masked_ce_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood over masked positions (0 when nothing is masked).

    logits: [..., N, V]; targets, mask: [..., N].
    """
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise ValidationError(
            f"shape mismatch: logits {tuple(logits.shape)}, targets {tuple(targets.shape)}, "
            f"mask {tuple(mask.shape)}")
    mask = mask.bool()
    if not mask.any():
        return logits.sum() * 0.0
    nll = F.cross_entropy(logits[mask], targets[mask].long(), reduction="mean")
    return nll


def remask_count(num_generated: int, t: float, schedule: MaskSchedule = MaskSchedule()) -> int:
    return math.floor(num_generated * mask_ratio(t, schedule))


def gumbel_noise(shape, generator: torch.Generator | None = None) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    u = u.clamp(1e-20, 1 - 1e-12)
    return -torch.log(-torch.log(u))


def remask_step(x0_hat: torch.Tensor, confidence: torch.Tensor, t_next: float, state: DiffusionState,
                generator: torch.Generator | None = None, gumbel: bool = False, gumbel_scale: float = 1.0,
                schedule: MaskSchedule = MaskSchedule()) -> DiffusionState:
    """Commit predictions and re-mask the ``floor(N_gen * sigma(t_next))`` least confident.

    Tokens already committed in ``state`` count as confidence 1 and are only
    re-masked if the budget exceeds the number of currently masked positions
    (which never happens inside :func:`sample`).  Gumbel noise, when enabled,
    perturbs candidate confidences only.
    """
    if t_next > state.t:
        raise OrderingError(f"t_next={t_next} is after the current time {state.t}")
    n = state.tokens.shape[0]
    p = state.prompt_len
    budget = remask_count(state.num_generated, t_next, schedule)

    committed = torch.where(state.mask, x0_hat.long(), state.tokens)
    scores = confidence.detach().to(torch.float64).clone()
    if gumbel:
        scores = scores + gumbel_scale * gumbel_noise(scores.shape, generator)
    scores = torch.where(state.mask, scores, torch.full_like(scores, math.inf))

    gen_scores = scores[p:]
    order = torch.sort(gen_scores, stable=True).indices
    chosen = order[:budget] + p
    new_mask = torch.zeros(n, dtype=torch.bool)
    new_mask[chosen] = True
    tokens = torch.where(new_mask, torch.full_like(committed, state.mask_id), committed)
    return replace(state, tokens=tokens, mask=new_mask, t=float(t_next))


def cfg_combine(g_cond: torch.Tensor, g_uncond: torch.Tensor, alpha: float, axis: str = "position") -> torch.Tensor:
    """Guided logits rescaled to the conditional logits' standard deviation.

    ``axis="position"`` takes the population std over the vocabulary per position;
    ``axis="sequence"`` over every logit of the sequence.  Where the guided
    logits have zero spread the conditional logits are returned unchanged.
    """
    if g_cond.shape != g_uncond.shape:
        raise ValidationError(f"shape mismatch: {tuple(g_cond.shape)} vs {tuple(g_uncond.shape)}")
    if alpha == 0:
        return g_cond.clone()
    g_cfg = g_cond + alpha * (g_cond - g_uncond)
    if axis == "position":
        dims = (-1,)
    elif axis == "sequence":
        dims = (-2, -1)
    else:
        raise ValidationError("axis must be 'position' or 'sequence'")
    std_cond = g_cond.std(dim=dims, unbiased=False, keepdim=True)
    std_cfg = g_cfg.std(dim=dims, unbiased=False, keepdim=True)
    safe = std_cfg > 0
    rescaled = std_cond * g_cfg / torch.where(safe, std_cfg, torch.ones_like(std_cfg))
    return torch.where(safe, rescaled, g_cond)


def cfg_train_drop(prompt, generator: torch.Generator | None = None, p_cfg: float = 0.15):
    """With probability ``p_cfg`` return an empty prompt instead of ``prompt``."""
    check_probability(p_cfg, "p_cfg")
    drop = bool(torch.rand((), generator=generator, dtype=torch.float64) < p_cfg)
    if not drop:
        return prompt
    if prompt is None:
        return None
    return prompt[:0]


def drop_prompt_condition(cond, prompt_len: int):
    """Remove the prompt rows of a condition bundle (tensor, dict of tensors, or None)."""
    if cond is None:
        return None
    if isinstance(cond, torch.Tensor):
        return cond[prompt_len:]
    if isinstance(cond, dict):
        return {k: drop_prompt_condition(v, prompt_len) for k, v in cond.items()}
    return cond


def top_k_filter(logits: torch.Tensor, k: int | None) -> torch.Tensor:
    if k is None or k <= 0 or k >= logits.shape[-1]:
        return logits
    kth = torch.topk(logits, k, dim=-1).values[..., -1:]
    return logits.masked_fill(logits < kth, -math.inf)


def temperature_schedule(steps: int, start: float = 1.5, end: float = 0.0) -> list[float]:
    """Linear anneal across step indices; a single step uses ``end``."""
    if steps == 1:
        return [float(end)]
    return [start + (end - start) * k / (steps - 1) for k in range(steps)]


def time_grid(steps: int, schedule: MaskSchedule = MaskSchedule()) -> list[float]:
    return [schedule.horizon * (steps - k) / steps for k in range(steps + 1)]


class CountingDenoiser:
    """Wraps a denoiser and counts forward evaluations."""

    def __init__(self, denoiser: Callable, counter: dict | None = None, key: str = "nfe"):
        self.denoiser = denoiser
        self.counter = counter if counter is not None else {}
        self.key = key
        self.counter.setdefault(key, 0)

    def __call__(self, *args, **kwargs):
        self.counter[self.key] += 1
        return self.denoiser(*args, **kwargs)

    @property
    def calls(self) -> int:
        return self.counter[self.key]


@torch.no_grad()
def sample(denoiser: Callable, n: int, prompt=None, cond=None, steps: int = 4, alpha: float = 0.0,
           top_k: int | None = 20, temperatures: list[float] | None = None,
           generator: torch.Generator | None = None, vocab_size: int | None = None,
           mask_id: int | None = None, gumbel: bool = True, gumbel_scale: float = 1.0,
           uncond=None, cfg_axis: str = "position", schedule: MaskSchedule = MaskSchedule(),
           callback: Callable[[int, DiffusionState], None] | None = None) -> torch.Tensor:
    """Generate ``n`` tokens after ``prompt`` in ``steps`` reverse iterations.

    ``cond`` is handed to the denoiser unchanged for the prompted pass; the
    unprompted pass (only run when ``alpha != 0``) receives ``uncond`` or, if
    omitted, ``cond`` with its prompt rows removed.  Returns LongTensor [n].
    """
    if steps < 1:
        raise ValidationError("steps must be >= 1")
    if n < 1:
        raise ValidationError("n must be >= 1")
    prompt = torch.zeros(0, dtype=torch.long) if prompt is None else torch.as_tensor(prompt, dtype=torch.long)
    p = prompt.shape[0]
    if mask_id is None:
        if vocab_size is None:
            raise ValidationError("pass vocab_size or mask_id")
        mask_id = vocab_size
    if temperatures is None:
        temperatures = temperature_schedule(steps)
    if len(temperatures) != steps:
        raise ValidationError("need one temperature per step")
    if uncond is None and alpha != 0:
        uncond = drop_prompt_condition(cond, p)

    tokens = torch.cat([prompt, torch.full((n,), mask_id, dtype=torch.long)])
    mask = torch.zeros(p + n, dtype=torch.bool)
    mask[p:] = True
    state = DiffusionState(tokens=tokens, mask=mask, t=schedule.horizon, prompt_len=p, mask_id=mask_id)
    grid = time_grid(steps, schedule)

    for k in range(steps):
        t_cur, t_next = grid[k], grid[k + 1]
        logits = denoiser(state.tokens, p, cond, t_cur)
        if not torch.isfinite(logits).all():
            raise NumericError("denoiser produced non-finite logits", step=k)
        g = logits[p:].float()
        if alpha != 0:
            g_un = denoiser(state.tokens[p:], 0, uncond, t_cur)
            if not torch.isfinite(g_un).all():
                raise NumericError("unconditional denoiser produced non-finite logits", step=k)
            g = cfg_combine(g, g_un.float(), alpha, cfg_axis)

        filtered = top_k_filter(g, top_k)
        tau = temperatures[k]
        if tau > 0:
            probs = torch.softmax(filtered / tau, dim=-1)
            x0 = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
        else:
            # greedy limit; confidence taken from the untempered filtered distribution
            probs = torch.softmax(filtered, dim=-1)
            x0 = filtered.argmax(-1)
        conf = probs.gather(-1, x0.unsqueeze(-1)).squeeze(-1)

        x0_full = torch.cat([prompt, x0])
        conf_full = torch.cat([torch.ones(p), conf.float()])
        state = remask_step(x0_full, conf_full, t_next, state, generator, gumbel, gumbel_scale, schedule)
        if callback is not None:
            callback(k, state)

    if state.mask.any():
        raise NumericError("tokens remain masked after the final step", step=steps - 1)
    return state.tokens[p:].clone()
