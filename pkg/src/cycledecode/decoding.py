"""Cycle-based generation with cyclical KV-cache refilling.

Generation proceeds in cycles of ``tau_infer`` tokens. The first pass of a
cycle runs every layer range; the remaining ``tau_infer - 1`` passes run
only the reuse range (decoding layers, plus encoding layers in the
encoding variant) and leave the skipped layers' KV slots marked
PendingRefill. The next cycle's first pass batches all pending tokens
through the skipped ranges, restoring their KV entries before any later
attention can need them, so no verification step is required downstream.

Pass schedule for a cycle length of 3 over context x0..x4:

    pass 0  (prefill)   x0..x4 through all ranges, emits x5
    pass 1  (light)     x5 through the reuse range only, emits x6
    pass 2  (light)     x6 through the reuse range only, emits x7
    pass 3  (boundary)  x5,x6,x7 batched through the skipped ranges
                        (refilling x5, x6 and filling x7), then x7 alone
                        through the decoding range, emits x8
    ...

The cycle mask anchor is chosen so the final context position is a cycle
start; the realized sequence then follows exactly the training-time
masking rule, which is what makes teacher-forced replay reproduce the
inference logits.

A Model is never mutated here and may be shared across streams; each
DecodeState (and its cache) belongs to exactly one generation stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .errors import ConfigError, ContractError, NumericError
from .masking import CyclePlan, build_cycle_mask
from .model import KvCache, Model, SlotState
from .trace import InvocationTrace


@dataclass
class SamplerConfig:
    mode: str = "greedy"
    temperature: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in ("greedy", "temperature"):
            raise ConfigError(f"unknown sampler mode {self.mode!r}")
        if self.mode == "temperature" and self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


def sample(logits_row: np.ndarray, sampler: SamplerConfig, rng: Optional[np.random.Generator] = None) -> int:
    """Greedy argmax (lowest id wins ties) or seeded categorical draw."""
    logits_row = np.asarray(logits_row).reshape(-1)
    if not np.all(np.isfinite(logits_row)):
        raise NumericError("sampler received non-finite logits")
    if sampler.mode == "greedy":
        return int(np.argmax(logits_row))
    if rng is None:
        rng = np.random.default_rng(sampler.seed)
    scaled = logits_row.astype(np.float64) / sampler.temperature
    scaled -= scaled.max()
    probs = np.exp(scaled)
    probs /= probs.sum()
    return int(rng.choice(logits_row.shape[0], p=probs))


@dataclass
class DecodeState:
    """Generation cursor for one stream.

    ``cycle_phase`` counts the light passes completed since the last full
    pass and always equals ``len(pending_refill)``. ``last_token`` is the
    newest sampled token, which has not been forwarded anywhere yet.
    """

    cache: KvCache
    plan: CyclePlan
    tau_infer: int
    mask_anchor: int
    next_position: int
    last_token: int
    pending_refill: list[tuple[int, int]] = field(default_factory=list)
    stored_base: list[np.ndarray] = field(default_factory=list)
    trace: InvocationTrace = field(default_factory=InvocationTrace)
    pass_index: int = 0
    rng: Optional[np.random.Generator] = None

    @property
    def cycle_phase(self) -> int:
        return len(self.pending_refill)

    def check_invariants(self, model: Model) -> None:
        part = model.partition
        boundary = self.next_position - len(self.pending_refill)
        occ = self.cache.occupancy
        if not np.all(occ[:, :boundary] == SlotState.FILLED):
            raise ContractError("settled positions must be Filled at all layers")
        skipped = (
            list(part.encoding) + list(part.thinking)
            if self.plan.variant == "embedding"
            else list(part.thinking)
        )
        for pos, _tok in self.pending_refill:
            if not np.all(occ[list(part.decoding), pos] == SlotState.FILLED):
                raise ContractError("pending positions must be Filled at decoding layers")
            if skipped and not np.all(occ[skipped, pos] == SlotState.PENDING_REFILL):
                raise ContractError("pending positions must be PendingRefill at skipped layers")


@dataclass
class GenerationReport:
    tokens: list[int]
    trace: InvocationTrace
    tau_infer: int
    mask_anchor: int
    context_length: int
    logit_rows: Optional[list[np.ndarray]] = None
    truncated: bool = False
    message: str = ""

    def occupancy_summary(self, state: DecodeState) -> dict[str, int]:
        return state.cache.occupancy_counts()


def _trace_range(state: DecodeState, model: Model, name: str, positions) -> None:
    if len(model.partition.range_of(name)) > 0:
        state.trace.add(state.pass_index, name, positions)


def prefill(
    model: Model,
    context,
    plan: CyclePlan,
    sampler: Optional[SamplerConfig] = None,
    masked_context: bool = True,
) -> tuple[DecodeState, int, np.ndarray]:
    """Run the whole context through all ranges and emit the first token.

    This is the initial full pass of the first cycle. With
    ``masked_context`` (the default) the context's decoding-range inputs
    follow the training-time cyclical mask, anchored so the final context
    position is a cycle start; the unmasked mode routes every context
    position through the full path and is kept for ablation only.
    Returns the new state, the sampled token, and its logits row.
    """
    plan.validate(model)
    sampler = sampler or SamplerConfig()
    sampler.validate()
    context = np.asarray(context, dtype=np.int64).reshape(-1)
    n = context.shape[0]
    if n < 1:
        raise ConfigError("context must be nonempty")
    if n > model.config.max_seq_len:
        raise ConfigError(
            f"context length {n} exceeds max_seq_len={model.config.max_seq_len}"
        )
    tau = plan.resolved_tau_infer()
    anchor = (n - 1) % tau
    part = model.partition
    cache = model.new_cache()
    positions = np.arange(n)

    state = DecodeState(
        cache=cache,
        plan=plan,
        tau_infer=tau,
        mask_anchor=anchor,
        next_position=n,
        last_token=-1,
        rng=np.random.default_rng(sampler.seed),
    )

    with no_grad():
        h_emb = model.embed_tokens(context)
        h_enc = model.forward_range(
            h_emb, part.encoding.start, part.encoding.stop, positions, cache, write_cache=True
        )
        _trace_range(state, model, "encoding", positions)
        h_think = model.forward_range(
            h_enc, part.thinking.start, part.thinking.stop, positions, cache, write_cache=True
        )
        _trace_range(state, model, "thinking", positions)

        if masked_context:
            mask = build_cycle_mask(n, tau, anchor)
        else:
            mask = np.ones(n, dtype=np.uint8)
        base = h_emb if plan.variant == "embedding" else h_enc
        h_masked = ag.add(base, ag.mul(h_think, Tensor(mask[:, None].astype(h_think.dtype))))
        h_out = model.forward_range(
            h_masked, part.decoding.start, part.decoding.stop, positions, cache, write_cache=True
        )
        _trace_range(state, model, "decoding", positions)
        logits = model.lm_head(h_out).data

    state.pass_index += 1
    token = sample(logits[-1], sampler, state.rng)
    state.last_token = token
    return state, token, logits[-1].copy()


def light_pass(model: Model, state: DecodeState, token: int) -> np.ndarray:
    """Forward one token through the reuse range only; returns its logits.

    The decoding-range input is the base state alone, the mask-off branch
    of the training rule. The skipped ranges' KV slots for this position
    are marked PendingRefill until the next cycle boundary.
    """
    if state.cycle_phase >= state.tau_infer - 1:
        raise ContractError(
            f"light pass at cycle phase {state.cycle_phase} with tau={state.tau_infer}"
        )
    part = model.partition
    p = state.next_position
    if p >= model.config.max_seq_len:
        raise ConfigError(f"position {p} exceeds max_seq_len")
    positions = np.array([p])

    with no_grad():
        h_emb = model.embed_tokens(np.array([token]))
        if state.plan.variant == "encoding":
            base = model.forward_range(
                h_emb, part.encoding.start, part.encoding.stop, positions, state.cache, write_cache=True
            )
            _trace_range(state, model, "encoding", positions)
            skipped = part.thinking
        else:
            base = h_emb
            skipped = range(part.encoding.start, part.thinking.stop)
        h_out = model.forward_range(
            base, part.decoding.start, part.decoding.stop, positions, state.cache, write_cache=True
        )
        _trace_range(state, model, "decoding", positions)
        logits = model.lm_head(h_out).data

    state.cache.mark_pending(skipped, p)
    state.pending_refill.append((p, int(token)))
    state.stored_base.append(base.data[0].copy())
    state.next_position = p + 1
    state.pass_index += 1
    return logits[0]


def cycle_boundary_pass(model: Model, state: DecodeState, last_token: int) -> np.ndarray:
    """First pass of a cycle: batched refill, then decode the newest token.

    The pending light-pass tokens plus ``last_token`` go through the
    skipped ranges together, turning their PendingRefill slots Filled.
    Only the newest token continues through the decoding range (its input
    being base + thinking, the cycle-start branch of the training rule);
    the pending tokens' decoding-layer KV from their light passes is never
    overwritten.
    """
    if state.cycle_phase != state.tau_infer - 1:
        raise ContractError(
            f"boundary pass at cycle phase {state.cycle_phase} with tau={state.tau_infer}"
        )
    part = model.partition
    p = state.next_position
    if p >= model.config.max_seq_len:
        raise ConfigError(f"position {p} exceeds max_seq_len")
    pend_positions = [pos for pos, _ in state.pending_refill]
    if pend_positions != list(range(p - len(pend_positions), p)):
        raise ContractError(f"refill batch out of order: {pend_positions} before {p}")
    batch_positions = np.array(pend_positions + [p])

    with no_grad():
        h_emb_new = model.embed_tokens(np.array([int(last_token)]))
        if state.plan.variant == "encoding":
            # Encoding KV for pending tokens was already written by their
            # light passes; only the newest token still needs the encoding
            # range before the batched thinking refill.
            base_new = model.forward_range(
                h_emb_new, part.encoding.start, part.encoding.stop, np.array([p]), state.cache, write_cache=True
            )
            _trace_range(state, model, "encoding", [p])
            think_in = _stack_rows(state.stored_base + [base_new.data[0]], h_emb_new.dtype)
        else:
            base_new = h_emb_new
            enc_in = _stack_rows(state.stored_base + [base_new.data[0]], h_emb_new.dtype)
            enc_out = model.forward_range(
                enc_in, part.encoding.start, part.encoding.stop, batch_positions, state.cache, write_cache=True
            )
            _trace_range(state, model, "encoding", batch_positions)
            think_in = enc_out
        h_think = model.forward_range(
            think_in, part.thinking.start, part.thinking.stop, batch_positions, state.cache, write_cache=True
        )
        _trace_range(state, model, "thinking", batch_positions)

        decode_in = Tensor(base_new.data[-1:] + h_think.data[-1:])
        h_out = model.forward_range(
            decode_in, part.decoding.start, part.decoding.stop, np.array([p]), state.cache, write_cache=True
        )
        _trace_range(state, model, "decoding", [p])
        logits = model.lm_head(h_out).data

    state.pending_refill.clear()
    state.stored_base.clear()
    state.next_position = p + 1
    state.pass_index += 1
    return logits[0]


def _stack_rows(rows: list[np.ndarray], dtype) -> Tensor:
    return Tensor(np.stack(rows).astype(dtype, copy=False))


def generate(
    model: Model,
    context,
    max_new_tokens: int,
    plan: CyclePlan,
    sampler: Optional[SamplerConfig] = None,
    stop_token: Optional[int] = None,
    collect_logits: bool = False,
    masked_context: bool = True,
) -> tuple[GenerationReport, DecodeState]:
    """Generate up to ``max_new_tokens`` tokens in cycles of ``tau_infer``.

    Stops early on ``stop_token`` (included in the output) or when the
    cache is full, in which case the report is flagged truncated and the
    partial output returned. A generation that ends mid-cycle leaves the
    trailing PendingRefill slots untouched.
    """
    if max_new_tokens < 1:
        raise ConfigError(f"max_new_tokens must be >= 1, got {max_new_tokens}")
    sampler = sampler or SamplerConfig()
    state, token, first_logits = prefill(model, context, plan, sampler, masked_context)
    n_ctx = int(np.asarray(context).reshape(-1).shape[0])
    tokens = [token]
    logit_rows = [first_logits] if collect_logits else None
    report = GenerationReport(
        tokens=tokens,
        trace=state.trace,
        tau_infer=state.tau_infer,
        mask_anchor=state.mask_anchor,
        context_length=n_ctx,
        logit_rows=logit_rows,
    )
    if stop_token is not None and token == stop_token:
        return report, state

    while len(tokens) < max_new_tokens:
        if state.next_position >= model.config.max_seq_len:
            report.truncated = True
            report.message = (
                f"generation stopped at max_seq_len={model.config.max_seq_len}; "
                f"returning {len(tokens)} of {max_new_tokens} tokens"
            )
            break
        if state.cycle_phase < state.tau_infer - 1:
            logits = light_pass(model, state, state.last_token)
        else:
            logits = cycle_boundary_pass(model, state, state.last_token)
        token = sample(logits, sampler, state.rng)
        state.last_token = token
        tokens.append(token)
        if collect_logits:
            logit_rows.append(logits.copy())
        if stop_token is not None and token == stop_token:
            break
    return report, state
