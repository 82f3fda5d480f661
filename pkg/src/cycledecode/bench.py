"""Cost model and measurement harness.

The layers-per-token ratio of cycle-based decoding has a closed form:
one full pass of L layers plus tau-1 reuse passes per cycle gives

    (L + (tau - 1) * reuse) / (tau * L)

per generated token, where ``reuse`` is the layer count a light pass
traverses (the decoding range, plus the encoding range in the encoding
variant). The measured counterpart is read off an invocation trace in
exact rational arithmetic, so theory and measurement can be compared with
equality rather than tolerance. Wall-clock throughput is also reported,
but desk-scale CPU runs are compute-bound, so the invocation counts are
the authoritative efficiency metric and wall-clock is advisory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .decoding import (
    SamplerConfig,
    cycle_boundary_pass,
    light_pass,
    prefill,
    sample,
)
from .errors import ConfigError
from .masking import CyclePlan
from .model import LayerPartition, Model
from .trace import InvocationTrace

REPORT_SCHEMA_VERSION = 1


@dataclass
class PltReport:
    n_layers: int
    n_encoding: int
    n_thinking: int
    n_decoding: int
    tau: int
    generated_tokens: int
    theoretical: Fraction
    measured: Fraction
    match: bool


@dataclass
class ScalingFit:
    points: list[tuple[float, float]]
    slope: float
    intercept: float
    r_squared: float

    def predict(self, tokens: float) -> float:
        return self.intercept + self.slope * np.log10(tokens)


def plt_theoretical(n_layers: int, reuse_layers: int, tau: int) -> Fraction:
    """Average fraction of layers traversed per generated token."""
    if not 1 <= reuse_layers <= n_layers:
        raise ConfigError(
            f"reuse_layers must lie in [1, {n_layers}], got {reuse_layers}"
        )
    if tau < 1:
        raise ConfigError(f"tau must be >= 1, got {tau}")
    return Fraction(n_layers + (tau - 1) * reuse_layers, tau * n_layers)


def reuse_layer_count(partition: LayerPartition, variant: str) -> int:
    """Layers traversed by a light pass under the given masking variant."""
    reuse = len(partition.decoding)
    if variant == "encoding":
        reuse += len(partition.encoding)
    return reuse


def measure_plt(
    trace: InvocationTrace,
    partition: LayerPartition,
    generated_tokens: int,
    tau: int,
    reuse_layers: Optional[int] = None,
) -> PltReport:
    """Layers-per-token read off a trace, as an exact rational.

    The trace window starts at the prefill pass, which counts as the first
    full pass of cycle one: per-pass accounting charges it L layer
    invocations no matter how many context positions rode along, which is
    precisely the memory-bound amortization the cost model assumes. The
    ``match`` flag only asserts equality when the generation length is a
    whole number of cycles.
    """
    if not trace.entries:
        raise ConfigError("cannot measure an empty trace")
    if generated_tokens < 1:
        raise ConfigError("generated_tokens must be >= 1")
    total = trace.layer_invocations(partition)
    measured = Fraction(total, generated_tokens * partition.n_layers)
    if reuse_layers is None:
        reuse_layers = len(partition.decoding)
    theoretical = plt_theoretical(partition.n_layers, reuse_layers, tau)
    match = generated_tokens % tau == 0 and measured == theoretical
    return PltReport(
        n_layers=partition.n_layers,
        n_encoding=len(partition.encoding),
        n_thinking=len(partition.thinking),
        n_decoding=len(partition.decoding),
        tau=tau,
        generated_tokens=generated_tokens,
        theoretical=theoretical,
        measured=measured,
        match=match,
    )


def fit_scaling_law(points: Sequence[tuple[float, float]]) -> ScalingFit:
    """Ordinary least squares of loss against log10(tokens).

    The slope is the loss change per decade of training tokens. When both
    residual and total variance are zero the fit is exact and R² is
    defined as 1.
    """
    pts = [(float(t), float(loss)) for t, loss in points]
    if any(t <= 0 for t, _ in pts):
        raise ConfigError("token counts must be positive")
    xs = np.array([np.log10(t) for t, _ in pts], dtype=np.float64)
    ys = np.array([loss for _, loss in pts], dtype=np.float64)
    if np.unique(xs).size < 2:
        raise ConfigError("need at least 2 distinct token counts")
    xm, ym = xs.mean(), ys.mean()
    dx, dy = xs - xm, ys - ym
    slope = float(np.dot(dx, dy) / np.dot(dx, dx))
    intercept = float(ym - slope * xm)
    residuals = ys - (intercept + slope * xs)
    ss_res = float(np.dot(residuals, residuals))
    ss_tot = float(np.dot(dy, dy))
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return ScalingFit(points=pts, slope=slope, intercept=intercept, r_squared=r_squared)


@dataclass
class BenchRow:
    tau: int
    batch: int
    generated_tokens: int
    elapsed_s: float
    tokens_per_sec: float
    layer_invocations: int
    plt_measured: Fraction
    plt_theoretical: Fraction
    match: bool


def _lockstep_generate(model, contexts, gen_len, plan, sampler):
    """Advance independent decode states one pass per round, in lockstep."""
    states, tokens = [], []
    for ctx in contexts:
        state, token, _ = prefill(model, ctx, plan, sampler)
        states.append(state)
        tokens.append([token])
    while any(len(t) < gen_len for t in tokens):
        for state, toks in zip(states, tokens):
            if len(toks) >= gen_len:
                continue
            if state.cycle_phase < state.tau_infer - 1:
                logits = light_pass(model, state, state.last_token)
            else:
                logits = cycle_boundary_pass(model, state, state.last_token)
            token = sample(logits, sampler, state.rng)
            state.last_token = token
            toks.append(token)
    return states, tokens


def throughput_bench(
    model: Model,
    variant: str,
    taus: Sequence[int],
    batch_sizes: Sequence[int],
    gen_len: int,
    context_len: int = 16,
    seed: int = 0,
) -> list[BenchRow]:
    """Wall-clock and invocation-count sweep over (tau, batch) cells.

    Streams in a batch are independent decode states stepped in lockstep,
    one pass per stream per round; contexts are drawn once per
    (batch, stream) so every tau sees the same inputs. Greedy sampling
    keeps the sweep deterministic; the pass schedule depends only on tau
    and the lengths, never on the sampler.
    """
    if gen_len < 1 or context_len < 1:
        raise ConfigError("gen_len and context_len must be >= 1")
    if gen_len + context_len > model.config.max_seq_len:
        raise ConfigError(
            f"context_len + gen_len = {context_len + gen_len} exceeds "
            f"max_seq_len={model.config.max_seq_len}"
        )
    rows: list[BenchRow] = []
    sampler = SamplerConfig(mode="greedy")
    for batch in batch_sizes:
        contexts = [
            np.random.default_rng([seed, batch, stream]).integers(
                0, model.config.vocab_size, size=context_len
            )
            for stream in range(batch)
        ]
        for tau in taus:
            plan = CyclePlan(tau_train=tau, tau_infer=tau, variant=variant)
            start = time.perf_counter()
            states, tokens = _lockstep_generate(model, contexts, gen_len, plan, sampler)
            elapsed = time.perf_counter() - start
            invocations = sum(
                s.trace.layer_invocations(model.partition) for s in states
            )
            plt = measure_plt(
                states[0].trace,
                model.partition,
                len(tokens[0]),
                tau,
                reuse_layers=reuse_layer_count(model.partition, variant),
            )
            total_tokens = sum(len(t) for t in tokens)
            rows.append(
                BenchRow(
                    tau=tau,
                    batch=batch,
                    generated_tokens=total_tokens,
                    elapsed_s=elapsed,
                    tokens_per_sec=total_tokens / elapsed if elapsed > 0 else float("inf"),
                    layer_invocations=invocations,
                    plt_measured=plt.measured,
                    plt_theoretical=plt.theoretical,
                    match=plt.match,
                )
            )
    return rows


def rows_to_tsv(rows: Sequence[BenchRow]) -> str:
    header = (
        "tau\tbatch\tgenerated_tokens\ttokens_per_sec\tlayer_invocations"
        "\tplt_measured\tplt_theoretical\tmatch"
    )
    lines = [f"# schema_version={REPORT_SCHEMA_VERSION}", header]
    for r in rows:
        lines.append(
            f"{r.tau}\t{r.batch}\t{r.generated_tokens}\t{r.tokens_per_sec:.2f}"
            f"\t{r.layer_invocations}\t{r.plt_measured}\t{r.plt_theoretical}\t{r.match}"
        )
    return "\n".join(lines) + "\n"


def rows_to_summary(rows: Sequence[BenchRow], model: Model, variant: str) -> dict:
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "note": (
            "desk-scale CPU runs are compute-bound; layer invocation counts are "
            "the authoritative efficiency metric, wall-clock is advisory"
        ),
        "n_layers": model.config.n_layers,
        "partition": {
            "encoding": len(model.partition.encoding),
            "thinking": len(model.partition.thinking),
            "decoding": len(model.partition.decoding),
        },
        "variant": variant,
        "rows": [
            {
                "tau": r.tau,
                "batch": r.batch,
                "generated_tokens": r.generated_tokens,
                "elapsed_s": round(r.elapsed_s, 4),
                "tokens_per_sec": round(r.tokens_per_sec, 2),
                "layer_invocations": r.layer_invocations,
                "plt_measured": str(r.plt_measured),
                "plt_theoretical": str(r.plt_theoretical),
                "match": r.match,
            }
            for r in rows
        ],
    }
