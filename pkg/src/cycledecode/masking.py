"""Cyclical masking: one forward pass that trains full-path and
decode-only prediction simultaneously.

Positions are tagged by a binary cycle mask. Cycle-start positions feed
``base + thinking ⊙ mask`` into the decoding layers (the full path);
the remaining positions feed the base states alone, which is exactly what
the light passes see at inference time. ``base`` is either the raw token
embeddings or the encoding-layer outputs, depending on the plan variant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autograd import Tensor, add, mul
from .errors import ConfigError
from .model import Model

VARIANTS = ("embedding", "encoding")


@dataclass
class CyclePlan:
    """Cycle lengths and the masking variant.

    ``tau_infer`` defaults to the training cycle length but may differ;
    a model trained at one cycle length can be decoded at another.
    """

    tau_train: int = 2
    tau_infer: Optional[int] = None
    variant: str = "embedding"
    mask_anchor: int = 0

    def validate(self, model: Optional[Model] = None) -> None:
        if self.tau_train < 1:
            raise ConfigError(f"tau_train must be >= 1, got {self.tau_train}")
        if self.tau_infer is not None and self.tau_infer < 1:
            raise ConfigError(f"tau_infer must be >= 1, got {self.tau_infer}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if not 0 <= self.mask_anchor < self.tau_train:
            raise ConfigError(
                f"mask_anchor must lie in [0, tau_train), got {self.mask_anchor}"
            )
        if model is not None and self.variant == "encoding" and model.config.n_encoding < 1:
            raise ConfigError("the encoding variant requires at least one encoding layer")

    def resolved_tau_infer(self) -> int:
        return self.tau_train if self.tau_infer is None else self.tau_infer


def build_cycle_mask(n: int, tau: int, anchor: int = 0) -> np.ndarray:
    """Binary mask with ones where (position - anchor) mod tau == 0."""
    if tau < 1:
        raise ConfigError(f"tau must be >= 1, got {tau}")
    if n < 1:
        raise ConfigError(f"mask length must be >= 1, got {n}")
    if not 0 <= anchor < tau:
        raise ConfigError(f"anchor must lie in [0, tau), got {anchor}")
    positions = np.arange(n)
    return ((positions - anchor) % tau == 0).astype(np.uint8)


def masked_forward(
    model: Model,
    tokens,
    plan: CyclePlan,
    anchor: Optional[int] = None,
    tau: Optional[int] = None,
) -> Tensor:
    """Full training-style forward pass over a sequence (or batch of them).

    Returns logits of shape [n, V] (or [B, n, V]). ``anchor`` and ``tau``
    default to the plan's training settings; the inference replay oracle
    overrides them to align with a realized generation.
    """
    plan.validate(model)
    tokens = np.asarray(tokens)
    n = tokens.shape[-1]
    if n > model.config.max_seq_len:
        raise ConfigError(
            f"sequence length {n} exceeds max_seq_len={model.config.max_seq_len}"
        )
    tau = plan.tau_train if tau is None else tau
    anchor = plan.mask_anchor if anchor is None else anchor
    part = model.partition

    positions = np.arange(n)
    h_emb = model.embed_tokens(tokens)
    h_enc = model.forward_range(h_emb, part.encoding.start, part.encoding.stop, positions)
    h_think = model.forward_range(h_enc, part.thinking.start, part.thinking.stop, positions)

    mask = build_cycle_mask(n, tau, anchor % tau)
    mask_col = Tensor(mask[:, None].astype(h_think.dtype))
    base = h_emb if plan.variant == "embedding" else h_enc
    h_masked = add(base, mul(h_think, mask_col))

    h_out = model.forward_range(h_masked, part.decoding.start, part.decoding.stop, positions)
    return model.lm_head(h_out)
