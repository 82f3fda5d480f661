import numpy as np
import pytest

import cycledecode as cd
from cycledecode.training import training_step


def tiny_config(**overrides) -> cd.ModelConfig:
    base = dict(
        vocab_size=257,
        d_model=32,
        n_heads=2,
        d_ff=64,
        n_layers=6,
        n_encoding=2,
        n_thinking=2,
        n_decoding=2,
        max_seq_len=64,
        seed=1,
    )
    base.update(overrides)
    return cd.ModelConfig(**base)


@pytest.fixture
def tiny_model() -> cd.Model:
    return cd.Model(tiny_config())


MEMO_TEXT = (b"the quick brown fox jumps over the lazy dog. " * 2)[:64]


def train_memorizer(tau: int = 2, steps: int = 200, seed: int = 5) -> tuple[cd.Model, np.ndarray]:
    """Overfit a tiny model on one repeated 64-byte sequence."""
    seq = cd.tokenize(MEMO_TEXT)
    cfg = cd.ModelConfig(
        vocab_size=257, d_model=64, n_heads=4, d_ff=128, n_layers=4,
        n_encoding=0, n_thinking=3, n_decoding=1, max_seq_len=96, seed=seed,
    )
    model = cd.Model(cfg)
    plan = cd.CyclePlan(tau_train=tau, variant="embedding")
    opt = cd.AdamW(model.parameters(), lr=3e-3, weight_decay=0.0, total_steps=steps,
                   schedule="cosine", warmup_ratio=0.05)
    batch = seq[None, :]
    for _ in range(steps):
        training_step(model, batch, plan, opt, with_offsets=False)
    return model, seq


@pytest.fixture(scope="session")
def memorizer_tau2():
    return train_memorizer(tau=2)


@pytest.fixture(scope="session")
def memorizer_tau3():
    return train_memorizer(tau=3)
