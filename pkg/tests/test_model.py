import numpy as np
import pytest

import cycledecode as cd
from cycledecode.autograd import Tensor
from cycledecode.checkpoint import load_checkpoint, save_checkpoint
from cycledecode.errors import CacheIntegrityError, ChecksumError, ConfigError, DataError
from cycledecode.model import KvCache, Model
from cycledecode.runconfig import RunConfig
from cycledecode.decoding import SamplerConfig
from cycledecode.masking import CyclePlan
from cycledecode.training import TrainConfig

from conftest import tiny_config


def full_forward(model, tokens, cache=None, write=False, positions=None):
    tokens = np.asarray(tokens)
    if positions is None:
        positions = np.arange(tokens.shape[-1])
    with cd.no_grad():
        h = model.embed_tokens(tokens)
        h = model.forward_range(h, 0, model.config.n_layers, positions, cache, write)
        return model.lm_head(h).data


class TestInit:
    def test_partition_ranges(self):
        cfg = tiny_config(n_layers=8, n_encoding=3, n_thinking=3, n_decoding=2)
        model = Model(cfg)
        assert model.partition.encoding == range(0, 3)
        assert model.partition.thinking == range(3, 6)
        assert model.partition.decoding == range(6, 8)

    def test_no_decoding_layers_rejected(self):
        with pytest.raises(ConfigError):
            Model(tiny_config(n_layers=6, n_encoding=3, n_thinking=3, n_decoding=0))

    def test_partition_sum_rejected(self):
        with pytest.raises(ConfigError):
            Model(tiny_config(n_layers=6, n_encoding=3, n_thinking=3, n_decoding=2))

    def test_same_seed_bit_identical(self):
        a = Model(tiny_config(seed=9))
        b = Model(tiny_config(seed=9))
        for (na, ta), (nb, tb) in zip(a.parameters(), b.parameters()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)

    def test_different_seed_differs(self):
        a = Model(tiny_config(seed=9))
        b = Model(tiny_config(seed=10))
        assert not np.array_equal(a.embedding.data, b.embedding.data)

    def test_untied_embedding_and_head(self):
        model = Model(tiny_config())
        assert model.embedding.data.shape == (257, 32)
        assert model.lm_head_w.data.shape == (32, 257)
        assert not np.shares_memory(model.embedding.data, model.lm_head_w.data)

    @pytest.mark.parametrize("heads,d", [(3, 32), (2, 30)])
    def test_head_geometry_rejected(self, heads, d):
        with pytest.raises(ConfigError):
            Model(tiny_config(n_heads=heads, d_model=d))


class TestEmbed:
    def test_row_zero(self, tiny_model):
        out = tiny_model.embed_tokens(np.array([0]))
        assert np.array_equal(out.data[0], tiny_model.embedding.data[0])

    def test_repeated_token_identical_rows(self, tiny_model):
        out = tiny_model.embed_tokens(np.array([42, 42, 42]))
        assert np.array_equal(out.data[0], out.data[1])
        assert np.array_equal(out.data[1], out.data[2])

    def test_batch_matches_singles(self, tiny_model):
        ids = np.array([5, 17, 201])
        batch = tiny_model.embed_tokens(ids).data
        singles = [tiny_model.embed_tokens(np.array([i])).data[0] for i in ids]
        assert np.array_equal(batch, np.stack(singles))

    def test_out_of_range_rejected(self, tiny_model):
        with pytest.raises(IndexError):
            tiny_model.embed_tokens(np.array([257]))


class TestForwardRange:
    def test_range_composition_exact(self, tiny_model):
        tokens = np.random.default_rng(0).integers(0, 257, size=5)
        pos = np.arange(5)
        with cd.no_grad():
            h = tiny_model.embed_tokens(tokens)
            whole = tiny_model.forward_range(h, 0, 6, pos).data
            part = tiny_model.forward_range(h, 0, 2, pos)
            part = tiny_model.forward_range(part, 2, 4, pos)
            part = tiny_model.forward_range(part, 4, 6, pos).data
        assert np.array_equal(whole, part)

    def test_empty_range_is_identity(self, tiny_model):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 32)).astype(np.float32))
        out = tiny_model.forward_range(x, 2, 2, np.arange(3))
        assert np.array_equal(out.data, x.data)

    def test_incremental_matches_full_recompute(self, tiny_model):
        # k=1 cached pass over position p equals column p of a full pass
        tokens = np.random.default_rng(2).integers(0, 257, size=7)
        full = full_forward(tiny_model, tokens)
        cache = tiny_model.new_cache()
        rows = []
        with cd.no_grad():
            for p, tok in enumerate(tokens):
                h = tiny_model.embed_tokens(np.array([tok]))
                h = tiny_model.forward_range(h, 0, 6, np.array([p]), cache, write_cache=True)
                rows.append(tiny_model.lm_head(h).data[0])
        assert np.abs(np.stack(rows) - full).max() < 1e-5

    def test_causality(self, tiny_model):
        tokens = np.random.default_rng(3).integers(0, 257, size=8)
        base = full_forward(tiny_model, tokens)
        mutated = tokens.copy()
        mutated[5] = (mutated[5] + 11) % 257
        out = full_forward(tiny_model, mutated)
        assert np.array_equal(base[:5], out[:5])
        assert not np.array_equal(base[5:], out[5:])

    def test_positions_must_increase(self, tiny_model):
        x = Tensor(np.zeros((2, 32), dtype=np.float32))
        with pytest.raises(ConfigError):
            tiny_model.forward_range(x, 0, 6, np.array([3, 3]))

    def test_cache_requires_contiguous_positions(self, tiny_model):
        x = Tensor(np.zeros((2, 32), dtype=np.float32))
        with pytest.raises(ConfigError):
            tiny_model.forward_range(x, 0, 6, np.array([0, 2]), tiny_model.new_cache(), True)

    def test_bad_range_rejected(self, tiny_model):
        x = Tensor(np.zeros((1, 32), dtype=np.float32))
        with pytest.raises(ConfigError):
            tiny_model.forward_range(x, 4, 2, np.array([0]))
        with pytest.raises(ConfigError):
            tiny_model.forward_range(x, 0, 7, np.array([0]))

    def test_batched_matches_loop(self, tiny_model):
        rng = np.random.default_rng(4)
        batch = rng.integers(0, 257, size=(3, 6))
        with cd.no_grad():
            h = tiny_model.embed_tokens(batch)
            out = tiny_model.forward_range(h, 0, 6, np.arange(6)).data
        singles = np.stack([full_forward_states(tiny_model, row) for row in batch])
        assert np.abs(out - singles).max() < 1e-5


def full_forward_states(model, tokens):
    with cd.no_grad():
        h = model.embed_tokens(np.asarray(tokens))
        return model.forward_range(h, 0, model.config.n_layers, np.arange(len(tokens))).data


class TestKvCache:
    def test_read_unfilled_raises(self, tiny_model):
        cache = tiny_model.new_cache()
        with pytest.raises(CacheIntegrityError):
            cache.read(0, 1)

    def test_read_pending_raises(self, tiny_model):
        cache = tiny_model.new_cache()
        cache.write(0, np.array([0]), np.zeros((1, 32)), np.zeros((1, 32)))
        cache.mark_pending([0], 0)
        with pytest.raises(CacheIntegrityError):
            cache.read(0, 1)

    def test_attention_read_of_unfilled_slot_raises(self, tiny_model):
        cache = tiny_model.new_cache()
        x = Tensor(np.zeros((1, 32), dtype=np.float32))
        # position 1 with an empty position 0 below it
        with pytest.raises(CacheIntegrityError):
            tiny_model.forward_range(x, 0, 1, np.array([1]), cache, True)

    def test_length_tracks_highest_occupied(self, tiny_model):
        cache = tiny_model.new_cache()
        assert cache.length == 0
        cache.write(2, np.array([0, 1, 2]), np.zeros((3, 32)), np.zeros((3, 32)))
        assert cache.length == 3

    def test_occupancy_states(self):
        cache = KvCache(2, 4, 8)
        cache.write(0, np.array([0]), np.zeros((1, 8)), np.zeros((1, 8)))
        cache.mark_pending([1], 0)
        counts = cache.occupancy_counts()
        assert counts == {"filled": 1, "pending_refill": 1, "empty": 6}


class TestLmHead:
    def test_zero_states_zero_head(self, tiny_model):
        tiny_model.lm_head_w.data[:] = 0.0
        out = tiny_model.lm_head(Tensor(np.zeros((3, 32), dtype=np.float32)))
        assert np.array_equal(out.data, np.zeros((3, 257), dtype=np.float32))

    def test_argmax_tie_breaks_low(self):
        row = np.array([5.0, 5.0, 1.0])
        assert int(np.argmax(row)) == 0

    def test_batch_of_two_matches_singles(self, tiny_model):
        rng = np.random.default_rng(5)
        states = rng.normal(size=(2, 32)).astype(np.float32)
        with cd.no_grad():
            both = tiny_model.lm_head(Tensor(states)).data
            one = tiny_model.lm_head(Tensor(states[:1])).data
            two = tiny_model.lm_head(Tensor(states[1:])).data
        # GEMM kernels differ by batch shape, so equality is up to last-ulp
        assert np.abs(both - np.concatenate([one, two])).max() < 1e-6


def make_run_config(model_cfg) -> RunConfig:
    return RunConfig(
        model=model_cfg,
        plan=CyclePlan(tau_train=2),
        train=TrainConfig(seq_len=32),
        sampler=SamplerConfig(),
        corpus_path="corpus.txt",
        checkpoint_path="model.ckpt",
        report_dir=".",
    )


class TestCheckpoint:
    def test_round_trip_bit_identical(self, tmp_path, tiny_model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_model, make_run_config(tiny_model.config), step=3, tokens_seen=99)
        loaded, run_cfg, state, moments = load_checkpoint(path)
        assert run_cfg.model == tiny_model.config
        assert state["step"] == "3"
        assert state["tokens_seen"] == "99"
        assert moments is None
        for (na, ta), (nb, tb) in zip(tiny_model.parameters(), loaded.parameters()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)

    def test_optimizer_state_round_trip(self, tmp_path, tiny_model):
        opt = cd.AdamW(tiny_model.parameters(), total_steps=10)
        for _, p in tiny_model.parameters():
            p.grad = np.ones_like(p.data)
        opt.step()
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_model, make_run_config(tiny_model.config), 1, 10, opt)
        _, _, state, moments = load_checkpoint(path)
        first, second, step_count = moments
        assert step_count == 1
        for m, m2 in zip(opt.first_moment, first):
            assert np.array_equal(m, m2)
        for v, v2 in zip(opt.second_moment, second):
            assert np.array_equal(v, v2)

    def test_corruption_detected(self, tmp_path, tiny_model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_model, make_run_config(tiny_model.config))
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            load_checkpoint(path)

    def test_truncation_detected(self, tmp_path, tiny_model):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_model, make_run_config(tiny_model.config))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 9])
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_loaded_model_reproduces_logits(self, tmp_path, tiny_model):
        tokens = np.random.default_rng(6).integers(0, 257, size=6)
        want = full_forward(tiny_model, tokens)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, tiny_model, make_run_config(tiny_model.config))
        loaded, _, _, _ = load_checkpoint(path)
        assert np.array_equal(full_forward(loaded, tokens), want)
