import math
import struct

import numpy as np
import pytest

from lipdepth import tensor as T
from lipdepth.model import (CHECKPOINT_MAGIC, CheckpointError, ConfigError, DropTrace, ViTConfig, build_vit,
                            count_active_blocks, forward, load_checkpoint, paper_shape_config,
                            parameter_shapes, save_checkpoint)
from lipdepth.rng import Rng
from lipdepth.schedule import DropSchedule, custom_schedule, linear_schedule, no_drop_schedule
from lipdepth.tensor import Tensor, backward, cross_entropy

from oracles import central_difference

TINY = dict(image_size=8, patch_size=4, embed_dim=8, depth=3, heads=2, mlp_ratio=2.0)

# sum over l of 0.7**(l/12), l = 1..12, at 30 digits (mpmath)
EXPECTED_ACTIVE_K07 = 9.94396676926462079779433489523


def tiny(schedule=None, **kw):
    cfg = ViTConfig(**{**TINY, **kw})
    return build_vit(cfg, schedule or no_drop_schedule(cfg.depth), Rng(0))


def batch(n=4, size=8, seed=1):
    return Rng(seed).uniform((n, 3, size, size)).astype(np.float32)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            ViTConfig(image_size=30, patch_size=4)
        with pytest.raises(ConfigError):
            ViTConfig(embed_dim=10, heads=4)
        with pytest.raises(ConfigError):
            ViTConfig(droppath_mode="scaled")
        with pytest.raises(ConfigError):
            ViTConfig.from_dict({"depth": 3, "width": 2})

    def test_roundtrip(self):
        cfg = ViTConfig(**TINY)
        assert ViTConfig.from_dict(cfg.to_dict()) == cfg

    def test_parameter_shapes(self):
        cfg = ViTConfig(**TINY)
        shapes = dict(parameter_shapes(cfg))
        assert shapes["patch_embed.weight"] == (48, 8)
        assert shapes["pos_embed"] == (1, 5, 8)
        assert shapes["blocks.2.mlp.fc1.weight"] == (8, 16)
        assert len(shapes) == 4 + 12 * cfg.depth + 4

    def test_paper_shape(self):
        cfg = paper_shape_config()
        assert (cfg.tokens, cfg.embed_dim, cfg.mlp_hidden) == (197, 192, 768)


class TestBuild:
    def test_schedule_wiring(self):
        cfg = ViTConfig(**{**TINY, "depth": 12})
        s = custom_schedule(12, 0.7)
        m = build_vit(cfg, s, Rng(0))
        assert m.schedule.probs[4] == s.probs[4]

    def test_length_mismatch(self):
        with pytest.raises(ConfigError):
            build_vit(ViTConfig(**{**TINY, "depth": 12}), custom_schedule(11, 0.7), Rng(0))

    def test_same_seed_same_bytes(self):
        assert tiny().state_bytes() == tiny().state_bytes()
        other = build_vit(ViTConfig(**TINY), no_drop_schedule(3), Rng(1))
        assert other.state_bytes() != tiny().state_bytes()

    def test_init_statistics(self):
        m = tiny()
        assert np.all(m.params["blocks.0.norm1.weight"].data == 1)
        assert np.all(m.params["head.bias"].data == 0)
        assert np.abs(m.params["blocks.0.attn.qkv.weight"].data).max() <= 0.04


class TestForward:
    def test_logit_shape_and_dtype(self):
        out = tiny().forward(batch())
        assert out.shape == (4, 10) and out.dtype == np.float32

    def test_bad_input_shape(self):
        with pytest.raises(ValueError):
            tiny().forward(batch(size=16))
        with pytest.raises(ValueError):
            tiny().forward(np.zeros((4, 3, 8)))

    def test_zero_schedule_training_matches_eval(self):
        m, x = tiny(), batch()
        a = m.forward(x, training=True, rng=Rng(5)).data
        b = m.forward(x, training=False).data
        assert a.tobytes() == b.tobytes()

    def test_stochastic_needs_rng(self):
        m = tiny(linear_schedule(3, 0.5))
        with pytest.raises(ValueError):
            m.forward(batch(), training=True)

    def test_all_dropped_is_skip_only(self):
        m, x = tiny(DropSchedule((1.0,) * 3, kind="linear")), batch()
        out = m.forward(x, training=True, rng=Rng(0)).data
        P = m.params
        t = m.embed(Tensor(x))
        t = T.layernorm(t, P["norm.weight"], P["norm.bias"], eps=m.config.ln_eps)
        ref = (t[:, 0] @ P["head.weight"] + P["head.bias"]).data
        assert out.tobytes() == ref.tobytes()

    def test_eval_is_deterministic_under_drop_schedule(self):
        m, x = tiny(custom_schedule(3, 0.5)), batch()
        assert m.forward(x).data.tobytes() == m.forward(x).data.tobytes()

    def test_same_rng_same_drops(self):
        m, x = tiny(custom_schedule(3, 0.5)), batch(16)
        a = m.forward(x, training=True, rng=Rng(3)).data
        b = m.forward(x, training=True, rng=Rng(3)).data
        assert a.tobytes() == b.tobytes()

    def test_inverted_scaling_differs_from_unscaled(self):
        s = DropSchedule((0.5, 0.5, 0.5), kind="linear")
        x = batch(8)
        a = tiny(s).forward(x, training=True, rng=Rng(2)).data
        b = tiny(s, droppath_mode="inverted_scaling").forward(x, training=True, rng=Rng(2)).data
        assert not np.array_equal(a, b)

    def test_module_level_forward(self):
        m, x = tiny(), batch()
        assert forward(m, x).data.tobytes() == m.forward(x).data.tobytes()

    def test_predict_batches(self):
        m, x = tiny(), batch(10)
        np.testing.assert_array_equal(m.predict(x, batch_size=3), m.forward(x).data.argmax(axis=1))


class TestDropStatistics:
    def test_per_block_frequency(self):
        s = custom_schedule(12, 0.7)
        m = tiny(s, depth=12)
        n = 10_000
        trace = DropTrace()
        m.forward(np.zeros((n, 3, 8, 8), np.float32), training=True, rng=Rng(17), trace=trace)
        freq = 1.0 - trace.as_array().mean(axis=1)
        for p, f in zip(s.probs, freq):
            assert abs(f - p) <= 3 * math.sqrt(p * (1 - p) / n)

    def test_count_active_blocks(self):
        x = np.zeros((2000, 3, 8, 8), np.float32)
        tr = DropTrace()
        tiny(depth=12).forward(x[:1], training=True, rng=Rng(0), trace=tr)
        assert count_active_blocks(tr) == 12
        tr = DropTrace()
        tiny(DropSchedule((1.0,) * 12, kind="linear"), depth=12).forward(x[:1], training=True, rng=Rng(0),
                                                                        trace=tr)
        assert count_active_blocks(tr) == 0
        tr = DropTrace()
        tiny(custom_schedule(12, 0.7), depth=12).forward(x, training=True, rng=Rng(4), trace=tr)
        counts = tr.active_counts()
        assert count_active_blocks(tr, 5) == counts[5]
        var = sum(0.7 ** (l / 12) * (1 - 0.7 ** (l / 12)) for l in range(1, 13))
        assert abs(counts.mean() - EXPECTED_ACTIVE_K07) <= 3 * math.sqrt(var / len(counts))


class TestGradients:
    def test_dropped_blocks_get_no_gradient(self):
        m = tiny(DropSchedule((0.0, 1.0, 0.0), kind="linear"))
        loss = cross_entropy(m.forward(batch(), training=True, rng=Rng(0)), [0, 1, 2, 3])
        backward(loss)
        assert all(m.params[n].grad is None for n in m.params if n.startswith("blocks.1."))
        assert m.params["blocks.0.attn.qkv.weight"].grad is not None

    def test_input_gradient_matches_finite_differences(self):
        m = tiny(dtype="float64")
        x = batch(2).astype(np.float64)
        y = [1, 7]

        def f(v):
            return float(cross_entropy(m.forward(v.reshape(x.shape)), y).data)

        xt = Tensor(x, requires_grad=True)
        backward(cross_entropy(m.forward(xt), y))
        idx = Rng(0).choice(x.size, 12, replace=False)
        num = central_difference(lambda v: f(_set(x, idx, v)), x.reshape(-1)[idx])
        np.testing.assert_allclose(xt.grad.reshape(-1)[idx], num, rtol=1e-4, atol=1e-9)

    def test_parameter_gradient_matches_finite_differences(self):
        m = tiny(dtype="float64")
        x, y = batch(3).astype(np.float64), [0, 4, 9]
        backward(cross_entropy(m.forward(x), y))
        W = m.params["blocks.1.mlp.fc1.weight"]
        analytic = W.grad.copy()
        base = W.data.copy()

        def f(v):
            W.data = v
            return float(cross_entropy(m.forward(x), y).data)

        num = central_difference(f, base)
        W.data = base
        rel = np.linalg.norm(analytic - num) / np.linalg.norm(num)
        assert rel <= 1e-4


def _set(x, idx, v):
    out = x.copy().reshape(-1)
    out[idx] = v
    return out


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = tiny(custom_schedule(3, 0.5))
        path = tmp_path / "m.ldvt"
        save_checkpoint(m, path)
        back = load_checkpoint(path)
        assert back.config == m.config and back.schedule == m.schedule
        assert back.state_bytes() == m.state_bytes()
        x = batch()
        assert back.forward(x).data.tobytes() == m.forward(x).data.tobytes()
        assert not (tmp_path / "m.ldvt.tmp").exists()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ldvt"
        save_checkpoint(tiny(), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_version_truncation_and_trailing_bytes(self, tmp_path):
        path = tmp_path / "m.ldvt"
        save_checkpoint(tiny(), path)
        raw = path.read_bytes()
        bad_version = CHECKPOINT_MAGIC + struct.pack("<I", 9) + raw[8:]
        for blob, msg in [(bad_version, "version"), (raw[:-8], "truncated"), (raw + b"\0", "trailing")]:
            path.write_bytes(blob)
            with pytest.raises(CheckpointError, match=msg):
                load_checkpoint(path)
