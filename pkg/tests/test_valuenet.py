import math

import numpy as np
import pytest

from dynrank.valuenet import (
    CheckpointError,
    NetConfig,
    ValueNetParams,
    apply_update,
    backward,
    deserialize,
    forward,
    forward_candidates,
    init_glorot,
    param_count,
    serialize,
)

TINY = NetConfig(
    layers=2, input_dim=2, hidden_dims=(3, 3), dense_dims=(3, 2),
    window=5, dropout=0.0, learning_rate=0.01, output="linear",
)


def tiny_params(seed=42) -> ValueNetParams:
    return init_glorot(TINY, seed)


def closed_form_count(cfg: NetConfig) -> int:
    hidden = cfg.resolved_hidden()
    total, in_dim = 0, cfg.input_dim
    for h in hidden:
        total += 4 * h * (in_dim + h + 1) + 2 * h
        in_dim = h
    d_in = hidden[-1]
    for w in cfg.resolved_dense():
        total += w * (d_in + 1)
        d_in = w
    return total + d_in + 1


class TestInit:
    def test_entries_within_glorot_bound(self):
        params = tiny_params()
        for ly in params.lstm:
            bound_w = math.sqrt(6.0 / (ly.in_dim + ly.H))
            bound_u = math.sqrt(6.0 / (2 * ly.H))
            assert np.abs(ly.W).max() <= bound_w
            assert np.abs(ly.U).max() <= bound_u
            bound_v = math.sqrt(6.0 / (ly.H + 1))
            for vec in (ly.b, ly.h0, ly.c0):
                assert np.abs(vec).max() <= bound_v
        for dl in params.dense:
            fan_out, fan_in = dl.W.shape
            assert np.abs(dl.W).max() <= math.sqrt(6.0 / (fan_in + fan_out))

    def test_same_seed_is_bitwise_identical(self):
        a = init_glorot(TINY, 1234)
        b = init_glorot(TINY, 1234)
        assert a.theta.tobytes() == b.theta.tobytes()

    def test_sample_mean_statistics(self):
        # a wide matrix gives >= 1000 entries: mean within 3 sigma of 0
        cfg = NetConfig(layers=1, input_dim=40, hidden_dims=(30,), dense_dims=(4,),
                        dropout=0.0)
        params = init_glorot(cfg, 0)
        w = params.lstm[0].W[:30, :]  # forget-gate block, 1200 entries
        bound = math.sqrt(6.0 / (40 + 30))
        tol = 3 * bound / math.sqrt(3 * w.size)
        assert abs(w.mean()) <= tol

    def test_param_count_closed_form(self):
        for layers in (1, 2, 3):
            cfg = NetConfig(layers=layers, input_dim=6, hidden_dims=(4,) * layers,
                            dense_dims=(4, 2), dropout=0.0)
            assert param_count(cfg) == closed_form_count(cfg)
        one = param_count(NetConfig(layers=1, input_dim=6, hidden_dims=(4,), dense_dims=(4, 2), dropout=0.0))
        three = param_count(NetConfig(layers=3, input_dim=6, hidden_dims=(4, 4, 4), dense_dims=(4, 2), dropout=0.0))
        # each extra layer adds 4H(H + H + 1) + 2H parameters
        assert three - one == 2 * (4 * 4 * (4 + 4 + 1) + 2 * 4)

    def test_default_dense_widths_scale_from_top_hidden(self):
        cfg = NetConfig(layers=3, input_dim=1024)
        assert cfg.resolved_dense() == (1024, 512, 256, 16, 8)


def reference_forward(params: ValueNetParams, xs):
    """Independent scalar reimplementation of the recurrences."""
    cfg = params.config

    def sigmoid(z):
        return 1.0 / (1.0 + math.exp(-z))

    xs = [np.asarray(x, float) for x in xs][-cfg.window:]
    h = [np.array(ly.h0, float) for ly in params.lstm]
    c = [np.array(ly.c0, float) for ly in params.lstm]
    for x in xs:
        below = x
        for j, ly in enumerate(params.lstm):
            H = ly.H
            newh = np.zeros(H)
            newc = np.zeros(H)
            for r in range(H):
                pre = {}
                for gi, gate in enumerate(("f", "i", "o", "g")):
                    row = gi * H + r
                    s = ly.b[row]
                    for col in range(ly.in_dim):
                        s += ly.W[row, col] * below[col]
                    for col in range(H):
                        s += ly.U[row, col] * h[j][col]
                    pre[gate] = s
                f = sigmoid(pre["f"])
                i = sigmoid(pre["i"])
                o = sigmoid(pre["o"])
                g = math.tanh(pre["g"])
                newc[r] = f * c[j][r] + i * g
                newh[r] = o * math.tanh(newc[r])
            h[j], c[j] = newh, newc
            below = newh
    z = h[-1]
    for dl in params.dense[:-1]:
        nxt = np.zeros(dl.W.shape[0])
        for r in range(dl.W.shape[0]):
            s = dl.b[r]
            for col in range(dl.W.shape[1]):
                s += dl.W[r, col] * z[col]
            nxt[r] = max(s, 0.0)
        z = nxt
    out = params.dense[-1]
    v = out.b[0]
    for col in range(out.W.shape[1]):
        v += out.W[0, col] * z[col]
    if cfg.output == "sigmoid":
        return sigmoid(v)
    return v


class TestForward:
    def test_zero_params_give_zero_value(self):
        params = ValueNetParams(TINY, np.zeros(param_count(TINY)))
        value, cache = forward(params, [np.ones(2), np.ones(2)])
        assert value == 0.0
        for layer_steps in cache.steps:
            for st in layer_steps:
                assert not st.c.any()

    def test_eval_mode_deterministic(self):
        params = tiny_params()
        xs = [np.array([0.3, -0.7]), np.array([1.1, 0.2])]
        a, _ = forward(params, xs, mode="eval")
        b, _ = forward(params, xs, mode="eval")
        assert a == b

    def test_matches_independent_reference(self):
        cfg = NetConfig(layers=3, input_dim=2, hidden_dims=(3, 4, 2), dense_dims=(3, 2),
                        window=5, dropout=0.0, output="linear")
        params = init_glorot(cfg, 42)
        rng = np.random.default_rng(7)
        xs = [rng.standard_normal(2), rng.standard_normal(2)]
        value, _ = forward(params, xs)
        assert value == pytest.approx(reference_forward(params, xs), abs=1e-10)

    def test_sigmoid_reference(self):
        cfg = NetConfig(layers=2, input_dim=3, hidden_dims=(3, 3), dense_dims=(2,),
                        dropout=0.0, output="sigmoid")
        params = init_glorot(cfg, 9)
        xs = [np.linspace(-1, 1, 3)]
        value, _ = forward(params, xs)
        assert value == pytest.approx(reference_forward(params, xs), abs=1e-10)

    def test_gates_bounded(self):
        params = tiny_params(5)
        rng = np.random.default_rng(1)
        xs = [rng.standard_normal(2) * 3 for _ in range(4)]
        _, cache = forward(params, xs)
        for layer_steps in cache.steps:
            for st in layer_steps:
                for gate in (st.f, st.i, st.o):
                    assert ((gate > 0) & (gate < 1)).all()
                h = st.o * st.tc
                assert ((h > -1) & (h < 1)).all()

    def test_window_truncation_exact(self):
        params = tiny_params()
        rng = np.random.default_rng(3)
        xs = [rng.standard_normal(2) for _ in range(9)]
        full, _ = forward(params, xs)
        tail, _ = forward(params, xs[-TINY.window:])
        assert full == tail

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            forward(tiny_params(), [])

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ValueError):
            forward(tiny_params(), [np.zeros(3)])

    def test_train_mode_dropout_uses_rng(self):
        cfg = NetConfig(layers=1, input_dim=2, hidden_dims=(4,), dense_dims=(8, 8),
                        dropout=0.5, output="linear")
        params = init_glorot(cfg, 0)
        xs = [np.array([0.5, -0.5])]
        v1, _ = forward(params, xs, mode="train", rng=1)
        v2, _ = forward(params, xs, mode="train", rng=1)
        v3, _ = forward(params, xs, mode="train", rng=2)
        assert v1 == v2
        assert v1 != v3


class TestBackward:
    def test_target_equal_value_gives_zero_gradient(self):
        params = tiny_params()
        value, cache = forward(params, [np.array([0.2, 0.4])], mode="train")
        grad = backward(params, cache, value)
        assert not grad.any()

    def test_finite_difference_oracle(self):
        rng = np.random.default_rng(0)
        for seed in range(2):
            params = init_glorot(TINY, seed)
            xs = [rng.standard_normal(2) for _ in range(3)]
            target = float(rng.standard_normal())
            _, cache = forward(params, xs, mode="train")
            grad = backward(params, cache, target)
            h = 1e-5
            fd = np.zeros_like(grad)
            for i in range(params.theta.size):
                tp = params.theta.copy()
                tp[i] += h
                tm = params.theta.copy()
                tm[i] -= h
                vp, _ = forward(ValueNetParams(TINY, tp), xs)
                vm, _ = forward(ValueNetParams(TINY, tm), xs)
                fd[i] = ((vp - target) ** 2 - (vm - target) ** 2) / (2 * h)
            rel = np.abs(grad - fd) / np.maximum(np.maximum(np.abs(grad), np.abs(fd)), 1e-3)
            assert rel.max() <= 1e-4

    def test_chain_factor_linearity(self):
        params = tiny_params()
        value, cache = forward(params, [np.array([0.2, 0.4]), np.array([-0.1, 0.9])], mode="train")
        g1 = backward(params, cache, value - 0.5)
        g2 = backward(params, cache, value - 1.0)
        np.testing.assert_allclose(g2, 2.0 * g1, rtol=1e-12)

    def test_stale_cache_rejected(self):
        params = tiny_params()
        _, cache = forward(params, [np.zeros(2)], mode="train")
        other = tiny_params(7)
        with pytest.raises(ValueError):
            backward(other, cache, 0.0)

    def test_eval_cache_rejected(self):
        params = tiny_params()
        _, cache = forward(params, [np.zeros(2)], mode="eval")
        with pytest.raises(ValueError):
            backward(params, cache, 0.0)


class TestApplyUpdate:
    def test_zero_learning_rate_keeps_params(self):
        params = tiny_params()
        grad = np.ones_like(params.theta)
        updated = apply_update(params, grad, 0.0)
        np.testing.assert_array_equal(updated.theta, params.theta)

    def test_zero_gradient_keeps_params(self):
        params = tiny_params()
        updated = apply_update(params, np.zeros_like(params.theta), 0.1)
        np.testing.assert_array_equal(updated.theta, params.theta)

    def test_one_step_decreases_loss(self):
        params = tiny_params()
        xs = [np.array([0.4, -0.2]), np.array([0.1, 0.8])]
        target = 2.0
        value, cache = forward(params, xs, mode="train")
        grad = backward(params, cache, target)
        updated = apply_update(params, grad, 1e-3)
        new_value, _ = forward(updated, xs)
        assert (new_value - target) ** 2 < (value - target) ** 2

    def test_initial_states_frozen(self):
        params = tiny_params()
        grad = np.ones_like(params.theta)
        updated = apply_update(params, grad, 0.5)
        for old, new in zip(params.lstm, updated.lstm):
            np.testing.assert_array_equal(old.h0, new.h0)
            np.testing.assert_array_equal(old.c0, new.c0)
            assert (new.W != old.W).all()

    def test_shape_mismatch_rejected(self):
        params = tiny_params()
        with pytest.raises(ValueError):
            apply_update(params, np.zeros(3), 0.1)


class TestBatchedScoring:
    def test_matches_single_forwards(self):
        params = tiny_params()
        rng = np.random.default_rng(2)
        prefix = [rng.standard_normal(2) for _ in range(3)]
        rows = rng.standard_normal((6, 2))
        batch = forward_candidates(params, prefix, rows)
        singles = np.array([forward(params, prefix + [r], mode="eval")[0] for r in rows])
        np.testing.assert_allclose(batch, singles, atol=1e-12)

    def test_empty_prefix(self):
        params = tiny_params()
        rows = np.array([[0.1, 0.2], [0.5, -0.5]])
        batch = forward_candidates(params, [], rows)
        singles = np.array([forward(params, [r], mode="eval")[0] for r in rows])
        np.testing.assert_allclose(batch, singles, atol=1e-12)

    def test_long_prefix_respects_window(self):
        cfg = NetConfig(layers=1, input_dim=2, hidden_dims=(3,), dense_dims=(2,),
                        window=2, dropout=0.0)
        params = init_glorot(cfg, 3)
        rng = np.random.default_rng(4)
        prefix = [rng.standard_normal(2) for _ in range(5)]
        rows = rng.standard_normal((2, 2))
        batch = forward_candidates(params, prefix, rows)
        singles = np.array([forward(params, prefix + [r], mode="eval")[0] for r in rows])
        np.testing.assert_allclose(batch, singles, atol=1e-12)


class TestSerialization:
    def test_round_trip_bitwise(self):
        params = tiny_params(7)
        clone = deserialize(serialize(params))
        assert clone.config == params.config
        assert clone.theta.tobytes() == params.theta.tobytes()

    def test_round_trip_preserves_forward_values(self):
        params = init_glorot(TINY, 7)
        xs = [np.array([0.3, 0.1]), np.array([-0.4, 0.9])]
        before, _ = forward(params, xs)
        after, _ = forward(deserialize(serialize(params)), xs)
        assert before == after

    def test_corrupt_magic_rejected(self):
        blob = bytearray(serialize(tiny_params()))
        blob[0] ^= 0xFF
        with pytest.raises(CheckpointError):
            deserialize(bytes(blob))

    def test_corrupt_header_rejected(self):
        blob = bytearray(serialize(tiny_params()))
        blob[10] = 0x00
        with pytest.raises(CheckpointError):
            deserialize(bytes(blob))

    def test_truncation_rejected(self):
        blob = serialize(tiny_params())
        with pytest.raises(CheckpointError):
            deserialize(blob[:-8])

    def test_version_mismatch_rejected(self):
        import json
        import struct

        blob = serialize(tiny_params())
        hlen = struct.unpack("<I", blob[4:8])[0]
        header = json.loads(blob[8:8 + hlen])
        header["version"] = 99
        hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        forged = blob[:4] + struct.pack("<I", len(hjson)) + hjson + blob[8 + hlen:]
        with pytest.raises(CheckpointError):
            deserialize(forged)
