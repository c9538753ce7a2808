import numpy as np
import pytest

from chiplab.backbone import (BackboneConfig, BackboneWeights, forward_trace,
                              forward_truncated, init_backbone, layer_states,
                              load_weights, pretrain_backbone, save_weights)
from chiplab.data import TaskSpec
from chiplab.errors import ContractViolation, FormatError

TINY = BackboneConfig(n_layers=2, d_model=16, n_heads=4, d_ff=32,
                      vocab_size=24, max_seq_len=12, seed=11)

# digest of init_backbone(TINY); pinned from the first build
TINY_GOLDEN = "dd30f77921a29791b318086f25ec1343e5d4462ad36f60ca8464f18de7d5e334"


@pytest.fixture(scope="module")
def tiny_weights():
    return init_backbone(TINY)


def tokens(*ids):
    return np.asarray(ids, dtype=np.int64)


class TestConfig:
    def test_heads_must_divide_d_model(self):
        with pytest.raises(ContractViolation):
            BackboneConfig(n_layers=2, d_model=10, n_heads=4, d_ff=8,
                           vocab_size=8, max_seq_len=4, seed=0)

    def test_layer_and_vocab_bounds(self):
        with pytest.raises(ContractViolation):
            BackboneConfig(n_layers=0, d_model=8, n_heads=2, d_ff=8,
                           vocab_size=8, max_seq_len=4, seed=0)
        with pytest.raises(ContractViolation):
            BackboneConfig(n_layers=1, d_model=8, n_heads=2, d_ff=8,
                           vocab_size=1, max_seq_len=4, seed=0)


class TestInit:
    def test_same_seed_same_digest(self, tiny_weights):
        assert init_backbone(TINY).digest() == tiny_weights.digest()

    def test_seed_changes_digest(self, tiny_weights):
        other = init_backbone(BackboneConfig(**{**TINY.__dict__, "seed": 12}))
        assert other.digest() != tiny_weights.digest()

    def test_golden_digest(self, tiny_weights):
        assert tiny_weights.digest() == TINY_GOLDEN

    def test_truncated_init_within_two_sigma(self, tiny_weights):
        w = tiny_weights.tensors["layers.0.wq"]
        assert float(np.abs(w).max()) <= 2 * 0.02 + 1e-7

    def test_weights_are_frozen(self, tiny_weights):
        with pytest.raises(ValueError):
            tiny_weights.tensors["embedding"][0, 0] = 1.0


class TestForward:
    def test_trace_shape(self, tiny_weights):
        trace = forward_trace(tiny_weights, tokens(1, 2, 3))
        assert trace.shape == (TINY.n_layers, TINY.d_model)
        assert trace.dtype == np.float32

    def test_trace_deterministic(self, tiny_weights):
        t1 = forward_trace(tiny_weights, tokens(5, 6, 7, 8))
        t2 = forward_trace(tiny_weights, tokens(5, 6, 7, 8))
        assert np.array_equal(t1, t2)

    def test_truncated_matches_trace_bit_exactly(self, tiny_weights):
        rng = np.random.default_rng(0)
        for _ in range(10):
            ids = rng.integers(0, TINY.vocab_size, size=7)
            trace = forward_trace(tiny_weights, ids)
            for layer in range(TINY.n_layers):
                h = forward_truncated(tiny_weights, ids, layer)
                assert np.array_equal(h, trace[layer])

    def test_single_layer_against_straight_line_oracle(self, tiny_weights):
        # independent re-implementation of one pre-norm block in float64
        ids = tokens(3, 9, 14, 2)
        w = tiny_weights
        x = w.tensors["embedding"][ids].astype(np.float64)
        L = {n: w.tensors[f"layers.0.{n}"].astype(np.float64)
             for n in ("ln1_scale", "ln1_bias", "wq", "wk", "wv", "wo",
                       "ln2_scale", "ln2_bias", "w_in", "w_out")}

        def ln(v, g, b):
            mu = v.mean(-1, keepdims=True)
            var = v.var(-1, keepdims=True)
            return (v - mu) / np.sqrt(var + 1e-5) * g + b

        a = ln(x, L["ln1_scale"], L["ln1_bias"])
        s, d = a.shape
        heads, dh = TINY.n_heads, d // TINY.n_heads
        out = np.zeros_like(x)
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            q = a @ L["wq"].T[:, sl]
            k = a @ L["wk"].T[:, sl]
            v = a @ L["wv"].T[:, sl]
            for i in range(s):
                sc = (q[i] @ k[: i + 1].T) / np.sqrt(dh)
                sc = np.exp(sc - sc.max())
                p = sc / sc.sum()
                out[i, sl] = p @ v[: i + 1]
        x = x + out @ L["wo"].T
        hn = ln(x, L["ln2_scale"], L["ln2_bias"])
        u = hn @ L["w_in"].T
        g = 0.5 * u * (1 + np.tanh(0.7978845608028654 * (u + 0.044715 * u**3)))
        x = x + g @ L["w_out"].T
        got = forward_trace(w, ids)[0]
        assert np.allclose(got, x[-1], atol=1e-5)

    def test_causality_by_perturbation(self, tiny_weights):
        ids = tokens(1, 2, 3, 4, 5, 6)
        j = 3
        mutated = ids.copy()
        mutated[j] = 20
        base = layer_states(tiny_weights, ids)
        pert = layer_states(tiny_weights, mutated)
        for layer in range(TINY.n_layers):
            assert np.array_equal(base[layer][:j], pert[layer][:j])
            assert not np.array_equal(base[layer][j:], pert[layer][j:])

    def test_input_validation(self, tiny_weights):
        with pytest.raises(ContractViolation):
            forward_trace(tiny_weights, tokens())
        with pytest.raises(ContractViolation):
            forward_trace(tiny_weights, tokens(99))
        with pytest.raises(ContractViolation):
            forward_trace(tiny_weights, np.arange(TINY.max_seq_len + 1) % 4)
        with pytest.raises(ContractViolation):
            forward_truncated(tiny_weights, tokens(1), TINY.n_layers)


class TestPretrain:
    TASK = TaskSpec(kind="majority-token", vocab_size=24, seq_len=12,
                    n_classes=2, n_examples=10, seed=9)

    def test_zero_steps_preserves_digest(self, tiny_weights):
        out = pretrain_backbone(tiny_weights, self.TASK, steps=0, lr=1e-3)
        assert out.digest() == tiny_weights.digest()

    def test_original_untouched_and_result_frozen(self, tiny_weights):
        before = tiny_weights.digest()
        out = pretrain_backbone(tiny_weights, self.TASK, steps=5, lr=1e-3)
        assert tiny_weights.digest() == before
        assert out.digest() != before
        with pytest.raises(ValueError):
            out.tensors["embedding"][0, 0] = 1.0

    def test_deterministic(self, tiny_weights):
        a = pretrain_backbone(tiny_weights, self.TASK, steps=8, lr=1e-3)
        b = pretrain_backbone(tiny_weights, self.TASK, steps=8, lr=1e-3)
        assert a.digest() == b.digest()

    def test_loss_decreases(self, tiny_weights):
        losses = []
        pretrain_backbone(tiny_weights, self.TASK, steps=300, lr=1e-3,
                          loss_callback=lambda s, l: losses.append(l))
        assert np.mean(losses[-50:]) < np.mean(losses[:20])

    def test_vocab_mismatch_rejected(self, tiny_weights):
        bad = TaskSpec(kind="majority-token", vocab_size=32, seq_len=12,
                       n_classes=2, n_examples=4, seed=0)
        with pytest.raises(ContractViolation):
            pretrain_backbone(tiny_weights, bad, steps=1, lr=1e-3)


class TestSerialization:
    def test_round_trip_digest(self, tiny_weights, tmp_path):
        path = tmp_path / "w.ctbw"
        save_weights(tiny_weights, path)
        assert load_weights(path).digest() == tiny_weights.digest()

    def test_truncated_file(self, tiny_weights, tmp_path):
        path = tmp_path / "w.ctbw"
        save_weights(tiny_weights, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) // 2])
        with pytest.raises(FormatError) as err:
            load_weights(path)
        assert err.value.category == "truncation"

    def test_bad_magic_names_it(self, tiny_weights, tmp_path):
        path = tmp_path / "w.ctbw"
        save_weights(tiny_weights, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError) as err:
            load_weights(path)
        assert err.value.category == "magic"
        assert "XXXX" in str(err.value)

    def test_bad_version(self, tiny_weights, tmp_path):
        path = tmp_path / "w.ctbw"
        save_weights(tiny_weights, path)
        blob = bytearray(path.read_bytes())
        blob[4:6] = (999).to_bytes(2, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError) as err:
            load_weights(path)
        assert err.value.category == "version"

    def test_trailing_bytes(self, tiny_weights, tmp_path):
        path = tmp_path / "w.ctbw"
        save_weights(tiny_weights, path)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(FormatError) as err:
            load_weights(path)
        assert err.value.category == "length"
