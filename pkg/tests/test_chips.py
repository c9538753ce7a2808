import math

import numpy as np
import pytest

from chiplab.chips import (ChipBank, chip_forward, chip_init, chip_loss_and_grad,
                           chip_zero, init_bank, load_bank, multichip_loss,
                           save_bank, serialize_bank)
from chiplab.errors import ContractViolation, FormatError
from chiplab.kernels import matvec, relu, softmax

C, D, H = 4, 16, 8


def rand_x(seed=0):
    return np.random.default_rng(seed).standard_normal(D).astype(np.float32)


class TestInit:
    def test_deterministic_per_layer(self):
        a = chip_init("linear", C, D, 0, layer=3, master_seed=42)
        b = chip_init("linear", C, D, 0, layer=3, master_seed=42)
        assert np.array_equal(a.w, b.w) and np.array_equal(a.b, b.b)

    def test_layers_differ(self):
        a = chip_init("mlp", C, D, H, layer=0, master_seed=42)
        b = chip_init("mlp", C, D, H, layer=1, master_seed=42)
        assert not np.array_equal(a.w2, b.w2)

    def test_biases_zero(self):
        chip = chip_init("mlp", C, D, H, layer=0, master_seed=1)
        assert not chip.b2.any() and not chip.b1.any()

    def test_zero_chip_uniform(self):
        for kind in ("linear", "mlp"):
            chip = chip_zero(kind, C, D, H)
            out = chip_forward(chip, rand_x())
            assert np.allclose(out, 0.25, atol=1e-7)

    def test_bad_dims(self):
        with pytest.raises(ContractViolation):
            chip_init("linear", 1, D, 0, layer=0, master_seed=0)
        with pytest.raises(ContractViolation):
            chip_init("mlp", C, D, 0, layer=0, master_seed=0)
        with pytest.raises(ContractViolation):
            chip_init("cnn", C, D, H, layer=0, master_seed=0)


class TestForward:
    def test_is_distribution(self):
        for kind in ("linear", "mlp"):
            chip = chip_init(kind, C, D, H, layer=2, master_seed=7)
            out = chip_forward(chip, rand_x(3))
            assert out.shape == (C,)
            assert abs(float(out.sum()) - 1.0) < 1e-6
            assert np.all(out >= 0)

    def test_linear_equals_kernel_composition_bit_exactly(self):
        chip = chip_init("linear", C, D, 0, layer=1, master_seed=5)
        x = rand_x(11)
        expected = softmax(matvec(chip.w, x) + chip.b)
        assert np.array_equal(chip_forward(chip, x), expected)

    def test_mlp_equals_kernel_composition_bit_exactly(self):
        chip = chip_init("mlp", C, D, H, layer=1, master_seed=5)
        x = rand_x(12)
        r = relu(matvec(chip.w2, x) + chip.b2)
        expected = softmax(matvec(chip.w1, r) + chip.b1)
        assert np.array_equal(chip_forward(chip, x), expected)

    def test_dim_mismatch(self):
        chip = chip_init("linear", C, D, 0, layer=0, master_seed=0)
        with pytest.raises(ContractViolation):
            chip_forward(chip, np.zeros(D + 1, np.float32))

    def test_bias_shift_keeps_argmax(self):
        chip = chip_init("linear", C, D, 0, layer=4, master_seed=9)
        x = rand_x(4)
        before = int(np.argmax(chip_forward(chip, x)))
        chip.b += np.float32(3.7)
        assert int(np.argmax(chip_forward(chip, x))) == before


class TestLossAndGrad:
    def test_zero_chip_closed_form(self):
        chip = chip_zero("linear", C, D)
        loss, grads = chip_loss_and_grad(chip, rand_x(1), label=2)
        assert abs(loss - math.log(4)) < 1e-6
        expected_gb = np.full(C, 0.25, dtype=np.float32)
        expected_gb[2] -= 1.0
        assert np.allclose(grads["b"], expected_gb, atol=1e-7)

    def test_zero_input_kills_weight_gradient(self):
        chip = chip_init("linear", C, D, 0, layer=0, master_seed=3)
        chip.b[:] = 0
        loss, grads = chip_loss_and_grad(chip, np.zeros(D, np.float32), label=1)
        assert not grads["w"].any()
        probs = chip_forward(chip, np.zeros(D, np.float32))
        expected = probs.copy()
        expected[1] -= 1.0
        assert np.allclose(grads["b"], expected, atol=1e-7)

    def test_label_out_of_range(self):
        chip = chip_zero("linear", C, D)
        with pytest.raises(ContractViolation):
            chip_loss_and_grad(chip, rand_x(), label=C)


def fd_gradients(chip, x, label, step=1e-3):
    """Central finite differences on a float64 shadow copy of the chip."""
    x64 = x.astype(np.float64)

    def loss64(params):
        if chip.kind == "linear":
            z = params["w"] @ x64 + params["b"]
        else:
            u = params["w2"] @ x64 + params["b2"]
            z = params["w1"] @ np.maximum(u, 0.0) + params["b1"]
        z = z - z.max()
        e = np.exp(z)
        p = e / e.sum()
        return -np.log(p[label] + 1e-12)

    base = {name: p.astype(np.float64) for name, p in chip.params()}
    out = {}
    for name in base:
        g = np.zeros_like(base[name])
        it = np.nditer(base[name], flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            plus = {k: (v.copy() if k == name else v) for k, v in base.items()}
            plus[name][idx] += step
            minus = {k: (v.copy() if k == name else v) for k, v in base.items()}
            minus[name][idx] -= step
            g[idx] = (loss64(plus) - loss64(minus)) / (2 * step)
            it.iternext()
        out[name] = g
    return out


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_analytic_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(77)
    for trial in range(20):
        chip = chip_init(kind, 3, 6, 5, layer=trial, master_seed=123)
        x = rng.standard_normal(6).astype(np.float32)
        label = int(rng.integers(0, 3))
        _, grads = chip_loss_and_grad(chip, x, label)
        fd = fd_gradients(chip, x, label)
        for name in fd:
            num = np.abs(grads[name].astype(np.float64) - fd[name])
            den = np.maximum(np.maximum(np.abs(fd[name]),
                                        np.abs(grads[name].astype(np.float64))), 1e-6)
            assert float((num / den).max()) < 1e-4, (kind, trial, name)


class TestMultichip:
    def test_zero_bank_sum(self):
        bank = ChipBank(kind="linear", n_classes=4, d_model=D, hidden_dim=0,
                        chips=[chip_zero("linear", 4, D) for _ in range(8)],
                        opt_states=[{} for _ in range(8)], step_counts=[0] * 8)
        trace = np.zeros((8, D), np.float32)
        assert abs(multichip_loss(bank, trace, 1) - 8 * math.log(4)) < 1e-6

    def test_single_layer_equals_chip_loss(self):
        bank = init_bank("linear", 1, C, D, master_seed=5)
        trace = rand_x(8).reshape(1, D)
        loss, _ = chip_loss_and_grad(bank.chips[0], trace[0], 2)
        assert multichip_loss(bank, trace, 2) == pytest.approx(loss, abs=1e-12)

    def test_equals_sum_of_individual_losses(self):
        bank = init_bank("mlp", 5, C, D, hidden_dim=H, master_seed=6)
        trace = np.random.default_rng(2).standard_normal((5, D)).astype(np.float32)
        total = sum(chip_loss_and_grad(bank.chips[l], trace[l], 3)[0] for l in range(5))
        assert abs(multichip_loss(bank, trace, 3) - total) < 1e-9

    def test_length_mismatch(self):
        bank = init_bank("linear", 3, C, D, master_seed=0)
        with pytest.raises(ContractViolation):
            multichip_loss(bank, np.zeros((4, D), np.float32), 0)

    def test_gradient_independence_across_chips(self):
        # perturbing chip l's params changes only its own loss term
        bank = init_bank("linear", 3, C, D, master_seed=1)
        trace = np.random.default_rng(3).standard_normal((3, D)).astype(np.float32)
        base_terms = [chip_loss_and_grad(bank.chips[l], trace[l], 1)[0] for l in range(3)]
        bank.chips[1].w += np.float32(0.25)
        new_terms = [chip_loss_and_grad(bank.chips[l], trace[l], 1)[0] for l in range(3)]
        assert new_terms[0] == base_terms[0] and new_terms[2] == base_terms[2]
        assert new_terms[1] != base_terms[1]


class TestBankSerialization:
    @pytest.mark.parametrize("kind,hidden", [("linear", 0), ("mlp", H)])
    def test_round_trip(self, tmp_path, kind, hidden):
        bank = init_bank(kind, 4, C, D, hidden_dim=H, master_seed=3)
        path = tmp_path / "bank.ctch"
        save_bank(bank, path)
        loaded = load_bank(path)
        assert serialize_bank(loaded) == serialize_bank(bank)
        assert loaded.kind == kind and loaded.hidden_dim == hidden

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bank.ctch"
        bank = init_bank("linear", 2, C, D, master_seed=0)
        save_bank(bank, path)
        blob = bytearray(path.read_bytes())
        blob[0] = 0
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError) as err:
            load_bank(path)
        assert err.value.category == "magic"

    def test_truncation(self, tmp_path):
        path = tmp_path / "bank.ctch"
        bank = init_bank("mlp", 2, C, D, hidden_dim=H, master_seed=0)
        save_bank(bank, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(FormatError) as err:
            load_bank(path)
        assert err.value.category == "truncation"
