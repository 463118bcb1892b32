import struct

import numpy as np
import pytest

from sbmce.errors import DimensionError, FormatError, ParameterError
from sbmce.numerics import make_rng
from sbmce.schedule import build_schedule
from sbmce.scorenet import (
    OptimizerState,
    ScoreNetConfig,
    embed_step,
    forward,
    init_model,
    load_model,
    loss_and_grad,
    noise_loss,
    noise_loss_and_grad,
    optimizer_step,
    save_model,
)

SMALL = dict(n_rx=4, n_tx=3, K=10, hidden=5, n_layers=3, embed_dim=6, embed_channels=2)


def perturbed_model(cfg, seed=0):
    rng = make_rng(seed)
    model = init_model(cfg, rng)
    for p in model.params.values():
        p += 0.1 * rng.standard_normal(p.shape)
    return model


def random_batch(cfg, B, seed=1):
    rng = make_rng(seed)
    x = rng.standard_normal((B, 2, cfg.n_rx, cfg.n_tx))
    k = rng.integers(1, cfg.K + 1, size=B)
    sigma = rng.uniform(0.05, 3.0, size=B)
    eps = rng.standard_normal(x.shape)
    return x, k, sigma, eps


def check_gradients(cfg, h=1e-5):
    """Central differences along a random direction for every parameter tensor."""
    model = perturbed_model(cfg)
    batch = random_batch(cfg, 3)
    _, grads = noise_loss_and_grad(model, *batch)
    rng = make_rng(9)
    for name, p in model.params.items():
        d = rng.standard_normal(p.shape)
        p += h * d
        lp = noise_loss(model, *batch)
        p -= 2 * h * d
        lm = noise_loss(model, *batch)
        p += h * d
        fd = (lp - lm) / (2 * h)
        an = float(np.sum(grads[name] * d))
        assert abs(fd - an) <= 1e-4 * abs(an), name


class TestEmbedding:
    def test_deterministic(self):
        np.testing.assert_array_equal(embed_step(5, 100, 16), embed_step(5, 100, 16))

    def test_bounded(self):
        e = embed_step(np.arange(1, 101), 100, 32)
        assert e.shape == (100, 32)
        assert np.all(np.abs(e) <= 1.0)

    def test_hand_table_dim4_k1(self):
        # w_0 = 1, w_1 = 10000 ** (-1/2) = 0.01
        expected = [np.sin(1.0), np.cos(1.0), np.sin(0.01), np.cos(0.01)]
        np.testing.assert_allclose(embed_step(1, 10, 4), expected, rtol=1e-15)

    def test_odd_dim(self):
        with pytest.raises(ParameterError):
            embed_step(1, 10, 5)

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            embed_step(0, 10, 4)


class TestForward:
    def test_output_shape(self):
        cfg = ScoreNetConfig(**SMALL)
        model = init_model(cfg, make_rng(0))
        h = make_rng(1).standard_normal((7, 12)) + 0j
        assert forward(model, h, 3, 0.5).shape == (7, 12)
        assert forward(model, h[0], 3, 0.5).shape == (12,)

    def test_zero_final_layer_gives_zero_score(self):
        cfg = ScoreNetConfig(**SMALL)
        model = init_model(cfg, make_rng(0))
        last = cfg.n_layers - 1
        model.params[f"conv{last}.W"][:] = 0.0
        model.params[f"conv{last}.b"][:] = 0.0
        h = make_rng(2).standard_normal(12) * (1 + 1j)
        np.testing.assert_array_equal(forward(model, h, 4, 1.3), np.zeros(12))

    def test_sigma_scaling_for_fixed_noise_prediction(self):
        cfg = ScoreNetConfig(**SMALL, input_scaling=False)
        model = perturbed_model(cfg)
        h = make_rng(3).standard_normal(12) + 1j * make_rng(4).standard_normal(12)
        s1 = forward(model, h, 4, 0.7)
        s2 = forward(model, h, 4, 0.7 * 3.0)
        np.testing.assert_allclose(s2, s1 / 3.0, rtol=1e-13)

    def test_shape_mismatch(self):
        model = init_model(ScoreNetConfig(**SMALL), make_rng(0))
        with pytest.raises(DimensionError):
            forward(model, np.zeros(11, dtype=complex), 1, 1.0)

    def test_deterministic(self):
        model = perturbed_model(ScoreNetConfig(**SMALL))
        h = make_rng(5).standard_normal((3, 12)) + 0j
        assert forward(model, h, 2, 1.0).tobytes() == forward(model, h, 2, 1.0).tobytes()

    def test_parameters_shared_across_steps(self):
        cfg = ScoreNetConfig(**SMALL)
        model = init_model(cfg, make_rng(0))
        n_before = model.n_params()
        h = make_rng(5).standard_normal((3, 12)) + 0j
        for k in range(1, cfg.K + 1):
            forward(model, h, k, 1.0)
        assert model.n_params() == n_before
        assert not any(str(cfg.K) in name for name in model.params)

    def test_layer_channel_contract(self):
        cfg = ScoreNetConfig(**SMALL)
        model = init_model(cfg, make_rng(0))
        assert model.params["conv0.W"].shape[1] == 2 + cfg.embed_channels
        assert model.params[f"conv{cfg.n_layers - 1}.W"].shape[0] == 2


class TestLossAndGrad:
    def test_perfect_prediction(self):
        cfg = ScoreNetConfig(**SMALL)
        model = perturbed_model(cfg)
        h = make_rng(6).standard_normal((4, 12)) + 1j * make_rng(7).standard_normal((4, 12))
        sig = np.array([0.1, 0.5, 1.0, 2.0])
        target = forward(model, h, 3, sig)
        loss, grads = loss_and_grad(model, h, 3, sig, target)
        assert loss == pytest.approx(0.0, abs=1e-28)
        assert all(np.all(np.abs(g) < 1e-14) for g in grads.values())

    def test_duplicated_batch_same_loss(self):
        cfg = ScoreNetConfig(**SMALL)
        model = perturbed_model(cfg)
        rng = make_rng(8)
        h = rng.standard_normal((1, 12)) + 1j * rng.standard_normal((1, 12))
        s = rng.standard_normal((1, 12)) + 0j
        l1, g1 = loss_and_grad(model, h, 5, 0.8, s)
        l4, g4 = loss_and_grad(model, np.repeat(h, 4, 0), 5, 0.8, np.repeat(s, 4, 0))
        assert l4 == pytest.approx(l1, rel=1e-13)
        for name in g1:
            np.testing.assert_allclose(g4[name], g1[name], rtol=1e-10, atol=1e-15)

    def test_empty_batch(self):
        model = init_model(ScoreNetConfig(**SMALL), make_rng(0))
        with pytest.raises(ParameterError):
            loss_and_grad(model, np.zeros((0, 12)), 1, 1.0, np.zeros((0, 12)))

    @pytest.mark.parametrize("embed_mode", ["broadcast", "positional"])
    @pytest.mark.parametrize("padding", ["circular", "zero"])
    @pytest.mark.parametrize("activation", ["silu", "relu", "tanh"])
    def test_finite_differences(self, padding, activation, embed_mode):
        cfg = ScoreNetConfig(**SMALL, padding=padding, activation=activation, embed_mode=embed_mode)
        check_gradients(cfg)

    @pytest.mark.parametrize("n_layers", [2, 4])
    def test_finite_differences_residual(self, n_layers):
        cfg = ScoreNetConfig(**{**SMALL, "n_layers": n_layers}, residual=True, kernel=(3, 1))
        check_gradients(cfg)


class TestAdamW:
    def test_zero_grad_no_decay_is_noop(self):
        model = perturbed_model(ScoreNetConfig(**SMALL))
        before = {k: v.copy() for k, v in model.params.items()}
        opt = OptimizerState.for_model(model, lr=1e-2, weight_decay=0.0)
        zeros = {k: np.zeros_like(v) for k, v in model.params.items()}
        for _ in range(3):
            optimizer_step(model, zeros, opt)
        for k in before:
            np.testing.assert_array_equal(model.params[k], before[k])

    def test_decay_only_shrinks(self):
        model = perturbed_model(ScoreNetConfig(**SMALL))
        before = {k: v.copy() for k, v in model.params.items()}
        opt = OptimizerState.for_model(model, lr=0.1, weight_decay=0.5)
        optimizer_step(model, {k: np.zeros_like(v) for k, v in model.params.items()}, opt)
        for k in before:
            np.testing.assert_allclose(model.params[k], before[k] * (1 - 0.1 * 0.5), rtol=1e-15)

    def test_single_step_on_quadratic(self):
        class Scalar:
            params = {"w": np.array([1.0])}

        lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
        opt = OptimizerState(lr=lr, weight_decay=wd, beta1=b1, beta2=b2, eps=eps)
        grad = 2.0  # d/dw w^2 at w = 1
        optimizer_step(Scalar, {"w": np.array([grad])}, opt)
        # closed form for t = 1: m_hat = g, v_hat = g^2
        m_hat = ((1 - b1) * grad) / (1 - b1)
        v_hat = ((1 - b2) * grad**2) / (1 - b2)
        expected = 1.0 * (1 - lr * wd) - lr * m_hat / (np.sqrt(v_hat) + eps)
        assert Scalar.params["w"][0] == pytest.approx(expected, rel=1e-14)
        assert opt.step == 1

    def test_deterministic(self):
        cfg = ScoreNetConfig(**SMALL)
        batch = random_batch(cfg, 4)
        runs = []
        for _ in range(2):
            model = perturbed_model(cfg)
            opt = OptimizerState.for_model(model)
            for _ in range(3):
                _, g = noise_loss_and_grad(model, *batch)
                optimizer_step(model, g, opt)
            runs.append(np.concatenate([v.ravel() for v in model.params.values()]))
        assert runs[0].tobytes() == runs[1].tobytes()

    def test_reduces_loss(self):
        cfg = ScoreNetConfig(**SMALL)
        model = perturbed_model(cfg)
        batch = random_batch(cfg, 8)
        opt = OptimizerState.for_model(model, lr=1e-2)
        first = noise_loss(model, *batch)
        for _ in range(50):
            _, g = noise_loss_and_grad(model, *batch)
            optimizer_step(model, g, opt)
        assert noise_loss(model, *batch) < first


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        cfg = ScoreNetConfig(**SMALL)
        model = perturbed_model(cfg)
        sched = build_schedule(30.0, -10.0, 10, 0.6)
        save_model(model, sched, tmp_path / "m.bin")
        m2, s2 = load_model(tmp_path / "m.bin")
        assert m2.cfg == cfg
        for k in model.params:
            assert m2.params[k].tobytes() == model.params[k].tobytes()
        assert s2.sigmas.tobytes() == sched.sigmas.tobytes()
        assert (s2.gamma, s2.sigma_min, s2.sigma_max) == (0.6, sched.sigma_min, sched.sigma_max)
        assert (s2.snr_max_db, s2.snr_min_db) == (30.0, -10.0)
        h = make_rng(3).standard_normal((5, 12)) * (1 - 2j)
        assert forward(m2, h, 7, 0.3).tobytes() == forward(model, h, 7, 0.3).tobytes()

    def test_version_mismatch(self, tmp_path):
        model = perturbed_model(ScoreNetConfig(**SMALL))
        path = tmp_path / "m.bin"
        save_model(model, build_schedule(30.0, -10.0, 10, 1.0), path)
        raw = bytearray(path.read_bytes())
        raw[6:8] = struct.pack("<H", 9)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load_model(path)

    def test_truncated(self, tmp_path):
        model = perturbed_model(ScoreNetConfig(**SMALL))
        path = tmp_path / "m.bin"
        save_model(model, build_schedule(30.0, -10.0, 10, 1.0), path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            load_model(path)
