import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dcrgan import autodiff as ad
from dcrgan import nn
from dcrgan.autodiff import Tensor


def test_xavier_bounds_and_zero_bias():
    mlp = nn.init_mlp(nn.mlp_config(30, (20,), 10), seed=0)
    for w, b in zip(mlp.weights, mlp.biases):
        out_dim, in_dim = w.shape
        assert np.abs(w.data).max() <= math.sqrt(6.0 / (in_dim + out_dim))
        np.testing.assert_array_equal(b.data, 0.0)


def test_init_is_seeded():
    a = nn.init_mlp(nn.mlp_config(5, (7,), 3), 11)
    b = nn.init_mlp(nn.mlp_config(5, (7,), 3), 11)
    assert a.checksum() == b.checksum()
    assert a.checksum() != nn.init_mlp(nn.mlp_config(5, (7,), 3), 12).checksum()


def test_forward_matches_numpy_oracle():
    mlp = nn.init_mlp(nn.mlp_config(4, (6,), 2, slope=0.2), 3)
    x = np.random.default_rng(0).normal(size=(5, 4))
    h = x @ mlp.weights[0].data.T + mlp.biases[0].data
    h = np.where(h > 0, h, 0.2 * h)
    expected = h @ mlp.weights[1].data.T + mlp.biases[1].data
    np.testing.assert_allclose(mlp(Tensor(x)).data, expected, atol=1e-14)


def test_forward_width_mismatch():
    mlp = nn.init_mlp(nn.mlp_config(4, (), 2), 0)
    with pytest.raises(ad.ShapeError):
        mlp(Tensor(np.zeros((3, 5))))


def test_mlp_gradcheck():
    mlp = nn.init_mlp(nn.mlp_config(3, (5, 4), 2), 1)
    x = Tensor(np.random.default_rng(2).normal(size=(6, 3)))
    assert ad.gradcheck(lambda: ad.square(mlp(x)).sum(), mlp.parameters()) < 1e-6


def test_weight_decay_is_squared_l2():
    mlp = nn.init_mlp(nn.mlp_config(3, (4,), 2), 0)
    expected = 1e-4 * sum(float(np.sum(p.data ** 2)) for p in mlp.parameters())
    assert nn.weight_decay_term(mlp, 1e-4).item() == pytest.approx(expected, rel=1e-12)


class TestCrossEntropy:
    def test_uniform_logits_give_log_c(self):
        ce = nn.softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).item()
        assert ce == pytest.approx(math.log(4), abs=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="label 4"):
            nn.softmax_cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_direct_formula(self, seed):
        rng = np.random.default_rng(seed)
        logits = rng.normal(scale=3.0, size=(5, 3))
        labels = rng.integers(0, 3, size=5)
        p = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
        oracle = -np.mean(np.log(p[np.arange(5), labels]))
        assert nn.softmax_cross_entropy(Tensor(logits), labels).item() == pytest.approx(oracle, rel=1e-12)

    def test_gradient_is_softmax_minus_onehot(self):
        logits = Tensor(np.random.default_rng(0).normal(size=(4, 3)), requires_grad=True)
        labels = np.array([0, 2, 1, 1])
        nn.softmax_cross_entropy(logits, labels).backward()
        expected = nn.softmax(logits.data)
        expected[np.arange(4), labels] -= 1.0
        np.testing.assert_allclose(logits.grad, expected / 4, atol=1e-15)


class TestAdam:
    def test_first_step_is_lr_times_sign(self):
        # with bias correction the first update is lr * g / (|g| + eps)
        p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        opt = nn.Adam([p], lr=0.1)
        p.grad = np.array([0.5, -4.0, 1e-3])
        opt.step()
        g = np.array([0.5, -4.0, 1e-3])
        np.testing.assert_allclose(p.data, [1.0, -2.0, 3.0] - 0.1 * g / (np.abs(g) + 1e-8), rtol=1e-15)

    def test_two_steps_match_reference_recurrence(self):
        p = Tensor(np.array([0.3]), requires_grad=True)
        opt = nn.Adam([p], lr=1e-2, beta1=0.5, beta2=0.999)
        m = v = 0.0
        x = 0.3
        for t, g in enumerate([0.2, -0.7], 1):
            p.grad = np.array([g])
            opt.step()
            m = 0.5 * m + 0.5 * g
            v = 0.999 * v + 0.001 * g * g
            x -= 1e-2 * (m / (1 - 0.5 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert p.data[0] == pytest.approx(x, rel=1e-14)

    def test_defaults(self):
        opt = nn.Adam([])
        assert (opt.lr, opt.beta1, opt.beta2, opt.eps) == (1e-4, 0.5, 0.999, 1e-8)

    def test_missing_grad_rejected(self):
        opt = nn.Adam([Tensor(np.zeros(2), requires_grad=True)])
        with pytest.raises(ValueError, match="no gradient"):
            opt.step()

    def test_minimises_quadratic(self):
        p = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        opt = nn.Adam([p], lr=0.1, beta1=0.9)
        for _ in range(500):
            opt.zero_grad()
            ad.square(p).sum().backward()
            opt.step()
        assert np.abs(p.data).max() < 1e-2


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        mlp = nn.init_mlp(nn.mlp_config(7, (5, 3), 2), 4)
        nn.save_mlp(mlp, tmp_path / "m.ckpt")
        back = nn.load_mlp(tmp_path / "m.ckpt")
        assert back.checksum() == mlp.checksum()
        assert back.config.layer_sizes == [7, 5, 3, 2] or tuple(back.config.layer_sizes) == (7, 5, 3, 2)

    def test_layout(self, tmp_path):
        mlp = nn.init_mlp(nn.mlp_config(2, (), 1), 0)
        nn.save_mlp(mlp, tmp_path / "m.ckpt")
        raw = (tmp_path / "m.ckpt").read_bytes()
        assert raw[:6] == b"DCRNN1"
        assert int.from_bytes(raw[6:14], "little") == 1
        assert len(raw) == 6 + 8 + 16 + 8 * 2 + 8 * 1

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOTACKPT" + bytes(20))
        with pytest.raises(ValueError, match="not a DCRNN1"):
            nn.load_mlp(tmp_path / "x")

    def test_truncated_and_trailing(self, tmp_path):
        mlp = nn.init_mlp(nn.mlp_config(3, (), 2), 0)
        nn.save_mlp(mlp, tmp_path / "m")
        raw = (tmp_path / "m").read_bytes()
        (tmp_path / "short").write_bytes(raw[:-5])
        (tmp_path / "long").write_bytes(raw + b"\0")
        with pytest.raises(ValueError):
            nn.load_mlp(tmp_path / "short")
        with pytest.raises(ValueError, match="trailing"):
            nn.load_mlp(tmp_path / "long")


def test_check_finite():
    assert nn.check_finite(1.5, "x") == 1.5
    with pytest.raises(nn.NumericError, match="non-finite loss"):
        nn.check_finite(float("nan"), "loss")
