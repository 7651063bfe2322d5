import numpy as np
import pytest

from kanizsa import gradcheck
from kanizsa.gradcheck import (TOLERANCE, check_config, fixed_three_layer_check, kink_margin,
                               numeric_grad, random_config, rel_error)
from kanizsa.nn import Network


def test_numeric_grad_quadratic():
    a = np.array([1.0, -2.0, 3.0])
    g = numeric_grad(lambda: float((a ** 2).sum()), a)
    np.testing.assert_allclose(g, 2 * a, rtol=1e-8)
    np.testing.assert_array_equal(a, [1.0, -2.0, 3.0])  # restored after perturbation


def test_rel_error():
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0
    assert rel_error(np.ones(3), np.ones(3)) == 0.0
    assert rel_error(np.ones(2), -np.ones(2)) == pytest.approx(1.0)


def test_fixed_three_layer_net():
    res = fixed_three_layer_check()
    assert res.max_rel_error < TOLERANCE, res


def test_detects_a_wrong_gradient(monkeypatch):
    from kanizsa import nn
    original = nn.Dense.backward

    def broken(self, dout):
        dx = original(self, dout)
        self.grads["w"] = self.grads["w"] * 1.01
        return dx
    monkeypatch.setattr(nn.Dense, "backward", broken)
    assert not fixed_three_layer_check().ok


@pytest.mark.parametrize("seed", range(20))
def test_random_configs(seed):
    rng = np.random.default_rng(1000 + seed)
    res = check_config(random_config(rng), seed)
    assert res.ok, res


def test_random_config_builds():
    rng = np.random.default_rng(0)
    for _ in range(50):
        cfg = random_config(rng)
        net = Network(cfg["layers"], cfg["input_shape"])
        assert net.n_classes >= 2


def test_kink_margin_positive_on_generic_input():
    cfg = random_config(np.random.default_rng(3))
    net = Network(cfg["layers"], cfg["input_shape"], dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((2, *cfg["input_shape"]))
    assert kink_margin(net, x) > 0


def test_suite_is_seeded():
    a = [r.max_rel_error for r in gradcheck.run_suite(3, seed=5)]
    b = [r.max_rel_error for r in gradcheck.run_suite(3, seed=5)]
    assert a == b
