import numpy as np
import pytest

from probekit.exceptions import DimensionError
from probekit.graph import OptimizerState
from probekit.models.config import OptimizerConfig
from probekit.tensor import Tensor


def _params():
    return {"fc": {"W": Tensor([[1.0, -2.0], [0.5, 0.0]]), "b": Tensor([0.25, -0.25])}}


def _grads():
    return {"fc": {"W": np.array([[0.5, -1.0], [2.0, 0.0]]), "b": np.array([1.0, -4.0])}}


def test_sgd_first_step():
    opt = OptimizerState(OptimizerConfig(kind="sgd", learning_rate=0.1), _params())
    new = opt.apply(_params(), _grads())
    assert np.allclose(new["fc"]["W"].data, [[0.95, -1.9], [0.3, 0.0]])
    assert np.allclose(new["fc"]["b"].data, [0.15, 0.15])


def test_rmsprop_first_step():
    cfg = OptimizerConfig(kind="rmsprop", learning_rate=0.01, decay=0.9, epsilon=1e-8)
    opt = OptimizerState(cfg, _params())
    new = opt.apply(_params(), _grads())
    g = _grads()["fc"]["W"]
    v = 0.1 * g * g
    expected = np.array([[1.0, -2.0], [0.5, 0.0]]) - 0.01 * g / (np.sqrt(v) + 1e-8)
    assert np.allclose(new["fc"]["W"].data, expected, atol=1e-6)
    assert np.allclose(opt.accumulators["fc"]["W"], v)
    # zero gradient leaves the weight where it was
    assert new["fc"]["W"].data[1, 1] == 0.0


def test_rmsprop_accumulator_decays():
    cfg = OptimizerConfig(kind="rmsprop", learning_rate=0.01, decay=0.5)
    params = _params()
    opt = OptimizerState(cfg, params)
    params = opt.apply(params, _grads())
    opt.apply(params, _grads())
    g = _grads()["fc"]["b"]
    assert np.allclose(opt.accumulators["fc"]["b"], 0.5 * (0.5 * g * g) + 0.5 * g * g)
    assert opt.steps == 2


def test_apply_leaves_inputs_untouched():
    params = _params()
    before = params["fc"]["W"].data.copy()
    OptimizerState(OptimizerConfig(kind="sgd", learning_rate=1.0), params).apply(params, _grads())
    assert np.array_equal(params["fc"]["W"].data, before)


def test_gradient_shape_mismatch():
    opt = OptimizerState(OptimizerConfig(kind="sgd"), _params())
    grads = _grads()
    grads["fc"]["b"] = np.zeros(3)
    with pytest.raises(DimensionError):
        opt.apply(_params(), grads)


def test_accumulator_shape_mismatch():
    opt = OptimizerState(OptimizerConfig(kind="rmsprop"), _params())
    opt.accumulators["fc"]["W"] = np.zeros((3, 3))
    with pytest.raises(DimensionError):
        opt.apply(_params(), _grads())
