import numpy as np
import pytest

from flexchill.models import ModelSpec, build_model
from flexchill.nn import Tape, ce_loss_t, finite_difference_gradient, max_relative_error

from gradcases import FD_TOL, check_case, layer_cases, model_cases

LAYERS = layer_cases(seed=0)
MODELS = model_cases(seed=0)


@pytest.mark.parametrize("name", sorted(LAYERS))
def test_layer_op(name):
    loss_fn, tensors = LAYERS[name]
    assert check_case(loss_fn, tensors) < FD_TOL


@pytest.mark.parametrize("name", sorted(MODELS))
def test_model_kind(name):
    loss_fn, tensors = MODELS[name]
    assert check_case(loss_fn, tensors) < FD_TOL


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_layer_ops_other_seeds(seed):
    for name, (loss_fn, tensors) in layer_cases(seed).items():
        assert check_case(loss_fn, tensors, seed) < FD_TOL, name


def test_two_layer_mlp_default_step():
    # full check of every entry at the 1e-5 step
    rng = np.random.default_rng(0)
    model = build_model(ModelSpec("mlp", (6,), 4, (5,)), seed=3)
    x = rng.normal(size=(8, 6))
    y = rng.integers(0, 4, size=8)

    def loss():
        return ce_loss_t(model.forward(x), y, 0.5)

    with Tape() as tape:
        out = loss()
    tape.backward(out)
    num = finite_difference_gradient(lambda: loss().item(), model.params, step=1e-5)
    for e in model.params.trainable():
        assert max_relative_error(e.tensor.grad, num[e.name]) < 1e-4, e.name


class TestRelativeError:
    def test_identical(self):
        assert max_relative_error(np.array([1.0, -2.0]), np.array([1.0, -2.0])) == 0.0

    def test_relative(self):
        assert max_relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)

    def test_scale_floor(self):
        # an entry 1e-9 next to a 1.0 entry is compared on the 1e-3 scale
        a = np.array([1.0, 1e-9])
        n = np.array([1.0, 2e-9])
        assert max_relative_error(a, n) == pytest.approx(1e-9 / 1e-3)
        assert max_relative_error(a, n, floor=1e-12, scale_floor=0.0) == pytest.approx(0.5)

    def test_empty(self):
        assert max_relative_error(np.array([]), np.array([])) == 0.0
