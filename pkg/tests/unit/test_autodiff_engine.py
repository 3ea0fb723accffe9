"""
Unit tests for the tape autodiff engine and SGD optimizer.
Gradients are checked against central finite differences in float64.
"""
import math
import numpy as np
import pytest
from engines.autodiff_engine import (
    Tensor,
    SGD,
    OptimizerState,
    add,
    backward,
    clamp,
    conv2d,
    finite_difference_grad,
    forward_primitive,
    get_tape,
    log,
    matmul,
    mean_squared_error,
    mul,
    no_grad,
    precision,
    reduce_mean,
    relu,
    reshape,
    scale,
    sgd_step,
    shift,
    softmax_cross_entropy,
    sub,
    take_rows,
    tanh,
    transpose,
)
from engines.errors import NonFiniteError, ShapeError, TapeError


def assert_gradients_match(fn, params, tolerance=1e-4):
    """Analytic gradients of fn() against central differences at step 1e-3."""
    analytic = backward(fn(), params)
    for param, grad in zip(params, analytic):
        numeric = finite_difference_grad(fn, param, step=1e-3)
        scale_ = max(np.abs(numeric).max(), np.abs(grad).max(), 1e-8)
        assert np.abs(grad - numeric).max() / scale_ < tolerance, param.name


def project(out: Tensor, seed: int = 0) -> Tensor:
    """Scalar projection with a fixed random direction."""
    rng = np.random.default_rng(seed)
    return reduce_mean(mul(out, Tensor(rng.normal(size=out.shape))))


class TestForwardPrimitives:
    """Forward values of individual primitives"""

    def test_relu_definition(self):
        """relu([-1, 0, 2]) == [0, 0, 2]"""
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        assert out.numpy().tolist() == [0.0, 0.0, 2.0]

    def test_matmul_identity_padded(self):
        """2x3 times a 3x2 identity-padded matrix keeps the first two columns"""
        a = Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
        b = Tensor([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
        np.testing.assert_allclose(matmul(a, b).numpy(), [[1.0, 2.0], [4.0, 5.0]])

    def test_cross_entropy_uniform_logits(self):
        """Uniform logits over 3 classes give ln 3"""
        loss = softmax_cross_entropy(Tensor([[0.0, 0.0, 0.0]]), [1])
        assert loss.item() == pytest.approx(math.log(3), abs=1e-6)
        assert loss.item() == pytest.approx(1.0986, abs=1e-4)

    def test_add_bias_broadcasts_over_rows(self):
        """A 1-D bias is added to every row"""
        out = add(Tensor(np.zeros((2, 3))), Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(out.numpy(), [[1, 2, 3], [1, 2, 3]])

    def test_add_rejects_mismatched_shapes(self):
        """Non-broadcastable shapes raise ShapeError"""
        with pytest.raises(ShapeError):
            add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))

    def test_matmul_rejects_inner_mismatch(self):
        """Inner dimensions must agree"""
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_forward_primitive_dispatch(self):
        """Ops are reachable by name"""
        out = forward_primitive("scale", Tensor([1.0, 2.0]), 3.0)
        np.testing.assert_allclose(out.numpy(), [3.0, 6.0])

    def test_forward_primitive_unknown(self):
        """Unknown op names are rejected"""
        with pytest.raises(ValueError):
            forward_primitive("softplus", Tensor([1.0]))

    def test_log_of_zero_is_non_finite(self):
        """A non-finite forward value fails loudly"""
        with pytest.raises(NonFiniteError):
            log(Tensor([0.0, 1.0]))

    def test_no_grad_records_nothing(self):
        """Ops inside no_grad leave the tape empty"""
        w = Tensor([1.0, 2.0], requires_grad=True)
        with no_grad():
            out = mul(w, w)
        assert len(get_tape()) == 0
        assert out.requires_grad is False

    def test_default_dtype_is_float32(self):
        """Storage is float32 outside a precision block"""
        assert Tensor([1.0]).numpy().dtype == np.float32
        with precision(np.float64):
            assert Tensor([1.0]).numpy().dtype == np.float64
        assert Tensor([1.0]).numpy().dtype == np.float32


class TestBackward:
    """Reverse pass and its failure modes"""

    def test_square_gradient(self):
        """d(sum w*w)/dw at w=3 is 6"""
        w = Tensor([3.0], requires_grad=True)
        loss = reduce_mean(mul(w, w))
        (grad,) = backward(loss, [w])
        np.testing.assert_allclose(grad, [6.0])
        np.testing.assert_allclose(w.grad, [6.0])

    def test_unused_parameter_gets_exact_zero(self):
        """A parameter the loss ignores receives zeros"""
        w = Tensor([3.0], requires_grad=True)
        unused = Tensor([[1.0, 2.0]], requires_grad=True)
        grads = backward(reduce_mean(mul(w, w)), [w, unused])
        assert np.array_equal(grads[1], np.zeros((1, 2)))

    def test_non_scalar_loss(self):
        """Backward needs a scalar"""
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(TapeError):
            backward(mul(w, w))

    def test_empty_tape(self):
        """Nothing recorded means nothing to differentiate"""
        with pytest.raises(TapeError):
            backward(Tensor(1.0, requires_grad=True))

    def test_constant_loss_is_not_stale(self):
        """A loss built only from constants is reported as such, not as a consumed tape"""
        w = Tensor([2.0], requires_grad=True)
        relu(w)
        c = Tensor([3.0])
        with pytest.raises(TapeError, match="does not require grad"):
            backward(reduce_mean(mul(c, c)), [w])

    def test_second_backward_is_stale(self):
        """The tape is consumed by the first backward"""
        w = Tensor([2.0], requires_grad=True)
        loss = reduce_mean(mul(w, w))
        backward(loss, [w])
        relu(w)  # put something else on the fresh tape
        with pytest.raises(TapeError):
            backward(loss, [w])

    def test_tape_resets_after_backward(self):
        """Backward leaves an empty tape"""
        w = Tensor([2.0], requires_grad=True)
        backward(reduce_mean(mul(w, w)), [w])
        assert len(get_tape()) == 0

    def test_shared_input_accumulates(self):
        """A tensor used twice sums both contributions"""
        w = Tensor([1.5], requires_grad=True)
        loss = reduce_mean(add(scale(w, 2.0), mul(w, w)))
        (grad,) = backward(loss, [w])
        assert grad[0] == pytest.approx(2.0 + 3.0)


class TestGradientCheck:
    """Analytic gradients against finite differences"""

    @pytest.fixture(autouse=True)
    def float64(self):
        with precision(np.float64):
            yield

    @pytest.fixture
    def rng(self):
        return np.random.default_rng(42)

    def test_matmul(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="a")
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True, name="b")
        assert_gradients_match(lambda: project(matmul(a, b)), [a, b])

    def test_add_with_bias(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="a")
        b = Tensor(rng.normal(size=4), requires_grad=True, name="bias")
        assert_gradients_match(lambda: project(add(a, b)), [a, b])

    def test_sub_and_mul(self, rng):
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True, name="a")
        b = Tensor(rng.normal(size=(2, 3)), requires_grad=True, name="b")
        assert_gradients_match(lambda: project(mul(sub(a, b), a)), [a, b])

    def test_scale_and_shift(self, rng):
        a = Tensor(rng.normal(size=(5,)), requires_grad=True, name="a")
        assert_gradients_match(lambda: project(shift(scale(a, -1.7), 0.3)), [a])

    def test_relu_away_from_kink(self, rng):
        values = rng.normal(size=(4, 3))
        values[np.abs(values) < 0.05] = 0.5
        a = Tensor(values, requires_grad=True, name="a")
        assert_gradients_match(lambda: project(relu(a)), [a])

    def test_tanh(self, rng):
        a = Tensor(rng.normal(size=(3, 3)), requires_grad=True, name="a")
        assert_gradients_match(lambda: project(tanh(a)), [a])

    def test_log(self, rng):
        a = Tensor(rng.uniform(0.5, 2.0, size=(4,)), requires_grad=True, name="a")
        assert_gradients_match(lambda: project(log(a)), [a])

    def test_clamp_interior(self, rng):
        a = Tensor(np.array([0.2, 0.5, 0.8, 1.5, -0.4]), requires_grad=True, name="a")
        assert_gradients_match(lambda: project(clamp(a, 0.0, 1.0)), [a])

    def test_reshape_and_transpose(self, rng):
        a = Tensor(rng.normal(size=(2, 6)), requires_grad=True, name="a")
        assert_gradients_match(
            lambda: project(transpose(reshape(a, (2, 3, 2)), (2, 0, 1))), [a])

    def test_reduce_mean_axis(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, name="a")
        assert_gradients_match(lambda: project(reduce_mean(a, axis=1)), [a])

    def test_take_rows_repeated(self, rng):
        a = Tensor(rng.normal(size=(4, 3)), requires_grad=True, name="a")
        assert_gradients_match(lambda: project(take_rows(a, [0, 2, 2, 3, 0])), [a])

    @pytest.mark.parametrize("axis", [None, 1])
    def test_mean_squared_error(self, rng, axis):
        a = Tensor(rng.normal(size=(3, 5)), requires_grad=True, name="a")
        b = Tensor(rng.normal(size=(3, 5)), requires_grad=True, name="b")
        assert_gradients_match(lambda: project(mean_squared_error(a, b, axis=axis)), [a, b])

    def test_softmax_cross_entropy(self, rng):
        logits = Tensor(rng.normal(size=(5, 4)), requires_grad=True, name="logits")
        assert_gradients_match(lambda: softmax_cross_entropy(logits, [0, 3, 1, 1, 2]), [logits])

    def test_conv2d_padded_strided(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 5, 5)), requires_grad=True, name="x")
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True, name="w")
        assert_gradients_match(lambda: project(conv2d(x, w, stride=2, padding=1)), [x, w])

    def test_mlp_with_cross_entropy(self, rng):
        """Two-layer tanh perceptron under softmax cross-entropy"""
        x = Tensor(rng.normal(size=(6, 5)))
        w1 = Tensor(rng.normal(size=(5, 7)) * 0.5, requires_grad=True, name="w1")
        b1 = Tensor(rng.normal(size=7) * 0.1 + 0.3, requires_grad=True, name="b1")
        w2 = Tensor(rng.normal(size=(7, 3)) * 0.5, requires_grad=True, name="w2")
        labels = [0, 1, 2, 0, 1, 2]

        def loss():
            return softmax_cross_entropy(matmul(tanh(add(matmul(x, w1), b1)), w2), labels)

        assert_gradients_match(loss, [w1, b1, w2])

    def test_graph_convolution(self, rng):
        """Propagate with a fixed adjacency, then tanh output head"""
        adjacency = Tensor(np.full((3, 3), 1.0 / 3.0))
        features = Tensor(rng.integers(0, 2, size=(3, 4)).astype(float))
        w1 = Tensor(rng.normal(size=(4, 6)), requires_grad=True, name="w1")
        w_out = Tensor(rng.normal(size=(6, 8)) * 0.3, requires_grad=True, name="w_out")

        def loss():
            hidden = tanh(matmul(matmul(adjacency, features), w1))
            return project(scale(tanh(matmul(hidden, w_out)), 0.2))

        assert_gradients_match(loss, [w1, w_out])

    def test_psnr_hinge(self, rng):
        """Stealth-style composite: hinge on log-MSE"""
        x = Tensor(rng.uniform(0.2, 0.8, size=(3, 12)))
        delta = Tensor(rng.normal(size=(3, 12)) * 0.05, requires_grad=True, name="delta")

        def loss():
            mse = mean_squared_error(add(x, delta), x, axis=1)
            psnr = scale(log(clamp(mse, 1e-10)), -10.0 / math.log(10.0))
            return reduce_mean(relu(shift(scale(psnr, -1.0), 40.0)))

        assert_gradients_match(loss, [delta])


class TestSgd:
    """Momentum SGD with weight decay"""

    def test_vanilla_step(self):
        """p=1, g=1, lr=0.1, no momentum -> 0.9"""
        p = Tensor([1.0], requires_grad=True)
        state = OptimizerState(lr=0.1, momentum=0.0, weight_decay=0.0)
        sgd_step([p], [np.array([1.0])], state)
        assert p.numpy()[0] == pytest.approx(0.9)

    def test_momentum_two_steps(self):
        """v1=1, p1=0.9; v2=1.9, p2=0.71"""
        p = Tensor([1.0], requires_grad=True)
        state = OptimizerState(lr=0.1, momentum=0.9, weight_decay=0.0)
        sgd_step([p], [np.array([1.0])], state)
        assert state.velocities[0][0] == pytest.approx(1.0)
        assert p.numpy()[0] == pytest.approx(0.9, abs=1e-6)
        sgd_step([p], [np.array([1.0])], state)
        assert state.velocities[0][0] == pytest.approx(1.9)
        assert p.numpy()[0] == pytest.approx(0.71, abs=1e-6)

    def test_weight_decay_only(self):
        """Zero gradient with wd=1e-4 -> 0.99999"""
        with precision(np.float64):
            p = Tensor([1.0], requires_grad=True)
        state = OptimizerState(lr=0.1, momentum=0.0, weight_decay=1e-4)
        sgd_step([p], [np.array([0.0])], state)
        assert p.numpy()[0] == pytest.approx(0.99999, abs=1e-9)

    def test_normalized_gradient(self):
        """Gradients (3, 4) rescaled to unit norm step by (0.06, 0.08) at lr=0.1"""
        a = Tensor([1.0], requires_grad=True)
        b = Tensor([1.0], requires_grad=True)
        state = OptimizerState(lr=0.1, momentum=0.0, weight_decay=0.0, grad_norm=1.0)
        sgd_step([a, b], [np.array([3.0]), np.array([4.0])], state)
        assert a.numpy()[0] == pytest.approx(0.94, abs=1e-6)
        assert b.numpy()[0] == pytest.approx(0.92, abs=1e-6)

    def test_normalized_step_ignores_loss_scale(self):
        """Scaling the loss by 1e-3 leaves a normalized step unchanged"""
        results = []
        for factor in (1.0, 1e-3):
            w = Tensor([2.0, -1.0], requires_grad=True)
            opt = SGD([w], lr=0.1, momentum=0.0, weight_decay=0.0, grad_norm=1.0)
            opt.step(scale(reduce_mean(mul(w, w)), factor))
            results.append(w.numpy().copy())
        np.testing.assert_allclose(results[0], results[1], rtol=1e-5)

    def test_zero_gradient_not_normalized(self):
        """An all-zero gradient stays zero under normalization"""
        p = Tensor([1.0], requires_grad=True)
        state = OptimizerState(lr=0.1, momentum=0.0, weight_decay=0.0, grad_norm=1.0)
        sgd_step([p], [np.array([0.0])], state)
        assert p.numpy()[0] == pytest.approx(1.0)

    @pytest.mark.parametrize("kwargs", [
        {"lr": 0.0},
        {"lr": 0.1, "momentum": 1.0},
        {"lr": 0.1, "momentum": -0.1},
        {"lr": 0.1, "weight_decay": -1e-4},
        {"lr": 0.1, "grad_norm": 0.0},
    ])
    def test_invalid_hyperparameters(self, kwargs):
        """lr > 0, momentum in [0, 1), wd >= 0"""
        with pytest.raises(ValueError):
            OptimizerState(**kwargs)

    def test_gradient_count_mismatch(self):
        """One gradient per parameter"""
        p = Tensor([1.0], requires_grad=True)
        with pytest.raises(ShapeError):
            sgd_step([p], [], OptimizerState(lr=0.1))

    def test_optimizer_minimizes_quadratic(self):
        """SGD drives w*w toward zero"""
        w = Tensor([3.0], requires_grad=True)
        opt = SGD([w], lr=0.1, momentum=0.5, weight_decay=0.0)
        for _ in range(60):
            opt.step(reduce_mean(mul(w, w)))
        assert abs(w.numpy()[0]) < 1e-2

    def test_lr_setter_validates(self):
        """Scheduled learning rates must stay positive"""
        opt = SGD([Tensor([1.0], requires_grad=True)], lr=0.1)
        opt.lr = 0.01
        assert opt.lr == 0.01
        with pytest.raises(ValueError):
            opt.lr = 0.0

    def test_deterministic(self):
        """Same inputs give bit-identical parameters"""
        results = []
        for _ in range(2):
            rng = np.random.default_rng(5)
            w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
            x = Tensor(rng.normal(size=(8, 4)))
            opt = SGD([w], lr=0.05)
            for _ in range(5):
                opt.step(softmax_cross_entropy(matmul(x, w), [0, 1] * 4))
            results.append(w.numpy().copy())
        assert np.array_equal(results[0], results[1])
