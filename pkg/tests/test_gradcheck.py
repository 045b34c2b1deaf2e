"""Finite-difference gradient suite for every differentiable operation."""

import numpy as np
import pytest

from probact import functional as F
from probact.activations import probact
from probact.autodiff import Function, Variable, sum_all
from probact.config import (
    ActivationConfig,
    ActivationKind,
    EvalMode,
    ModelSpec,
    ProbActConfig,
    ProbActMode,
    SigmaGranularity,
)
from probact.errors import UsageError
from probact.gradcheck import finite_diff_check, relative_error
from probact.layers import ForwardContext
from probact.models import build_model
from probact.tensor import NoiseKey, Tensor

from .helpers import away_from_zero, leaf, param, weighted_sum

TOLERANCE = 1e-4


def assert_gradients(fn, variables, **kwargs):
    report = finite_diff_check(fn, variables, h=(1e-4, 1e-5, 1e-6), tolerance=TOLERANCE, **kwargs)
    worst = {c.name: c.max_relative_error for c in report.checks}
    assert report.passed, f"max relative errors: {worst}"


class TestLinear:
    """Gradient checks for dense and convolution layers."""

    def test_dense(self, rng):
        """Test dense input, weight and bias gradients."""
        x = leaf(rng.normal(size=(4, 5)), "x")
        w = param(rng.normal(size=(5, 3)), "w")
        b = param(rng.normal(size=3), "b")
        r = rng.normal(size=(4, 3))
        assert_gradients(lambda: weighted_sum(F.dense(x, w, b), r), [x, w, b])

    def test_conv2d(self, rng):
        """Test conv2d input, kernel and bias gradients."""
        x = leaf(rng.normal(size=(2, 3, 5, 5)), "x")
        w = param(rng.normal(size=(4, 3, 3, 3)), "w")
        b = param(rng.normal(size=4), "b")
        r = rng.normal(size=(2, 4, 5, 5))
        assert_gradients(lambda: weighted_sum(F.conv2d(x, w, b), r), [x, w, b])

    def test_conv2d_no_padding(self, rng):
        """Test conv2d without padding."""
        x = leaf(rng.normal(size=(1, 2, 5, 4)), "x")
        w = param(rng.normal(size=(2, 2, 3, 3)), "w")
        b = param(np.zeros(2), "b")
        r = rng.normal(size=(1, 2, 3, 2))
        assert_gradients(lambda: weighted_sum(F.conv2d(x, w, b, padding=0), r), [x, w])


class TestPoolingAndNormalization:
    """Gradient checks for pooling, batch norm and the loss."""

    def test_maxpool(self, rng):
        """Test maxpool with well-separated window values."""
        values = rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.1
        x = leaf(values, "x")
        r = rng.normal(size=(2, 2, 2, 2))
        assert_gradients(lambda: weighted_sum(F.maxpool2d(x), r), [x])

    def test_batch_norm_training(self, rng):
        """Test batch norm with batch statistics on rank-4 input."""
        x = leaf(rng.normal(size=(4, 3, 2, 2)), "x")
        gamma = param(rng.uniform(0.5, 1.5, size=3), "gamma")
        beta = param(rng.normal(size=3), "beta")
        running = F.RunningStats.zeros(3, np.dtype(np.float64))
        r = rng.normal(size=(4, 3, 2, 2))

        def objective():
            return weighted_sum(F.batch_norm(x, gamma, beta, running, training=True), r)

        assert_gradients(objective, [x, gamma, beta])

    def test_batch_norm_dense_eval(self, rng):
        """Test batch norm with running statistics on rank-2 input."""
        x = leaf(rng.normal(size=(5, 4)), "x")
        gamma = param(rng.uniform(0.5, 1.5, size=4), "gamma")
        beta = param(rng.normal(size=4), "beta")
        running = F.RunningStats(rng.normal(size=4), rng.uniform(0.5, 2.0, size=4))
        r = rng.normal(size=(5, 4))

        def objective():
            return weighted_sum(F.batch_norm(x, gamma, beta, running, training=False), r)

        assert_gradients(objective, [x, gamma, beta])

    def test_softmax_cross_entropy(self, rng):
        """Test the loss gradient with respect to the logits."""
        logits = leaf(rng.normal(size=(6, 4)), "logits")
        labels = rng.integers(0, 4, size=6)
        assert_gradients(lambda: F.softmax_cross_entropy(logits, labels), [logits])

    def test_flatten(self, rng):
        """Test flatten routes gradients back to the original layout."""
        x = leaf(rng.normal(size=(2, 2, 3, 3)), "x")
        r = rng.normal(size=(2, 18))
        assert_gradients(lambda: weighted_sum(F.flatten(x), r), [x])

    def test_dropout_frozen_mask(self, rng):
        """Test dropout under a fixed key."""
        x = leaf(rng.normal(size=(3, 8)), "x")
        key = NoiseKey(layer_id=4, step=2)
        r = rng.normal(size=(3, 8))
        assert_gradients(lambda: weighted_sum(F.dropout(x, 0.3, True, key), r), [x])


class TestActivations:
    """Gradient checks for the deterministic activations."""

    def test_relu(self, rng):
        """Test ReLU away from the kink."""
        x = leaf(away_from_zero(rng, (4, 6)), "x")
        r = rng.normal(size=(4, 6))
        assert_gradients(lambda: weighted_sum(F.relu(x), r), [x])

    def test_leaky_relu(self, rng):
        """Test leaky ReLU away from the kink."""
        x = leaf(away_from_zero(rng, (4, 6)), "x")
        r = rng.normal(size=(4, 6))
        assert_gradients(lambda: weighted_sum(F.leaky_relu(x, 0.1), r), [x])

    def test_prelu(self, rng):
        """Test PReLU input and per-channel slope gradients."""
        x = leaf(away_from_zero(rng, (3, 2, 2, 2)), "x")
        a = param([0.25, 0.1], "a")
        r = rng.normal(size=(3, 2, 2, 2))
        assert_gradients(lambda: weighted_sum(F.prelu(x, a), r), [x, a])

    def test_swish(self, rng):
        """Test swish everywhere (it is smooth)."""
        x = leaf(rng.normal(size=(4, 6)), "x")
        r = rng.normal(size=(4, 6))
        assert_gradients(lambda: weighted_sum(F.swish(x), r), [x])


class TestProbAct:
    """Gradient checks for ProbAct under frozen noise."""

    KEY = NoiseKey(layer_id=1, step=3, draw_id=0, seed=7)

    def check(self, rng, config, sigma, shape=(4, 3, 2, 2), eval_mode=None, training=True):
        x = leaf(away_from_zero(rng, shape), "x")
        r = rng.normal(size=shape)

        def objective():
            out, _ = probact(
                x, config, sigma, self.KEY, training=training, eval_mode=eval_mode
            )
            return weighted_sum(out, r)

        variables = [x] if sigma is None else [x, sigma]
        assert_gradients(objective, variables)

    def test_fixed(self, rng):
        """Test the x path of fixed-sigma ProbAct."""
        self.check(rng, ProbActConfig(mode=ProbActMode.FIXED, sigma=0.5), None)

    def test_single(self, rng):
        """Test the shared scalar sigma path."""
        sigma = param(np.asarray(0.3), "sigma")
        self.check(rng, ProbActConfig(mode=ProbActMode.SINGLE), sigma)

    def test_elementwise(self, rng):
        """Test the per-element sigma path."""
        sigma = param(rng.uniform(0.1, 1.0, size=(3, 2, 2)), "sigma")
        self.check(rng, ProbActConfig(mode=ProbActMode.ELEMENTWISE), sigma)

    def test_bounded(self, rng):
        """Test the k path through the sigmoid bound."""
        k = param(rng.normal(scale=0.3, size=(3, 2, 2)), "k")
        self.check(rng, ProbActConfig(mode=ProbActMode.BOUNDED, alpha=2.0, beta=5.0), k)

    def test_bounded_other_bounds(self, rng):
        """Test the k path with non-default alpha and beta."""
        k = param(rng.normal(scale=0.3, size=(3, 2, 2)), "k")
        self.check(rng, ProbActConfig(mode=ProbActMode.BOUNDED, alpha=0.5, beta=2.0), k)

    def test_channel_granularity(self, rng):
        """Test per-channel k broadcast over the spatial axes."""
        k = param(rng.normal(scale=0.3, size=(3, 1, 1)), "k")
        config = ProbActConfig(mode=ProbActMode.BOUNDED, granularity=SigmaGranularity.CHANNEL)
        self.check(rng, config, k)

    def test_dense_site(self, rng):
        """Test element-wise sigma on a rank-2 activation map."""
        sigma = param(rng.uniform(0.1, 1.0, size=5), "sigma")
        self.check(rng, ProbActConfig(mode=ProbActMode.ELEMENTWISE), sigma, shape=(6, 5))

    def test_mc_average(self, rng):
        """Test the mc-averaged evaluation path stays exact."""
        k = param(rng.normal(scale=0.3, size=(3, 2, 2)), "k")
        config = ProbActConfig(mode=ProbActMode.BOUNDED)
        self.check(rng, config, k, eval_mode=EvalMode(kind="mc", samples=4), training=False)


class TestWholeModel:
    """Finite-difference check across every parameter of a small VGG."""

    def test_vgg_micro_bounded(self, rng):
        """Test tape gradients of a 64-bit vgg-micro with bounded ProbAct."""
        activation = ActivationConfig(
            kind=ActivationKind.PROBACT, probact=ProbActConfig(mode=ProbActMode.BOUNDED)
        )
        model = build_model(
            ModelSpec.preset("vgg-micro"), activation, 3, (2, 4, 4), seed=4, dtype=np.float64
        )
        x = rng.normal(size=(4, 2, 4, 4))
        labels = np.array([0, 1, 2, 1])
        ctx = ForwardContext(training=True, step=2, noise_seed=7)
        # conv biases are cancelled by the batch norm that follows
        params = {
            name: p
            for name, p in model.named_parameters().items()
            if not name.endswith("conv.bias")
        }

        report = finite_diff_check(
            lambda: F.softmax_cross_entropy(model(x, ctx), labels),
            list(params.values()),
            h=(1e-5, 1e-6, 1e-7),
            tolerance=TOLERANCE,
            max_elements=8,
        )
        worst = {c.name: c.max_relative_error for c in report.checks}
        assert report.passed, f"max relative errors: {worst}"
        assert sorted(worst) == sorted(params)
        assert report["2.probact.k"].checked_elements == 8


class TestFiniteDiffCheck:
    """Tests for the checker itself."""

    def test_detects_wrong_gradient(self, rng):
        """Test a deliberately wrong backward fails the check."""

        class Squared(Function):
            name = "squared"

            @staticmethod
            def forward(saved, x):
                return x * x

            @staticmethod
            def backward(saved, grad):
                return (grad * 3.0,)

        x = leaf(rng.uniform(1.0, 2.0, size=4), "x")
        report = finite_diff_check(lambda: sum_all(Squared.apply(x)), [x])
        assert not report.passed
        assert report["x"].max_relative_error > 0.1

    def test_requires_64_bit(self):
        """Test 32-bit variables are rejected."""
        x = Variable(Tensor([1.0], dtype=np.float32), requires_grad=True, name="x")
        with pytest.raises(UsageError, match="64-bit"):
            finite_diff_check(lambda: sum_all(x), [x])

    def test_requires_grad(self):
        """Test constants are rejected."""
        x = Variable(Tensor([1.0], dtype=np.float64), name="x")
        with pytest.raises(UsageError, match="does not require"):
            finite_diff_check(lambda: sum_all(x), [x])

    def test_element_sampling(self, rng):
        """Test the element cap limits checked elements."""
        w = param(rng.normal(size=(10, 10)), "w")
        report = finite_diff_check(lambda: sum_all(F.swish(w)), [w], max_elements=7)
        assert report["w"].checked_elements == 7
        assert report.passed

    def test_values_restored(self, rng):
        """Test variables hold their original values afterwards."""
        values = rng.normal(size=5)
        x = leaf(values, "x")
        finite_diff_check(lambda: sum_all(F.swish(x)), [x])
        assert np.array_equal(x.data, values)

    def test_relative_error(self):
        """Test the relative error definition."""
        assert relative_error(1.0, 1.0) == 0.0
        assert relative_error(2.0, 1.0) == 0.5
        assert relative_error(0.0, 1e-12) == pytest.approx(1e-4)
