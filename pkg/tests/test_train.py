import math

import numpy as np
import pytest

from amos.core import AmosUnitParams, build_relu_unit, evaluate_unit, parameter_count
from amos.train import (
    TargetFunction,
    TrainConfig,
    TrainingDiverged,
    default_target,
    eval_mse,
    pseudo_derivative,
    sample_dataset,
    train_unit,
    unit_forward_backward,
)


def ramp(v, gamma):
    """Antiderivative of the unit-area triangle."""
    if v <= -gamma:
        return 0.0
    if v <= 0:
        return (v + gamma) ** 2 / (2 * gamma**2)
    if v < gamma:
        return 1.0 - (gamma - v) ** 2 / (2 * gamma**2)
    return 1.0


def surrogate_loss(p, x, x2, target, gamma, frozen):
    """Loss whose exact derivative is the straight-through surrogate gradient.

    ``frozen`` holds ``(heaviside(v_i), v_i)`` from the unperturbed forward pass.
    """
    K = len(p["c"])
    z = []
    for i in range(K):
        v = p["c"][i] * x - sum(p["h"][i][j] * z[j] for j in range(i)) - p["T"][i]
        if x2 is not None:
            v += p["c2"][i] * x2
        step, v0 = frozen[i]
        z.append(step + ramp(v, gamma) - ramp(v0, gamma))
    y = sum(p["d"][i] * z[i] for i in range(K))
    return (y - target) ** 2


def frozen_forward(p, x, x2):
    K = len(p["c"])
    z, out = [], []
    for i in range(K):
        v = p["c"][i] * x - sum(p["h"][i][j] * z[j] for j in range(i)) - p["T"][i]
        if x2 is not None:
            v += p["c2"][i] * x2
        z.append(1.0 if v >= 0 else 0.0)
        out.append((z[-1], v))
    return out


def fd_gradients(unit, x, x2, target, gamma, eps=1e-6):
    p = {
        "c": unit.c.tolist(),
        "d": unit.d.tolist(),
        "h": unit.h.tolist(),
        "T": unit.T.tolist(),
    }
    if unit.c2 is not None:
        p["c2"] = unit.c2.tolist()
    frozen = frozen_forward(p, x, x2)
    grads = {}
    for name, values in p.items():
        if name == "h":
            g = np.zeros((unit.K, unit.K))
            for i in range(unit.K):
                for j in range(i):
                    orig = values[i][j]
                    values[i][j] = orig + eps
                    up = surrogate_loss(p, x, x2, target, gamma, frozen)
                    values[i][j] = orig - eps
                    down = surrogate_loss(p, x, x2, target, gamma, frozen)
                    values[i][j] = orig
                    g[i, j] = (up - down) / (2 * eps)
        else:
            g = np.zeros(unit.K)
            for i in range(unit.K):
                orig = values[i]
                values[i] = orig + eps
                up = surrogate_loss(p, x, x2, target, gamma, frozen)
                values[i] = orig - eps
                down = surrogate_loss(p, x, x2, target, gamma, frozen)
                values[i] = orig
                g[i] = (up - down) / (2 * eps)
        grads[name] = g
    return grads


def random_instance(rng, K, arity):
    return AmosUnitParams(
        arity=arity,
        K=K,
        c=rng.normal(size=K),
        c2=rng.normal(size=K) if arity == 2 else None,
        d=rng.normal(size=K),
        h=np.tril(rng.normal(size=(K, K)) * 0.5, k=-1),
        T=rng.normal(size=K) * 0.5,
    )


class TestPseudoDerivative:
    def test_values(self):
        assert pseudo_derivative(0.0, 1.0) == 1.0
        assert pseudo_derivative(1.0, 1.0) == 0.0
        assert pseudo_derivative(-1.0, 1.0) == 0.0
        assert pseudo_derivative(0.5, 1.0) == 0.5
        assert pseudo_derivative(-0.5, 1.0) == max(0.0, 1.0 - 0.5 / 1.0) / 1.0

    def test_unit_area(self):
        for gamma in (0.3, 1.0, 2.5):
            v = np.linspace(-3 * gamma, 3 * gamma, 600_001)
            area = np.trapezoid(pseudo_derivative(v, gamma), v)
            assert area == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("gamma", [0.0, -1.0])
    def test_rejects_bad_width(self, gamma):
        with pytest.raises(ValueError):
            pseudo_derivative(0.0, gamma)


class TestForwardBackward:
    def test_loss_matches_reference_forward(self):
        rng = np.random.default_rng(0)
        unit = random_instance(rng, 5, 2)
        loss, _ = unit_forward_backward(unit, 0.3, -0.7, 0.25, 1.0)
        y = evaluate_unit(unit, 0.3, -0.7).y
        assert loss == pytest.approx((y - 0.25) ** 2, rel=1e-14)

    def test_dead_region_has_zero_gradients(self):
        unit = AmosUnitParams(
            arity=1, K=3, c=[1, 1, 1], d=[1, 2, 3], h=np.zeros((3, 3)), T=[5.0, 6.0, 7.0]
        )
        _, grads = unit_forward_backward(unit, 0.0, None, 1.0, 1.0)
        for name in ("c", "d", "h", "T"):
            assert np.all(grads[name] == 0.0)

    def test_readout_gradient_is_error_times_spike(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            unit = random_instance(rng, 4, 1)
            x, t = rng.normal(), rng.normal()
            ev = evaluate_unit(unit, x)
            _, grads = unit_forward_backward(unit, x, None, t, 1.0)
            np.testing.assert_allclose(grads["d"], 2 * (ev.y - t) * np.array(ev.z), rtol=1e-14)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2024)
        checked = 0
        for n in range(100):
            K = int(rng.integers(1, 6))
            arity = 1 + n % 2
            unit = random_instance(rng, K, arity)
            x = float(rng.normal())
            x2 = float(rng.normal()) if arity == 2 else None
            target = float(rng.normal())
            gamma = float(rng.uniform(0.5, 2.0))
            _, analytic = unit_forward_backward(unit, x, x2, target, gamma)
            numeric = fd_gradients(unit, x, x2, target, gamma)
            for name, g in numeric.items():
                a = analytic[name]
                tol = 1e-5 * np.maximum(np.abs(a), np.abs(g)) + 1e-9
                assert np.all(np.abs(a - g) <= tol), (n, name, a, g)
                checked += g.size
        assert checked > 500


class TestTargetAndSampling:
    def test_sigmoid_samples_in_range(self):
        inputs, values = sample_dataset(default_target("sigmoid"), 3, 1)
        assert inputs.shape == (3, 1)
        assert np.all((values > 0) & (values < 1))
        assert np.all((inputs >= -8) & (inputs <= 8))

    def test_mult_values(self):
        inputs, values = sample_dataset(default_target("mult"), 50, 3)
        np.testing.assert_array_equal(values, inputs[:, 0] * inputs[:, 1])

    def test_swish_at_zero(self):
        target = TargetFunction("swish", ((-6, 6),))
        assert target(np.array([0.0]))[0] == 0.0

    def test_deterministic(self):
        a = sample_dataset(default_target("mult"), 20, 9)
        b = sample_dataset(default_target("mult"), 20, 9)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_empty_domain_rejected(self):
        with pytest.raises(ValueError):
            TargetFunction("sigmoid", ((1.0, 1.0),))
        with pytest.raises(ValueError):
            TargetFunction("sigmoid", ((0.0, math.inf),))

    def test_bad_n(self):
        with pytest.raises(ValueError):
            sample_dataset(default_target("relu"), 0, 0)

    def test_tabulated_interpolates(self):
        xs = np.linspace(-1, 1, 5)
        target = TargetFunction("tabulated", ((-1, 1),), table=(xs, xs**2))
        assert target(np.array([0.25]))[0] == pytest.approx(0.125)
        ys = np.linspace(-1, 1, 3)
        grid = np.add.outer(xs, ys)
        target2 = TargetFunction("tabulated", ((-1, 1), (-1, 1)), table=(xs, ys, grid))
        assert target2(np.array([0.25]), np.array([0.5]))[0] == pytest.approx(0.75)


class TestEvalMse:
    def test_closed_form_relu_bound(self):
        unit = build_relu_unit(10, 4.0)
        target = TargetFunction("relu", ((-4, 4),))
        assert eval_mse(unit, target, 1001) <= (4 / 1024) ** 2

    def test_zero_function(self):
        unit = AmosUnitParams(arity=1, K=2, c=[1, 1], d=[0, 0], h=np.zeros((2, 2)), T=[0, 1])
        target = TargetFunction("tabulated", ((-1, 1),), fn=np.zeros_like)
        assert eval_mse(unit, target, 11) == 0.0

    def test_order_invariant(self):
        unit = build_relu_unit(4, 2.0)
        target = TargetFunction("relu", ((-2, 2),))
        flipped = TargetFunction("tabulated", ((-2, 2),), fn=lambda x: np.maximum(x, 0))
        a = eval_mse(unit, target, 501)
        xs = np.linspace(-2, 2, 501)[::-1]
        from amos.core import evaluate_batch

        y, _ = evaluate_batch(unit, xs)
        assert a == pytest.approx(np.mean((y - np.maximum(xs, 0)) ** 2), rel=1e-12)
        assert a == eval_mse(unit, flipped, 501)

    def test_grid_too_small(self):
        with pytest.raises(ValueError):
            eval_mse(build_relu_unit(3, 1.0), TargetFunction("relu", ((-1, 1),)), 1)


class TestTrainUnit:
    def small_cfg(self, **kw):
        return TrainConfig(**{"K": 4, "sample_count": 256, "epochs": 6, "batch_size": 32, **kw})

    def test_deterministic(self):
        target = default_target("sigmoid")
        a = train_unit(target, self.small_cfg(rng_seed=5))
        b = train_unit(target, self.small_cfg(rng_seed=5))
        assert a.params == b.params
        assert a.mse_history == b.mse_history
        assert a.final_mse == b.final_mse

    def test_seed_matters(self):
        target = default_target("sigmoid")
        a = train_unit(target, self.small_cfg(rng_seed=5))
        b = train_unit(target, self.small_cfg(rng_seed=6))
        assert a.params != b.params

    def test_shape_conserved_and_history_finite(self):
        target = default_target("mult")
        report = train_unit(target, self.small_cfg(K=6))
        assert report.params.K == 6 and report.params.arity == 2
        assert report.params.n_params == parameter_count(2, 6)
        assert len(report.mse_history) == 6
        assert all(math.isfinite(m) and m >= 0 for m in report.mse_history)
        assert report.final_mse >= 0

    def test_improves_over_epochs(self):
        report = train_unit(default_target("sigmoid"), self.small_cfg(K=8, epochs=30))
        assert report.mse_history[-1] < report.mse_history[0]

    def test_divergence_reported(self):
        target = TargetFunction("tabulated", ((-1, 1),), fn=lambda x: np.full_like(x, 1e308))
        with pytest.raises(TrainingDiverged) as info:
            train_unit(target, self.small_cfg(epochs=3))
        assert info.value.epoch == 0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(K=0)
        with pytest.raises(ValueError):
            TrainConfig(K=3, gamma=0.0)
        with pytest.raises(ValueError):
            TrainConfig.from_dict({"K": 3, "bogus": 1})
