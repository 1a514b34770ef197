import math

import numpy as np
import pytest

from cshash.binhash import BinaryCodeMatrix, DsfParams, hamming
from cshash.centers import ProblemConfig, generate_centers
from cshash.errors import ValidationError
from cshash.losses import (
    LossConfig,
    combined_objective,
    cosine_logits,
    hamming_from_cosine,
    metric_loss,
    quant_loss,
)

CENTERS8 = generate_centers(ProblemConfig(1, 5, 1, 8), seed=0)


def finite_difference(f, x, step=1e-5):
    """Central differences of a scalar function over every coordinate."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += step
        minus[i] -= step
        grad.ravel()[i] = (f(plus.reshape(x.shape)) - f(minus.reshape(x.shape))) / (
            2 * step
        )
    return grad


def relative_error(a, b):
    scale = max(np.abs(a).max(initial=0), np.abs(b).max(initial=0), 1e-12)
    return np.abs(a - b).max(initial=0) / scale


def informative_surrogate_case(rng, n=2, k=8):
    """(v, t) where the t-gradient is numerically resolvable: at least one
    in-interval entry whose plain sign opposes the dynamic fill value, and
    every entry > 1e-4 away from the piecewise boundaries."""
    t = float(rng.uniform(0.0015, 0.004))
    v = rng.uniform(0.2, 1.5, size=(n, k)) * rng.choice([-1.0, 1.0], size=(n, k))
    for i in range(n):
        v[i, : k // 2] = np.abs(v[i, : k // 2])  # majority positive -> fill = -1
        v[i, k // 2 : k - 2] = -np.abs(v[i, k // 2 : k - 2])
        v[i, k - 1] = rng.uniform(2e-4, t - 2e-4)  # in-interval, sign +1
    return v, t


class TestCosineLogits:
    def test_self_similarity_is_one(self):
        for c in range(CENTERS8.classes):
            f_e = CENTERS8.rows[c] / math.sqrt(8)
            logits = cosine_logits(f_e, CENTERS8)
            assert logits[c] == pytest.approx(1.0, abs=1e-12)

    def test_antipodal_is_minus_one(self):
        f_e = -CENTERS8.rows[1] / math.sqrt(8)
        assert cosine_logits(f_e, CENTERS8)[1] == pytest.approx(-1.0, abs=1e-12)

    def test_orthogonal_hadamard_centers_give_zero(self):
        f_e = CENTERS8.rows[0] / math.sqrt(8)
        logits = cosine_logits(f_e, CENTERS8)
        assert np.allclose(logits[1:], 0.0, atol=1e-12)

    def test_range(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            f_e = rng.standard_normal(8)
            f_e /= np.linalg.norm(f_e)
            logits = cosine_logits(f_e, CENTERS8)
            assert np.all(np.abs(logits) <= 1 + 1e-12)

    def test_non_unit_rejected(self):
        with pytest.raises(ValidationError):
            cosine_logits(np.full(8, 0.5), CENTERS8)

    def test_scale_invariance_through_combined(self):
        # scaling raw features before internal normalization leaves the
        # logits unchanged
        rng = np.random.default_rng(1)
        z = rng.standard_normal((3, 8))
        config = LossConfig(quantization_mode="none", lam=0.0)
        base = combined_objective(z, np.array([0, 1, 2]), CENTERS8, config, DsfParams())
        scaled = combined_objective(
            3.7 * z, np.array([0, 1, 2]), CENTERS8, config, DsfParams()
        )
        assert np.abs(base.per_sample_logits - scaled.per_sample_logits).max() < 1e-10


class TestMetricLoss:
    def test_cosface_scalar_example(self):
        # independent evaluation: target cos 1, other cos 0, S=10, alpha=0.15
        # -> -log(e^8.5 / (e^8.5 + 1)) = log(1 + e^-8.5)
        config = LossConfig(scale_s=10.0, margin_alpha=0.15, variant="cosface")
        loss, _ = metric_loss(np.array([[1.0, 0.0]]), np.array([0]), config)
        assert loss == pytest.approx(2.0344767212944309e-4, rel=1e-12)

    def test_zero_margin_general_form_is_plain_ce(self):
        rng = np.random.default_rng(2)
        logits = rng.uniform(-1, 1, size=(4, 6))
        y = rng.integers(0, 6, size=4)
        degenerate = LossConfig(variant="cosface", m1=1.0, m2=0.0, m3=0.0)
        plain = LossConfig(variant="ce")
        loss_a, grad_a = metric_loss(logits, y, degenerate)
        loss_b, grad_b = metric_loss(logits, y, plain)
        assert loss_a == loss_b
        assert np.array_equal(grad_a, grad_b)

    @pytest.mark.parametrize(
        "config",
        [
            LossConfig(variant="ce"),
            LossConfig(variant="cosface", margin_alpha=0.15),
            LossConfig(variant="arcface", margin_alpha=0.3),
            LossConfig(variant="sphereface", margin_alpha=1.5),
            LossConfig(variant="cosface", scale_s=30.0, margin_alpha=0.25),
        ],
    )
    def test_gradient_matches_finite_differences(self, config):
        rng = np.random.default_rng(hash(config.variant) % 2**32)
        for _ in range(25):
            logits = rng.uniform(-0.95, 0.95, size=(3, 5))
            y = rng.integers(0, 5, size=3)
            _, grad = metric_loss(logits, y, config)
            fd = finite_difference(lambda L: metric_loss(L, y, config)[0], logits)
            assert relative_error(grad, fd) < 1e-4

    def test_monotone_in_target_cosine(self):
        config = LossConfig(variant="cosface")
        y = np.array([0])
        previous = math.inf
        for cos_t in np.linspace(-0.9, 0.9, 50):
            loss, _ = metric_loss(np.array([[cos_t, 0.1, -0.2]]), y, config)
            assert loss <= previous + 1e-12
            previous = loss

    def test_out_of_range_target(self):
        with pytest.raises(ValidationError):
            metric_loss(np.zeros((2, 3)), np.array([0, 3]), LossConfig())

    def test_margin_range_validation(self):
        with pytest.raises(ValidationError):
            LossConfig(variant="cosface", margin_alpha=0.5)  # >= 1 - cos(pi/4)
        with pytest.raises(ValidationError):
            LossConfig(variant="arcface", margin_alpha=1.5)
        with pytest.raises(ValidationError):
            LossConfig(variant="sphereface", margin_alpha=0.5)


class TestQuantLoss:
    def test_fixed_point_is_zero(self):
        v = np.array([[1.0, -1.0, 1.0], [-1.0, -1.0, 1.0]])
        result = quant_loss(v, "hard_sign", DsfParams())
        assert result.loss == 0.0
        assert np.all(result.grad_v == 0.0)

    def test_hand_case(self):
        # N=1: (0.5 - 1)^2 + (-0.5 + 1)^2 = 0.5
        result = quant_loss(np.array([[0.5, -0.5]]), "hard_sign", DsfParams())
        assert result.loss == pytest.approx(0.5, abs=1e-15)

    def test_hard_sign_gradient(self):
        rng = np.random.default_rng(3)
        v = rng.uniform(-2, 2, size=(3, 8))
        v[np.abs(v) < 1e-3] = 0.5  # stay off the sign boundary
        result = quant_loss(v, "hard_sign", DsfParams())
        fd = finite_difference(
            lambda vv: quant_loss(vv, "hard_sign", DsfParams()).loss, v
        )
        assert relative_error(result.grad_v, fd) < 1e-6

    def test_none_mode(self):
        result = quant_loss(np.ones((2, 4)), "none", DsfParams())
        assert result.loss == 0.0

    def test_surrogate_gradient_wrt_v(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            v, t = informative_surrogate_case(rng)
            result = quant_loss(v, "dsf_surrogate", DsfParams(), t=t)
            fd = finite_difference(
                lambda vv: quant_loss(vv, "dsf_surrogate", DsfParams(), t=t).loss, v
            )
            assert relative_error(result.grad_v, fd) < 1e-4

    def test_surrogate_gradient_wrt_t(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            v, t = informative_surrogate_case(rng)
            result = quant_loss(v, "dsf_surrogate", DsfParams(), t=t)
            step = 1e-5
            fd = (
                quant_loss(v, "dsf_surrogate", DsfParams(), t=t + step).loss
                - quant_loss(v, "dsf_surrogate", DsfParams(), t=t - step).loss
            ) / (2 * step)
            assert relative_error(np.array(result.grad_t), np.array(fd)) < 1e-4

    def test_surrogate_collapses_to_hard_loss_at_small_tau(self):
        rng = np.random.default_rng(6)
        v, t = informative_surrogate_case(rng)
        sharp = DsfParams(temperature_tau=1e-7)
        soft = quant_loss(v, "dsf_surrogate", sharp, t=t).loss
        hard = quant_loss(v, "hard_sign", DsfParams(), t=t).loss
        assert soft == pytest.approx(hard, rel=1e-9)

    def test_per_sample_thresholds(self):
        rng = np.random.default_rng(7)
        v = rng.uniform(-1, 1, size=(3, 8))
        t = np.array([0.001, 0.002, 0.003])
        result = quant_loss(v, "dsf_surrogate", DsfParams(), t=t)
        assert np.asarray(result.grad_t).shape == (3,)


class TestCombinedObjective:
    def test_lambda_zero_is_metric_only(self):
        rng = np.random.default_rng(8)
        z = rng.standard_normal((4, 8))
        y = rng.integers(0, 5, size=4)
        config = LossConfig(quantization_mode="hard_sign", lam=0.0)
        report = combined_objective(z, y, CENTERS8, config, DsfParams())
        assert report.total == report.metric_loss

    def test_total_is_internally_consistent(self):
        rng = np.random.default_rng(9)
        z = rng.standard_normal((4, 8))
        y = rng.integers(0, 5, size=4)
        config = LossConfig(quantization_mode="hard_sign", lam=0.7)
        report = combined_objective(z, y, CENTERS8, config, DsfParams())
        assert abs(report.total - (report.metric_loss + 0.7 * report.quant_loss)) < 1e-12

    @pytest.mark.parametrize(
        "mode,lam", [("none", 0.0), ("hard_sign", 1.0), ("dsf_surrogate", 1.0)]
    )
    def test_feature_gradient_matches_fd(self, mode, lam):
        rng = np.random.default_rng(10)
        config = LossConfig(quantization_mode=mode, lam=lam)
        head = rng.standard_normal(8) * 0.2
        dsf = DsfParams(head_weights=head if mode == "dsf_surrogate" else None)
        checked = 0
        while checked < 15:
            z = rng.standard_normal((3, 8))
            y = rng.integers(0, 5, size=3)
            v = math.sqrt(8) * z / np.linalg.norm(z, axis=1, keepdims=True)
            # keep clear of the hard-sign and interval boundaries so central
            # differences see a smooth function
            if np.abs(v).min() < 0.05:
                continue
            report = combined_objective(z, y, CENTERS8, config, dsf)
            fd = finite_difference(
                lambda zz: combined_objective(zz, y, CENTERS8, config, dsf).total, z
            )
            assert relative_error(report.grad_features, fd) < 1e-4
            checked += 1

    def test_head_gradient_matches_fd_at_training_scale(self):
        # widen the threshold bound and temperature so the head -> threshold
        # -> loss chain is numerically resolvable by central differences
        rng = np.random.default_rng(11)
        config = LossConfig(quantization_mode="dsf_surrogate", lam=1.0)
        checked = 0
        while checked < 10:
            head = rng.standard_normal(8) * 0.5
            dsf = DsfParams(
                t_upper_bound=0.8, temperature_tau=0.05, head_weights=head
            )
            z = rng.standard_normal((3, 8))
            y = rng.integers(0, 5, size=3)
            report = combined_objective(z, y, CENTERS8, config, dsf)
            if np.abs(report.grad_dsf_head).max() < 1e-4:
                continue

            def loss_at(h):
                return combined_objective(
                    z, y, CENTERS8, config,
                    DsfParams(t_upper_bound=0.8, temperature_tau=0.05, head_weights=h),
                ).total

            fd = finite_difference(loss_at, head)
            assert relative_error(report.grad_dsf_head, fd) < 1e-4
            checked += 1

    def test_zero_feature_row_rejected(self):
        z = np.zeros((1, 8))
        with pytest.raises(ValidationError):
            combined_objective(z, np.array([0]), CENTERS8, LossConfig(), DsfParams())

    def test_deterministic(self):
        rng = np.random.default_rng(12)
        z = rng.standard_normal((4, 8))
        y = rng.integers(0, 5, size=4)
        config = LossConfig(quantization_mode="dsf_surrogate")
        dsf = DsfParams(head_weights=np.full(8, 0.1))
        a = combined_objective(z, y, CENTERS8, config, dsf)
        b = combined_objective(z, y, CENTERS8, config, dsf)
        assert a.total == b.total
        assert np.array_equal(a.grad_features, b.grad_features)


class TestHammingFromCosine:
    def test_identical(self):
        assert hamming_from_cosine(1.0, 16) == 0.0

    def test_antipodal(self):
        assert hamming_from_cosine(-1.0, 16) == 16.0

    def test_three_bit_example(self):
        # K=8, 3 differing bits: cos = (8 - 2*3)/8 = 0.25 -> distance 3
        a = np.array([1, 1, 1, 1, 1, 1, 1, 1], dtype=np.int8)
        b = np.array([-1, -1, -1, 1, 1, 1, 1, 1], dtype=np.int8)
        cos = float(a @ b) / 8
        assert hamming_from_cosine(cos, 8) == 3.0
        pa = BinaryCodeMatrix.from_signs(a[None, :])
        pb = BinaryCodeMatrix.from_signs(b[None, :])
        assert hamming(pa.row(0), pb.row(0)) == 3

    def test_exact_for_all_sign_pairs(self):
        rng = np.random.default_rng(13)
        for k in (16, 32, 64):
            signs = rng.integers(0, 2, size=(200, k)) * 2 - 1
            m = BinaryCodeMatrix.from_signs(signs)
            for i in range(0, 200, 2):
                cos = float(signs[i] @ signs[i + 1]) / k
                implied = hamming_from_cosine(cos, k)
                actual = hamming(m.row(i), m.row(i + 1))
                assert implied == actual  # zero tolerance

    def test_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            hamming_from_cosine(1.0001, 16)
