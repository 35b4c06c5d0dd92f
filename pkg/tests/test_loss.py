import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import logsumexp as np_logsumexp

from timedistill.errors import DimensionError, ParameterError, UsageError
from timedistill.loss import LossReport, count_pairs, joint_loss, make_report, sl_loss, ssl_loss
from timedistill.numeric import GradTape, ParamSet, Tensor, backward, finite_diff_check


def _bruteforce_ssl(h_t, h_s, temperature=1.0, same_branch=False):
    """Énumère toutes les paires, ancre par ancre, dans les deux sens."""
    B, L, _ = h_t.shape
    directions = []
    for anchor, other in ((h_t, h_s), (h_s, h_t)):
        losses = []
        for i in range(B):
            for t in range(L):
                a = anchor[i, t]
                terms = [a @ other[i, u] for u in range(L)]
                terms += [a @ other[j, t] for j in range(B) if j != i]
                if same_branch:
                    terms += [a @ anchor[i, u] for u in range(L) if u != t]
                    terms += [a @ anchor[j, t] for j in range(B) if j != i]
                terms = np.array(terms) / temperature
                losses.append(np_logsumexp(terms) - (a @ other[i, t]) / temperature)
        directions.append(np.mean(losses))
    return 0.5 * sum(directions)


def _grad(fn, h_t, h_s):
    t, s = Tensor(h_t), Tensor(h_s)
    tape = GradTape()
    tape.watch_tensor("h_t", t)
    tape.watch_tensor("h_s", s)
    with tape:
        loss = fn(t, s)
    return backward(tape, loss)


class TestSslLoss:
    @pytest.mark.parametrize("B", [1, 2, 3])
    @pytest.mark.parametrize("L", [2, 3, 4])
    @pytest.mark.parametrize("K", [2, 5])
    def test_matches_bruteforce(self, B, L, K):
        for seed in range(20):
            rng = np.random.default_rng([B, L, K, seed])
            h_t, h_s = rng.normal(size=(2, B, L, K))
            value = ssl_loss(Tensor(h_t), Tensor(h_s), temperature=0.7).item()
            assert abs(value - _bruteforce_ssl(h_t, h_s, 0.7)) < 1e-9, seed

    def test_instance_negatives_only(self, rng):
        h_t, h_s = rng.normal(size=(2, 3, 1, 4))
        assert abs(ssl_loss(Tensor(h_t), Tensor(h_s)).item() - _bruteforce_ssl(h_t, h_s)) < 1e-10

    def test_same_branch_negatives(self, rng):
        h_t, h_s = rng.normal(size=(2, 2, 3, 4))
        value = ssl_loss(Tensor(h_t), Tensor(h_s), same_branch_negatives=True).item()
        assert abs(value - _bruteforce_ssl(h_t, h_s, same_branch=True)) < 1e-10

    def test_orthogonal_pair(self):
        h = np.zeros((1, 2, 4))
        h[0, 0, 0] = 1.0
        h[0, 1, 1] = 1.0
        value = ssl_loss(Tensor(h), Tensor(h.copy())).item()
        assert_allclose(value, -np.log(np.e / (np.e + 1.0)), atol=1e-12)
        assert abs(value - 0.3133) < 1e-4

    def test_identical_representations(self):
        h = np.full((2, 3, 4), 0.25)
        _, n_negative = count_pairs(2, 3)
        per_anchor = n_negative // 6
        assert_allclose(ssl_loss(Tensor(h), Tensor(h)).item(), np.log(1 + per_anchor), atol=1e-12)

    def test_large_temperature_limit(self, rng):
        h_t, h_s = rng.normal(size=(2, 2, 3, 4))
        value = ssl_loss(Tensor(h_t), Tensor(h_s), temperature=1e6).item()
        assert abs(value - np.log(1 + 3)) < 1e-4

    def test_gradient(self, rng):
        point = ParamSet({"h_t": rng.normal(size=(2, 3, 4)), "h_s": rng.normal(size=(2, 3, 4))})
        assert finite_diff_check(lambda p: ssl_loss(p["h_t"], p["h_s"], 0.5), point) < 1e-5

    def test_no_negatives(self):
        with pytest.raises(UsageError):
            ssl_loss(Tensor(np.ones((1, 1, 3))), Tensor(np.ones((1, 1, 3))))

    def test_invalid_temperature(self):
        with pytest.raises(ParameterError):
            ssl_loss(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((2, 2, 3))), temperature=0.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ssl_loss(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((2, 3, 3))))

    def test_count_pairs(self):
        assert count_pairs(2, 3) == (6, 18)
        assert count_pairs(2, 3, same_branch_negatives=True) == (6, 36)


class TestSlLoss:
    def test_uniform_along_time(self):
        h = np.zeros((2, 5, 3))
        assert_allclose(sl_loss(Tensor(h), Tensor(h)).item(), np.log(5), atol=1e-12)

    def test_matches_naive_formula(self, rng):
        h_t, h_s = rng.normal(size=(2, 3, 6, 4))
        p_t = np.exp(h_t) / np.exp(h_t).sum(axis=1, keepdims=True)
        p_s = np.exp(h_s) / np.exp(h_s).sum(axis=1, keepdims=True)
        expected = -(p_t * np.log(p_s)).sum(axis=1).mean()
        assert abs(sl_loss(Tensor(h_t), Tensor(h_s)).item() - expected) < 1e-12

    def test_feature_axis(self, rng):
        h_t, h_s = rng.normal(size=(2, 3, 6, 4))
        p_t = np.exp(h_t) / np.exp(h_t).sum(axis=2, keepdims=True)
        p_s = np.exp(h_s) / np.exp(h_s).sum(axis=2, keepdims=True)
        expected = -(p_t * np.log(p_s)).sum(axis=2).mean()
        assert abs(sl_loss(Tensor(h_t), Tensor(h_s), axis="feature").item() - expected) < 1e-12

    def test_bounded_below_by_teacher_entropy(self, rng):
        h_t, h_s = rng.normal(size=(2, 3, 6, 4))
        p_t = np.exp(h_t) / np.exp(h_t).sum(axis=1, keepdims=True)
        entropy = -(p_t * np.log(p_t)).sum(axis=1).mean()
        assert sl_loss(Tensor(h_t), Tensor(h_s)).item() >= entropy
        assert_allclose(sl_loss(Tensor(h_t), Tensor(h_t)).item(), entropy, atol=1e-12)

    def test_teacher_side_is_constant(self, rng):
        h_t, h_s = rng.normal(size=(2, 2, 4, 3))
        grads = _grad(sl_loss, h_t, h_s)
        assert not np.any(grads["h_t"])
        assert np.any(grads["h_s"])

    def test_student_gradient(self, rng):
        h_t = Tensor(rng.normal(size=(2, 4, 3)))
        point = ParamSet({"h_s": rng.normal(size=(2, 4, 3))})
        assert finite_diff_check(lambda p: sl_loss(h_t, p["h_s"]), point) < 1e-5

    def test_degenerate_axis(self):
        with pytest.raises(UsageError):
            sl_loss(Tensor(np.ones((2, 1, 3))), Tensor(np.ones((2, 1, 3))))

    def test_unknown_axis(self):
        with pytest.raises(ParameterError):
            sl_loss(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((2, 3, 3))), axis="channel")


class TestJointLoss:
    def test_weighted_sum(self):
        assert joint_loss(Tensor(2.0), Tensor(4.0), 0.25).item() == 2.5

    @pytest.mark.parametrize("lam", [-0.1, 1.5])
    def test_lambda_range(self, lam):
        with pytest.raises(ParameterError):
            joint_loss(Tensor(1.0), Tensor(1.0), lam)

    @pytest.mark.parametrize("lam,component", [(0.0, "ssl"), (1.0, "sl")])
    def test_endpoints_reduce_to_one_term(self, rng, lam, component):
        h_t, h_s = rng.normal(size=(2, 2, 4, 3))
        joint = _grad(lambda t, s: joint_loss(ssl_loss(t, s), sl_loss(t, s), lam), h_t, h_s)
        single = _grad(ssl_loss if component == "ssl" else sl_loss, h_t, h_s)
        assert_allclose(joint["h_s"], single["h_s"], atol=1e-14)

    def test_report(self):
        report = make_report(Tensor(1.0), Tensor(2.0), Tensor(1.5), 0.5, (2, 3, 4))
        assert report == LossReport(ssl=1.0, sl=2.0, joint=1.5, lam=0.5, n_positive=6, n_negative=18)
        assert report.is_finite()
