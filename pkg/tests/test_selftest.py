import inspect

import numpy as np
import pytest

import timedistill.selftest as selftest
from timedistill.selftest import (
    GRAD_TOLERANCE,
    check_causality,
    check_infonce_oracle,
    check_joint_gradient,
    check_ks_oracle,
    check_ridge_oracle,
    format_table,
    run_selftest,
    tiny_joint_problem,
)


def _default(check, name):
    return inspect.signature(check).parameters[name].default


class TestSampleCounts:
    @pytest.mark.parametrize("check,name,count", [
        (check_infonce_oracle, "seeds", 20),
        (check_ridge_oracle, "systems", 50),
        (check_causality, "positions", 50),
        (check_ks_oracle, "pairs", 20),
    ])
    def test_default_counts(self, check, name, count):
        assert _default(check, name) == count

    @pytest.mark.parametrize("check", [check_infonce_oracle, check_ridge_oracle, check_causality, check_ks_oracle])
    def test_passes_at_default_count(self, check):
        result = check()
        assert result.passed, result


class TestJointProblem:
    def test_loss_is_finite_and_deterministic(self):
        f, point = tiny_joint_problem()
        g, other = tiny_joint_problem()
        assert np.isfinite(f(point).item())
        assert f(point).item() == g(other).item()

    def test_joint_gradient(self):
        result = check_joint_gradient()
        assert result.passed
        assert result.value < GRAD_TOLERANCE


class TestRunSelftest:
    def test_subset(self):
        results = run_selftest(["ks", "ridge"])
        assert [r.name for r in results] == ["oracle ridge", "oracle K-S"]
        assert "OK" in format_table(results)

    def test_exception_becomes_failed_row(self, monkeypatch):
        def broken():
            raise RuntimeError("boom")

        monkeypatch.setattr(selftest, "CHECKS", [("broken", broken)])
        [result] = run_selftest()
        assert not result.passed
        assert "RuntimeError" in result.detail
