import numpy as np
import pytest

from src import conv_engine, verify


def _sign_flipped(original):
    def flipped(*args, **kwargs):
        return -original(*args, **kwargs)
    return flipped


class TestSeeds:
    def test_derive_seed_is_stable(self):
        assert verify.derive_seed(42, 3) == verify.derive_seed(42, 3)
        assert verify.derive_seed(42, 3) != verify.derive_seed(42, 4)
        assert verify.derive_seed(42, 3) != verify.derive_seed(43, 3)
        assert verify.derive_seed(0, 0) >= 0

    def test_random_case_is_reproducible(self):
        a, b = verify.random_case(123), verify.random_case(123)
        assert a.spec == b.spec
        assert a.D == b.D
        assert np.array_equal(a.F, b.F)
        assert np.array_equal(a.G, b.G)

    @pytest.mark.parametrize("case_seed", range(40))
    def test_case_grid_bounds(self, case_seed):
        case = verify.random_case(case_seed)
        n, cin, h, w = case.F.shape
        assert n in (1, 2)
        assert cin in (4, 8, 16) and case.spec.cout in (4, 8, 16)
        assert 7 <= h <= 14 and 7 <= w <= 14
        assert case.spec.stride in (1, 2) and case.spec.groups in (1, 2)
        assert case.D.pattern.rates in verify.CASE_PATTERNS


class TestHelpers:
    def test_finite_difference_of_quadratic(self):
        x = np.array([[1.0, -2.0], [0.5, 3.0]])
        grad = verify.finite_difference_grad(lambda v: float(np.sum(v ** 2)), x)
        assert np.allclose(grad, 2 * x, atol=1e-8)

    def test_relative_error(self):
        assert verify.relative_error(np.zeros(3), np.zeros(3)) == 0.0
        assert verify.relative_error(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == 1.0


class TestSuites:
    def test_small_check_passes(self, validate):
        report = verify.run_check(cases=6, seed=7, tol=1e-9)
        assert report.passed
        assert [s.name for s in report.suites] == ["equivalence", "degenerate", "adjoint", "finite_difference"]
        assert all(s.cases == 6 for s in report.suites)
        validate("check", report.to_dict())

    def test_degenerate_is_exact(self):
        suite = verify.run_degenerate(10, seed=3)
        assert suite.passed
        assert suite.max_error == 0.0

    def test_adjoint_both_sides(self):
        suite = verify.run_adjoint(5, seed=1)
        assert suite.passed
        assert set(suite.details) == {"input", "weight"}

    def test_finite_difference(self):
        suite = verify.run_finite_difference(3, seed=2)
        assert suite.passed
        assert suite.max_error <= verify.FD_TOL

    def test_zero_cases_rejected(self):
        with pytest.raises(ValueError):
            verify.run_check(cases=0, seed=0, tol=1e-9)

    def test_sign_flip_is_caught(self, monkeypatch):
        monkeypatch.setattr(conv_engine, "psconv_forward_masked",
                            _sign_flipped(conv_engine.psconv_forward_masked))
        suite = verify.run_equivalence(3, seed=5, tol=1e-9)
        assert not suite.passed
        assert suite.details["max_abs_diff_masked"] > 1e-3
        assert suite.failing_case_seed == verify.derive_seed(5, 0)

    def test_replay_reproduces_case(self, monkeypatch):
        monkeypatch.setattr(conv_engine, "psconv_forward_masked",
                            _sign_flipped(conv_engine.psconv_forward_masked))
        suite = verify.run_equivalence(1, seed=5, tol=1e-9)
        replayed = verify.replay(suite.failing_case_seed, tol=1e-9)
        assert not replayed.passed
        assert replayed.suites[0].max_error == suite.max_error

    @pytest.mark.slow
    def test_thousand_case_equivalence(self):
        suite = verify.run_equivalence(1000, seed=42, tol=1e-9)
        assert suite.passed
        assert suite.cases == 1000

    @pytest.mark.slow
    def test_full_gradient_suites(self):
        assert verify.run_degenerate(100, seed=42).passed
        assert verify.run_adjoint(200, seed=42).passed
        assert verify.run_finite_difference(50, seed=42).passed
