import numpy as np
import pytest
from pydantic import ValidationError

from utils.gradcheck import GradientReport, central_difference, run_gradcheck
from utils.models import GradcheckConfig


class TestCentralDifference:
    def test_quadratic_is_exact(self):
        A = np.array([[3.0, 1.0], [1.0, 2.0]])
        x0 = np.array([0.5, -1.5])
        grad = central_difference(lambda x: float(x @ A @ x), x0, step=1e-3)
        np.testing.assert_allclose(grad, 2 * A @ x0, rtol=1e-9)

    def test_input_is_not_modified(self):
        x0 = np.array([1.0, 2.0, 3.0])
        central_difference(lambda x: float(np.sum(x ** 2)), x0, step=1e-4)
        np.testing.assert_array_equal(x0, [1.0, 2.0, 3.0])


class TestRunGradcheck:
    def test_all_losses_pass(self):
        reports = run_gradcheck()
        assert [r.loss_name for r in reports] == ["rag", "kl", "ce"]
        for report in reports:
            assert report.passed, report.summary()
            assert report.analytic.size == 2 * 8 * 8

    def test_larger_dimension(self):
        [report] = run_gradcheck(GradcheckConfig(dim=16, seed=3), losses=("kl",))
        assert report.passed

    def test_corrupted_gradient_is_caught(self):
        for report in run_gradcheck(corruption=1.0):
            assert not report.passed
            assert report.worst_index == 0

    def test_same_seed_same_report(self):
        first = run_gradcheck(losses=("rag",))[0]
        second = run_gradcheck(losses=("rag",))[0]
        np.testing.assert_array_equal(first.analytic, second.analytic)
        assert first.loss == second.loss


class TestGradientReport:
    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            GradientReport(
                loss_name="kl", loss=0.0, analytic=np.zeros(3), numeric=np.zeros(4),
                max_abs_diff=0.0, max_rel_diff=0.0, worst_index=0, threshold=1e-4)

    def test_summary_reports_worst_coordinate(self):
        report = GradientReport(
            loss_name="ce", loss=1.0, analytic=np.array([0.1, 0.5]), numeric=np.array([0.1, 0.4]),
            max_abs_diff=0.1, max_rel_diff=0.2, worst_index=1, threshold=1e-4)
        summary = report.summary()
        assert summary["analytic_at_worst"] == 0.5
        assert summary["numeric_at_worst"] == 0.4
        assert summary["passed"] is False
