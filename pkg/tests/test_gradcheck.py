import numpy as np

from pta.gradcheck import relative_gradient_error, run_gradcheck


def test_relative_error_metric():
    a = np.array([1.0, 2.0])
    assert relative_gradient_error(a, a) == 0.0
    err = relative_gradient_error(a, np.array([1.0, 2.2]))
    np.testing.assert_allclose(err, 0.2 / 2.2)
    # tiny gradients fall back to an absolute comparison
    assert relative_gradient_error(np.array([1e-9]), np.array([0.0])) == 1e-9


def test_randomized_instances_pass_within_tolerance():
    report = run_gradcheck(n_instances=10, seed=0)
    assert report.passed
    assert report.max_relative_error <= 1e-5


def test_report_serializes():
    report = run_gradcheck(n_instances=2, seed=1)
    d = report.to_json_dict()
    assert d["instances"] == 2
    assert d["passed"] is True
