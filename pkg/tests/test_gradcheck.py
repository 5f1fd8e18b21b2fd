# tests/test_gradcheck.py

import numpy as np
from numpy.testing import assert_allclose

from src.gradcheck import GradCase, compare_gradients, default_cases, numerical_gradient, run_suite


def test_numerical_gradient_of_a_quadratic(highway_params):
    before = highway_params.copy()
    numeric = numerical_gradient(lambda p: sum(float(np.sum(a ** 2)) for a in p.arrays()), highway_params)
    for a, n in zip(highway_params.arrays(), numeric.arrays()):
        assert_allclose(n, 2 * a, rtol=0, atol=1e-8)
    assert highway_params.identical_to(before)


def test_compare_flags_the_broken_array(highway_params):
    broken = highway_params.copy()
    broken.transform_gate[0, 0] += 1e-3
    report = compare_gradients(highway_params, broken)
    assert list(report.loc[~report["passed"], "array"]) == ["W_T"]
    assert compare_gradients(highway_params, highway_params)["passed"].all()


def test_default_cases_cover_every_objective():
    objectives = {case.objective for case in default_cases()}
    assert objectives == {"ce", "kd", "hybrid", "smbr_ce", "smbr_kl"}
    assert GradCase("x", "kd", temperature=3.0) in [c._replace(name="x") for c in default_cases()]


def test_every_objective_passes_on_a_random_network():
    report = run_suite(7)
    failing = report.loc[~report["passed"]]
    assert failing.empty, failing.to_string()
    assert report["case"].nunique() == len(default_cases())
