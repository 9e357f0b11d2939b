"""Acceptance criteria at their stated sizes and tolerances.

Each test runs one registered check and prints a single PASS/FAIL line; the
check itself carries the statistic, the threshold and the wall-clock limit.
"""

import pytest

from samle.validation import CHECKS


@pytest.fixture
def run(record_property):
    def _run(name):
        res = CHECKS[name]()
        print(f"\nACCEPTANCE {res.line()}")
        record_property("acceptance", res.line())
        assert res.passed, res.line()
    return _run


def test_criterion_01_zero_variance_for_brownian_drift(run):
    run("zero_variance")


@pytest.mark.slow
def test_criterion_02_unbiased_against_euler_density(run):
    run("unbiasedness")


@pytest.mark.slow
def test_criterion_03_exact_and_approximate_acceptance_agree(run):
    run("ea_am")


@pytest.mark.slow
def test_criterion_04_coupled_bridge_matches_conditioned_oracle(run):
    run("coupling")


def test_criterion_05_minimum_split_identity(run):
    run("identity")


@pytest.mark.slow
def test_criterion_06_estimates_settle_as_N_grows(run):
    run("table1")


@pytest.mark.slow
def test_criterion_07_scaled_bias_shrinks_with_N(run):
    run("table2")


def test_criterion_08_poisson_load_at_reference_parameters(run):
    run("poisson_load")


@pytest.mark.slow
def test_criterion_09_sqrt_n_rule_versus_fixed_N(run):
    run("nscaling")


@pytest.mark.slow
def test_criterion_10_euler_oracle_refinement(run):
    run("oracle_refinement")
