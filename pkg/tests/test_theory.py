import itertools
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmmoe.errors import ParameterError
from pmmoe.theory import (
    TheoremParams,
    bound,
    exact_pmpe,
    monte_carlo_pmpe,
    verify_bound,
    write_report_csv,
)


def brute_force(M, p, alpha):
    """Sum over every correct/incorrect pattern of the M experts, in exact rationals."""
    p, alpha = Fraction(p), Fraction(alpha)
    total = Fraction(0)
    for pattern in itertools.product((0, 1), repeat=M):
        s = sum(pattern)
        prob = p**s * (1 - p) ** (M - s)
        total += prob * (1 + alpha) * s / (M + alpha * s)
    return total


def test_bound_examples():
    assert bound((2, 0.5, 1.0)) == pytest.approx(1 / 1.75, abs=1e-15)
    assert bound((7, 0.3, 0.0)) == 0.3
    for M, a in [(2, 0.1), (9, 3.0), (30, 100.0)]:
        assert bound((M, 1.0, a)) == 1.0


def test_exact_examples():
    assert exact_pmpe((2, 0.5, 1.0)) == pytest.approx(7 / 12, abs=1e-15)
    assert exact_pmpe((6, 1.0, 2.0)) == 1.0
    assert exact_pmpe((5, 1e-12, 1.0)) == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize(
    "M,p,alpha",
    [(2, "1/2", 1), (3, "1/3", 2), (5, "3/5", 1), (6, "7/10", "1/2"), (8, "9/10", 5), (10, "3/5", 2)],
)
def test_exact_matches_pattern_enumeration(M, p, alpha):
    oracle = brute_force(M, Fraction(p), Fraction(alpha))
    assert exact_pmpe((M, float(Fraction(p)), float(Fraction(alpha)))) == pytest.approx(float(oracle), abs=1e-13)


def test_exact_rejects_large_pool():
    with pytest.raises(ParameterError, match="monte_carlo"):
        exact_pmpe((31, 0.5, 1.0))


@pytest.mark.parametrize("args", [(1, 0.5, 1.0), (3, 0.0, 1.0), (3, 1.2, 1.0), (3, 0.5, -1.0)])
def test_invalid_params(args):
    with pytest.raises(ParameterError):
        TheoremParams(*args)


def test_monte_carlo_degenerate_and_deterministic():
    assert monte_carlo_pmpe((4, 1.0, 1.0), 1000, 3) == (1.0, 0.0)
    a = monte_carlo_pmpe((5, 0.6, 1.0), 250_001, 9)
    assert a == monte_carlo_pmpe((5, 0.6, 1.0), 250_001, 9)
    assert a != monte_carlo_pmpe((5, 0.6, 1.0), 250_001, 10)
    with pytest.raises(ParameterError):
        monte_carlo_pmpe((5, 0.6, 1.0), 0)


def test_monte_carlo_reference_point():
    est, se = monte_carlo_pmpe((2, 0.5, 1.0), 1_000_000, 0)
    assert abs(est - 7 / 12) <= 3 * se


def test_verify_bound_report_and_csv(tmp_path):
    rep = verify_bound([(2, 0.5, 1.0), (4, 0.7, 0.0)], trials=20_000, seed=1)
    assert rep.passed and rep.failures() == []
    first, edge = rep.checks
    assert first.exact == pytest.approx(0.583333, abs=1e-6)
    assert first.bound == pytest.approx(0.571429, abs=1e-6)
    assert edge.bound == 0.7 and edge.exact == pytest.approx(0.7, abs=1e-14)
    write_report_csv(tmp_path / "t.csv", rep)
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "M,p,alpha,bound,exact,mc_estimate,mc_se,pass"
    assert len(lines) == 3 and lines[1].endswith(",1")
    with pytest.raises(ParameterError):
        verify_bound([])


def test_verify_bound_names_failing_point():
    rep = verify_bound([(3, 0.5, 1.0)], trials=1000)
    rep.checks[0].bound = 0.99  # force a violation
    assert not rep.passed
    assert any("M=3, p=0.5, alpha=1.0" in f for f in rep.failures())


def test_bound_increases_with_alpha():
    values = [bound((10, 0.6, a)) for a in (0.5, 1.0, 2.0, 4.0)]
    assert all(b > a for a, b in zip(values, values[1:]))


params = st.builds(
    TheoremParams,
    M=st.integers(2, 30),
    p=st.floats(0.01, 0.99),
    alpha=st.floats(0.01, 50.0),
)


@settings(max_examples=200, deadline=None)
@given(params)
def test_exact_strictly_above_bound_above_p(t):
    b = bound(t)
    assert exact_pmpe(t) > b
    assert b > t.p


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 30), st.floats(0.001, 1.0))
def test_zero_advantage_gives_p(M, p):
    assert exact_pmpe((M, p, 0.0)) == pytest.approx(p, rel=1e-12)
    assert bound((M, p, 0.0)) == pytest.approx(p, rel=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 29), st.floats(0.01, 0.99), st.floats(0.01, 50.0))
def test_bound_increases_with_pool_size(M, p, alpha):
    assert bound((M + 1, p, alpha)) > bound((M, p, alpha))
