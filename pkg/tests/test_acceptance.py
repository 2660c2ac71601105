"""Acceptance criteria, each run at full size with its stated tolerance.

Every criterion prints one PASS/FAIL line (visible without ``-s``) and then
asserts. Wall time is measured around the whole call and counts against the
stated runtime budget.
"""

import time
from dataclasses import dataclass

import pytest

from dyadic_lab import crossval as cv


@dataclass(frozen=True)
class Criterion:
    number: int
    title: str
    budget: float  # seconds
    experiments: tuple


CRITERIA = [
    Criterion(1, "closed-form oracle values", 1.0, (cv.closed_form_oracles,)),
    Criterion(2, "Galerkin energy law", 30.0, (cv.energy_experiment,)),
    Criterion(3, "chain statistics vs closed forms", 60.0, (cv.ctmc_closed_forms,)),
    Criterion(4, "survival of the chain", 60.0, (cv.survival_experiment,)),
    Criterion(5, "moment representation triple agreement", 120.0, (cv.check_moment_representation,)),
    Criterion(6, "anomalous dissipation dichotomy", 30.0, (cv.dissipation_experiment,)),
    Criterion(7, "H^-1 monotonicity", 10.0, (cv.h_minus_one_monotonicity_suite,)),
    Criterion(8, "invariant convergence", 10.0, (cv.invariant_convergence,)),
    Criterion(9, "contraction under common noise", 60.0, (cv.contraction_check,)),
    Criterion(10, "regularity-bound behaviour", 1.0, (cv.regularity_experiment,)),
]


def _summary(metric):
    return f"{metric.label}: {metric.value:.6g} vs {metric.reference:.6g} ({metric.comparison}, tol {metric.tolerance:.3g})"


@pytest.mark.acceptance
@pytest.mark.parametrize("criterion", CRITERIA, ids=[f"AC{c.number}" for c in CRITERIA])
def test_acceptance(criterion, capsys):
    start = time.perf_counter()
    reports = [run() for run in criterion.experiments]
    elapsed = time.perf_counter() - start
    metrics = [m for r in reports for m in r.metrics]
    failures = [m for m in metrics if not m.passed]
    in_budget = elapsed < criterion.budget
    ok = bool(metrics) and not failures and in_budget
    line = (f"{'PASS' if ok else 'FAIL'} AC{criterion.number} {criterion.title}: "
            f"{len(metrics) - len(failures)}/{len(metrics)} checks, {elapsed:.1f} s (budget {criterion.budget:g} s)")
    if failures:
        line += f"; {len(failures)} failed, first: {_summary(failures[0])}"
    if not in_budget:
        line += "; over runtime budget"
    with capsys.disabled():
        print(f"\n{line}")
    detail = "\n".join(_summary(m) for m in failures)
    assert not failures, detail
    assert in_budget, f"{elapsed:.1f} s exceeds {criterion.budget:g} s"
