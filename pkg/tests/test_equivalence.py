import numpy as np
import pytest

import equivalence
from controllers import solve_deepc, solve_spc
from estimation import fit_least_squares
from models import EquivalenceReport, IdentityReport


@pytest.mark.parametrize("suite", equivalence.SUITES)
def test_small_suites_pass(suite):
    reports = equivalence.run_suite(suite, 6, seed=1)
    assert [r.instance_id for r in reports] == list(range(6))
    assert equivalence.all_passed(reports), [r.detail for r in reports if r.verdict == "fail"]


@pytest.mark.slow
@pytest.mark.parametrize("suite", equivalence.SUITES)
def test_full_suites_pass(suite):
    reports = equivalence.run_suite(suite, 50, seed=0)
    assert equivalence.all_passed(reports)
    assert sum(r.verdict == "pass" for r in reports) >= 40


def test_random_instances_cover_every_data_regime():
    regimes = {equivalence.random_instance(0, i, regime=i % 3).descriptor["regime"] for i in range(3)}
    assert regimes == {0, 1, 2}
    for regime in range(3):
        inst = equivalence.random_instance(4, 10 + regime, regime)
        d = inst.descriptor
        n_phi = 2 * d["rho"] + d["T"]
        if regime == 0:
            assert d["N"] <= n_phi
        elif regime == 1:
            assert n_phi < d["N"] < n_phi + d["T"]
        else:
            assert d["N"] >= n_phi + d["T"]


def test_interpolating_data_reduces_deepc_to_spc(bundle_factory, problem_factory):
    bundle = bundle_factory(3, 5, 11, seed=13)
    problem = problem_factory(bundle, column=4)
    spc = solve_spc(problem, fit_least_squares(bundle))
    for regularizer in ("l2", "proj"):
        report = equivalence.check_theorem1(bundle, problem, 10.0, regularizer)
        assert report.verdict == "pass"
    deepc = solve_deepc(problem, bundle, "proj", 10.0)
    assert np.allclose(deepc.u, spc.u, atol=1e-6)


def test_gamma_check_skips_singular_covariances(bundle_factory, problem_factory):
    bundle = bundle_factory(3, 5, 13)
    report = equivalence.check_gamma_equivalence(bundle, problem_factory(bundle), 1.0, 1.0)
    assert report.verdict == "skipped"
    assert not report.assumption1


def test_corollary1_reports_weight_margin(noisy_model, noisy_bundle, problem_factory):
    report = equivalence.check_corollary1(noisy_model, problem_factory(noisy_bundle, column=5), 1.0, 10.0)
    assert report.verdict == "pass"
    assert "min eig" in report.detail


def test_pinv_norm_identity_holds_for_identity_matrix():
    x = np.array([1.0, -2.0, 0.5])
    assert equivalence.pinv_norm_gap(np.eye(3), x) == pytest.approx(0.0, abs=1e-15)


def test_pinv_norm_identity_on_range_vectors(rng):
    M = rng.standard_normal((5, 2)) @ rng.standard_normal((2, 7))
    x = M @ rng.standard_normal(7)
    assert equivalence.pinv_norm_gap(M, x) <= 1e-9
    assert equivalence.range_residual(M, x) <= 1e-12


def test_pinv_norm_identity_on_ill_conditioned_matrix(rng):
    U, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    V, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    M = U[:, :4] @ np.diag([1e4, 10.0, 1.0, 0.5]) @ V[:, :4].T
    x = M @ rng.standard_normal(5)
    assert equivalence.pinv_norm_gap(M, x) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_identities_suite_holds_across_seeds(seed):
    reports = equivalence.run_suite("identities", 20, seed=seed)
    assert all(r.pinv_norm_max_rel_error <= equivalence.PINV_NORM_TOL for r in reports)
    assert equivalence.all_passed(reports)


def test_negative_control_is_outside_the_range(noisy_bundle):
    report = equivalence.check_identities(noisy_bundle, seed=3)
    assert isinstance(report, IdentityReport)
    assert report.verdict == "pass"
    assert report.negative_control_range_residual == pytest.approx(1.0, abs=1e-9)
    assert report.lq_delta_rel_error <= equivalence.IDENTITY_TOL


def test_identities_skip_lq_on_short_data(bundle_factory):
    report = equivalence.check_identities(bundle_factory(3, 5, 12))
    assert report.verdict == "pass"
    assert report.lq_delta_rel_error is None


def test_suite_is_deterministic():
    first = equivalence.run_suite("theorem1_proj", 3, seed=9)
    second = equivalence.run_suite("theorem1_proj", 3, seed=9)
    assert [r.model_dump() for r in first] == [r.model_dump() for r in second]


def test_parallel_suite_matches_serial():
    serial = equivalence.run_suite("corollary1", 3, seed=2)
    parallel = equivalence.run_suite("corollary1", 3, seed=2, jobs=2)
    assert [r.model_dump() for r in serial] == [r.model_dump() for r in parallel]


def test_unknown_suite_is_rejected():
    with pytest.raises(ValueError):
        equivalence.run_suite("closed_loop", 1)


def test_reports_written_as_json_lines(tmp_path):
    reports = equivalence.run_suite("gamma1_invariance", 2, seed=5)
    path = equivalence.write_reports(reports, tmp_path / "reports.jsonl")
    assert len(path.read_text().splitlines()) == 2
    loaded = equivalence.read_reports(path)
    assert [EquivalenceReport(**d) for d in loaded] == reports


def test_all_passed_ignores_skipped():
    ok = EquivalenceReport.judge("gamma", 0.0, 0.0, None, 1e-5)
    skipped = EquivalenceReport.skipped("gamma", "singular", 1e-5)
    failed = EquivalenceReport.judge("gamma", 1.0, 0.0, None, 1e-5)
    assert equivalence.all_passed([ok, skipped])
    assert not equivalence.all_passed([ok, failed])
