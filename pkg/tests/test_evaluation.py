import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import CountingEmbedder
from expforce.errors import EmptyInput, InvalidArgument, InvalidK
from expforce.evaluation import (
    EvalReport,
    EvalSetup,
    MetricBlock,
    Outcome,
    classify_outcome,
    compute_metrics,
    config_fingerprint,
    emit_report,
    offline_lift_success,
    report_from_dict,
    report_to_dict,
    run_cross_validation,
    run_k_sweep,
    sweep_to_dict,
)
from expforce.gateway import Gateway
from expforce.oracle import generate_synthetic_pool
from expforce.pool import partition_folds
from expforce.predictors import BackendKind
from expforce.stubs import ForceEchoStub, LookupDescriptionStub, MockBandEmbeddingProvider


@pytest.fixture(scope="module")
def synth30(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth30")
    pool = generate_synthetic_pool(30, 21, root)
    return pool, root


def _knn_setup(root, concurrency=1):
    return EvalSetup(backend=BackendKind.KNN_AVERAGE,
                     gateway=Gateway(embedder=MockBandEmbeddingProvider()),
                     pool_root=root, concurrency=concurrency)


def _expforce_setup(pool, root, predictor_mode="mean", concurrency=1):
    gateway = Gateway(descriptor=LookupDescriptionStub.from_pool(pool, root),
                      predictor=ForceEchoStub(mode=predictor_mode),
                      embedder=MockBandEmbeddingProvider())
    return EvalSetup(backend=BackendKind.EXP_FORCE, gateway=gateway,
                     pool_root=root, concurrency=concurrency)


# --- metrics -------------------------------------------------------------------


def test_metrics_constant_error():
    block = compute_metrics([(1.0, 1.5), (2.0, 1.5)])
    assert abs(block.mae_n - 0.5) <= 1e-12
    assert abs(block.rmse_n - 0.5) <= 1e-12
    assert abs(block.std_n - 0.0) <= 1e-12
    assert block.n == 2


def test_metrics_perfect_prediction():
    block = compute_metrics([(1.0, 1.0)])
    assert (block.mae_n, block.rmse_n, block.std_n, block.n) == (0.0, 0.0, 0.0, 1)


def test_metrics_spread():
    block = compute_metrics([(1.0, 1.0), (5.0, 1.0)])
    assert abs(block.mae_n - 2.0) <= 1e-12
    assert abs(block.rmse_n - math.sqrt(8.0)) <= 1e-12
    assert abs(block.rmse_n - 2.8284271247461903) <= 1e-12
    assert abs(block.std_n - 2.0) <= 1e-12


def test_metrics_empty_input():
    with pytest.raises(EmptyInput):
        compute_metrics([])


def test_metric_block_rejects_rmse_below_mae():
    with pytest.raises(InvalidArgument):
        MetricBlock(mae_n=2.0, rmse_n=1.0, std_n=0.0, n=3)
    with pytest.raises(InvalidArgument):
        MetricBlock(mae_n=1.0, rmse_n=1.0, std_n=0.0, n=0)


@settings(max_examples=100, deadline=None)
@given(st.lists(
    st.tuples(st.floats(min_value=0.25, max_value=20.0),
              st.floats(min_value=0.25, max_value=20.0)),
    min_size=1, max_size=40))
def test_metrics_properties(pairs):
    block = compute_metrics(pairs)
    assert block.rmse_n >= block.mae_n - 1e-12
    errs = np.abs(np.asarray(pairs)[:, 0] - np.asarray(pairs)[:, 1])
    assert block.std_n == pytest.approx(float(np.std(errs)), abs=1e-12)
    assert block.n == len(pairs)


# --- outcome labels --------------------------------------------------------------


@pytest.mark.parametrize("f_hat,f_star,lifted,expected", [
    (1.0, 1.0, True, Outcome.APPROPRIATE),
    (3.0, 1.0, True, Outcome.APPROPRIATE),       # exactly 3x stays appropriate
    (3.0000001, 1.0, True, Outcome.OVERESTIMATE),
    (7.0, 1.0, True, Outcome.OVERESTIMATE),
    (7.0, 3.0, True, Outcome.APPROPRIATE),       # exactly +4 N stays appropriate
    (7.25, 3.0, True, Outcome.OVERESTIMATE),
    (10.0, 3.0, True, Outcome.OVERESTIMATE),
    (0.5, 1.0, False, Outcome.INSUFFICIENT),
    (19.0, 18.0, True, Outcome.APPROPRIATE),     # 3x bound inactive at high forces
])
def test_classify_outcome(f_hat, f_star, lifted, expected):
    assert classify_outcome(f_hat, f_star, lifted) == expected


def test_offline_lift_proxy():
    assert offline_lift_success(1.0, 1.0)
    assert offline_lift_success(1.25, 1.0)
    assert not offline_lift_success(0.75, 1.0)
    assert classify_outcome(0.75, 1.0, offline_lift_success(0.75, 1.0)) == Outcome.INSUFFICIENT


# --- cross-validation protocol ----------------------------------------------------


def test_cv_queries_every_record_once(synth30):
    pool, root = synth30
    report = run_cross_validation(pool, _knn_setup(root), k=3, n_folds=5, seed=0)
    assert len(report.queries) == 30
    assert sorted(r.query_id for r in report.queries) == sorted(pool.ids())
    assert [(r.fold, r.query_id) for r in report.queries] == sorted(
        (r.fold, r.query_id) for r in report.queries)

    folds = partition_folds(pool, 5, 0)
    for row in report.queries:
        query_ids, pool_ids = folds[row.fold]
        assert row.query_id in query_ids
        assert row.query_id not in pool_ids

    assert report.failures == 0
    assert sum(report.outcomes.values()) == 30
    assert sum(mb.n for mb in report.per_fold) == 30
    assert sum(mb.n for mb in report.per_category.values()) == 30
    assert len(report.config_fingerprint) == 64


def test_cv_ground_truth_comes_from_the_pool(synth30):
    pool, root = synth30
    report = run_cross_validation(pool, _knn_setup(root), k=3, n_folds=5, seed=0)
    for row in report.queries:
        assert row.f_star_n == pool.by_id(row.query_id).f_star_n
        assert row.category == pool.by_id(row.query_id).category
        assert row.outcome == classify_outcome(
            row.f_hat_n, row.f_star_n, offline_lift_success(row.f_hat_n, row.f_star_n))


def test_cv_is_deterministic_across_runs_and_concurrency(synth30):
    pool, root = synth30
    a = run_cross_validation(pool, _expforce_setup(pool, root), k=3, n_folds=5, seed=0)
    b = run_cross_validation(pool, _expforce_setup(pool, root), k=3, n_folds=5, seed=0)
    c = run_cross_validation(pool, _expforce_setup(pool, root, concurrency=4),
                             k=3, n_folds=5, seed=0)
    assert report_to_dict(a) == report_to_dict(b) == report_to_dict(c)
    assert a.config_fingerprint == c.config_fingerprint


def test_cv_seed_changes_fold_assignment(synth30):
    pool, root = synth30
    a = run_cross_validation(pool, _knn_setup(root), k=3, n_folds=5, seed=0)
    b = run_cross_validation(pool, _knn_setup(root), k=3, n_folds=5, seed=1)
    assert a.config_fingerprint != b.config_fingerprint
    assert [r.query_id for r in a.queries] != [r.query_id for r in b.queries]


def test_cv_zero_shot_needs_no_embedder(synth30):
    pool, root = synth30
    setup = EvalSetup(backend=BackendKind.ZERO_SHOT,
                      gateway=Gateway(predictor=ForceEchoStub(mode="fixed", default_n=1.0)),
                      pool_root=root)
    report = run_cross_validation(pool, setup, k=0, n_folds=5, seed=0)
    assert report.failures == 0
    assert all(r.f_hat_n == 1.0 for r in report.queries)


def test_cv_records_failures_instead_of_imputing(synth30):
    pool, root = synth30
    report = run_cross_validation(pool, _expforce_setup(pool, root, predictor_mode="text"),
                                  k=3, n_folds=5, seed=0)
    assert report.failures == 30
    assert report.overall is None
    assert sum(report.outcomes.values()) == 0
    for row in report.queries:
        assert row.f_hat_n is None and row.outcome is None
        assert row.error.startswith("Unparseable")


def test_cv_rejects_bad_k(synth30):
    pool, root = synth30
    with pytest.raises(InvalidK):
        run_cross_validation(pool, _knn_setup(root), k=0)
    with pytest.raises(InvalidK):
        run_cross_validation(pool, _knn_setup(root), k=-1)


def test_eval_setup_validation(synth30):
    pool, root = synth30
    with pytest.raises(InvalidArgument):
        EvalSetup(backend=BackendKind.KNN_AVERAGE, gateway=Gateway(), pool_root=root,
                  concurrency=0)


# --- k sweep ---------------------------------------------------------------------


def test_sweep_shares_embeddings_and_sorts_k(synth30):
    pool, root = synth30
    counter = CountingEmbedder(MockBandEmbeddingProvider())
    setup = EvalSetup(backend=BackendKind.KNN_AVERAGE, gateway=Gateway(embedder=counter),
                      pool_root=root)
    sweep = run_k_sweep(pool, setup, [5, 1, 3, 5], n_folds=5, seed=0)
    assert [p.k for p in sweep.points] == [1, 3, 5]
    assert counter.calls == len(pool)
    for point in sweep.points:
        assert point.overall.n == 30
        assert point.fold_mae_std >= 0.0


def test_sweep_points_match_individual_cv_runs(synth30):
    pool, root = synth30
    sweep = run_k_sweep(pool, _knn_setup(root), [1, 3], n_folds=5, seed=0)
    for point in sweep.points:
        single = run_cross_validation(pool, _knn_setup(root), k=point.k, n_folds=5, seed=0)
        assert point.overall == single.overall


def test_sweep_rejects_invalid_k(synth30):
    pool, root = synth30
    with pytest.raises(InvalidK):
        run_k_sweep(pool, _knn_setup(root), [0, 1])
    with pytest.raises(InvalidArgument):
        run_k_sweep(pool, _knn_setup(root), [])


# --- fingerprints ------------------------------------------------------------------


def test_fingerprint_sensitivity(synth30, tmp_path):
    pool, root = synth30
    setup = _knn_setup(root)
    base = config_fingerprint(root, setup, "3", 5, 0)
    assert base == config_fingerprint(root, setup, "3", 5, 0)
    assert base != config_fingerprint(root, setup, "5", 5, 0)
    assert base != config_fingerprint(root, setup, "3", 4, 0)
    assert base != config_fingerprint(root, setup, "3", 5, 1)

    other_root = tmp_path / "other"
    generate_synthetic_pool(30, 22, other_root)
    assert base != config_fingerprint(other_root, _knn_setup(other_root), "3", 5, 0)

    setup.concurrency = 8
    assert base == config_fingerprint(root, setup, "3", 5, 0)


# --- emission ----------------------------------------------------------------------


def test_emit_report_files_and_round_trip(synth30, tmp_path):
    pool, root = synth30
    report = run_cross_validation(pool, _knn_setup(root), k=3, n_folds=5, seed=0)

    first = emit_report(report, tmp_path / "a")
    assert [p.name for p in first] == ["report.json", "report.md"]
    emit_report(report, tmp_path / "b")
    assert (tmp_path / "a" / "report.json").read_bytes() == \
        (tmp_path / "b" / "report.json").read_bytes()
    assert (tmp_path / "a" / "report.md").read_bytes() == \
        (tmp_path / "b" / "report.md").read_bytes()

    loaded = report_from_dict(json.loads((tmp_path / "a" / "report.json").read_text()))
    assert isinstance(loaded, EvalReport)
    assert report_to_dict(loaded) == report_to_dict(report)
    emit_report(loaded, tmp_path / "c")
    assert (tmp_path / "c" / "report.md").read_bytes() == \
        (tmp_path / "a" / "report.md").read_bytes()


def test_markdown_report_shape(synth30, tmp_path):
    pool, root = synth30
    report = run_cross_validation(pool, _knn_setup(root), k=3, n_folds=5, seed=0)
    emit_report(report, tmp_path)
    text = (tmp_path / "report.md").read_text()
    assert "| Category | n | Appr. [%] | Overest. [%] | Insuff. [%] | MAE ± STD [N] | RMSE [N] |" in text
    assert "| Overall |" in text
    for cat in report.per_category:
        assert f"| {cat.value} |" in text


def test_emit_sweep_files(synth30, tmp_path):
    pool, root = synth30
    sweep = run_k_sweep(pool, _knn_setup(root), [1, 3], n_folds=5, seed=0)
    written = emit_report(sweep, tmp_path)
    assert [p.name for p in written] == ["sweep.json", "sweep.csv", "sweep.md"]

    csv_lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert csv_lines[0] == "k,mae_n,std_n"
    assert len(csv_lines) == 3
    k, mae, std = csv_lines[1].split(",")
    assert int(k) == 1
    assert float(mae) == sweep.points[0].overall.mae_n
    assert float(std) == sweep.points[0].fold_mae_std

    loaded = report_from_dict(json.loads((tmp_path / "sweep.json").read_text()))
    assert sweep_to_dict(loaded) == sweep_to_dict(sweep)


def test_report_counts_must_reconcile():
    with pytest.raises(InvalidArgument):
        EvalReport(backend=BackendKind.KNN_AVERAGE, k=1, n_folds=5, seed=0,
                   config_fingerprint="x", overall=None, per_fold=(None,) * 5,
                   per_category={}, outcomes={Outcome.APPROPRIATE: 2},
                   per_category_outcomes={}, failures=0, queries=())
