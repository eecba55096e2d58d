import math
from dataclasses import replace

import numpy as np
import pytest

from calibfair.data import PRESETS, Dataset, generate_synthetic, split
from calibfair.metrics import f1, qece
from calibfair.model import init_mlp, predict
from calibfair.pipeline import (DEFAULT_SEEDS, METHODS, ConfigError, TrainConfig, TrainingError, cli_name,
                                evaluate_model, method_from_name, stage1_identify, stratified_batches, sweep,
                                train_erm, train_method)


def blobs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.standard_normal((n, 2)) * 0.3 + np.where(y[:, None] == 1, 2.0, -2.0)
    attrs = {"a": (np.arange(n) // 2) % 2, "b": (np.arange(n) // 4) % 3}
    return Dataset(x, y, 2, attrs)


SMALL = TrainConfig(stage1_epochs=3, stage2_epochs=5, hidden_dims=(8,), num_folds=2)


@pytest.fixture(scope="module")
def bench():
    ds = generate_synthetic(PRESETS["biased-binary"], seed=0)
    return ds, split(ds, (0.8, 0.1, 0.1), seed=0)


def small_bench(n=600):
    ds = generate_synthetic(replace(PRESETS["biased-binary"], n_samples=n, n_features=6), seed=1)
    return ds, split(ds, (0.8, 0.1, 0.1), seed=1)


def test_method_names_roundtrip():
    for m in METHODS:
        assert method_from_name(cli_name(m)) == m
        assert method_from_name(m) == m
    assert method_from_name("cluster_focal") == "ClusterFocal"
    with pytest.raises(ConfigError):
        method_from_name("eiil")


def test_config_validation():
    with pytest.raises(ConfigError, match="oracle"):
        TrainConfig(method="OracleFocal").validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(jtt_lambda=0.5).validate()
    with pytest.raises(ConfigError, match="not in dataset"):
        TrainConfig(method="OracleFocal", oracle_attribute="zip").validate(blobs())


def test_erm_separates_blobs():
    ds = blobs()
    art = train_erm(TrainConfig(method="ERM"), ds, np.arange(ds.n_samples))
    acc = np.mean([r.correct for r in predict(art.f_pred, ds, np.arange(ds.n_samples))])
    assert acc >= 0.99
    assert len(art.epoch_losses) == 60


def test_erm_zero_epochs_is_init():
    ds = blobs()
    cfg = TrainConfig(method="ERM", hidden_dims=(4,), seed=3)
    art = train_erm(cfg, ds, np.arange(20), epochs=0)
    assert art.f_pred == init_mlp(cfg.layer_dims(ds), [3, 2, 0])
    assert art.epoch_losses == []


def test_erm_deterministic():
    ds = blobs()
    a = train_erm(SMALL, ds, np.arange(100))
    b = train_erm(SMALL, ds, np.arange(100))
    assert a.f_pred == b.f_pred and a.batch_losses == b.batch_losses
    assert not train_erm(replace(SMALL, seed=1), ds, np.arange(100)).f_pred == a.f_pred


def test_divergence_names_epoch():
    ds = blobs()
    with pytest.raises(TrainingError, match=r"in epoch \d+"):
        train_erm(replace(SMALL, lr=1e300), ds, np.arange(50))


def test_stratified_batches_cover_every_group():
    rng = np.random.default_rng(0)
    groups = np.array([0] * 90 + [1] * 8 + [3] * 2)
    batches = stratified_batches(groups, 32, 4, rng)
    assert len(batches) == 4
    for b in batches:
        assert set(groups[b]) == {0, 1, 3}
        assert b.size == 3 * math.ceil(32 / 3)
        # large group drawn without repeats inside a batch
        big = b[groups[b] == 0]
        assert np.unique(big).size == big.size


def test_stratified_single_group_is_a_permutation():
    batches = stratified_batches(np.zeros(10, dtype=int), 5, 2, np.random.default_rng(0))
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))


def test_stage1_separable_data_gives_small_gaps():
    ds = blobs()
    cfg = replace(SMALL, stage1_epochs=60, gap_mode="in_sample", hidden_dims=(16,))
    _, gaps, assignment = stage1_identify(cfg, ds, np.arange(ds.n_samples))
    assert assignment.requested_k == 4
    # every sample is classified correctly, so each gap is 1 - confidence < 0.5
    assert np.all(gaps < 0.5)
    assert assignment.centers[0] < 0.01


def test_stage1_all_zero_gaps_reduce_k(monkeypatch):
    from calibfair import pipeline
    monkeypatch.setattr(pipeline, "compute_gaps", lambda recs: np.zeros(len(recs)))
    ds = blobs()
    _, gaps, a = stage1_identify(SMALL, ds, np.arange(100))
    assert np.all(gaps == 0) and a.k == 1


def test_stage1_rejects_tiny_train_set():
    ds = blobs()
    with pytest.raises(ConfigError, match="in_sample"):
        stage1_identify(replace(SMALL, num_folds=5), ds, np.arange(15))


def test_stage1_gaps_on_benchmark(bench):
    ds, sp = bench
    cfg = TrainConfig()
    _, oof, a = stage1_identify(cfg, ds, sp.train)
    means = a.report(oof)["mean_gap"]
    assert means[-1] > oof.mean()
    _, ins, _ = stage1_identify(replace(cfg, gap_mode="in_sample"), ds, sp.train)
    assert ins.mean() <= oof.mean()


def test_cluster_focal_single_cluster_equals_focal():
    ds, sp = small_bench()
    cfg = replace(SMALL, num_clusters=1, gap_mode="in_sample")
    cf = train_method(replace(cfg, method="ClusterFocal"), ds, sp)
    fo = train_method(replace(cfg, method="Focal"), ds, sp)
    assert cf.clusters.k == 1
    np.testing.assert_allclose(cf.batch_losses, fo.batch_losses, rtol=0, atol=1e-9)


def test_jtt_unit_lambda_equals_erm():
    ds, sp = small_bench()
    jtt = train_method(replace(SMALL, method="JTT", jtt_lambda=1.0), ds, sp)
    erm = train_method(replace(SMALL, method="ERM"), ds, sp)
    assert jtt.jtt_marked is not None
    np.testing.assert_allclose(jtt.batch_losses, erm.batch_losses, rtol=0, atol=1e-9)


def test_jtt_marks_misclassified():
    ds, sp = small_bench()
    art = train_method(replace(SMALL, method="JTT"), ds, sp)
    recs = predict(art.f_id, ds, sp.train)
    expected = np.asarray(sp.train)[[not r.correct for r in recs]]
    np.testing.assert_array_equal(art.jtt_marked, expected)


@pytest.mark.parametrize("method", ["ClusterERM", "ClusterGroupDRO", "OracleFocal"])
def test_other_methods_run(method):
    ds, sp = small_bench()
    art = train_method(replace(SMALL, method=method, oracle_attribute="age"), ds, sp)
    assert art.f_pred.is_finite() and len(art.epoch_losses) == SMALL.stage2_epochs
    if method.startswith("Cluster"):
        assert art.clusters.ids.size == len(sp.train)
    else:
        # oracle attribute plus validation data enables epoch selection
        assert 1 <= art.selected_epoch <= SMALL.stage2_epochs


def test_oracle_groupdro_upweights_worse_group(bench):
    ds, sp = bench
    cfg = TrainConfig(method="OracleGroupDRO", oracle_attribute="age", stage2_epochs=20)
    art = train_method(cfg, ds, sp)
    q = art.group_weights[-1]
    assert abs(q.sum() - 1) < 1e-9
    idx = np.asarray(sp.train)
    recs = predict(art.f_pred, ds, idx)
    p_true = np.array([r.probs[r.label] for r in recs])
    g = ds.attributes["age"][idx]
    group_loss = [np.mean(-np.log(p_true[g == k])) for k in range(2)]
    assert int(np.argmax(q)) == int(np.argmax(group_loss))


def test_cluster_focal_loss_trace_settles(bench):
    ds, sp = bench
    art = train_method(TrainConfig(), ds, sp)
    tail = art.epoch_losses[len(art.epoch_losses) // 5:]
    best = tail[0]
    for v in tail[1:]:
        assert v <= 1.05 * best
        best = min(best, v)


def test_evaluate_model_matches_direct_metrics():
    ds, sp = small_bench()
    art = train_method(replace(SMALL, method="ERM"), ds, sp)
    reports = evaluate_model(art, ds, sp.test, ["age", "sex"], 5)
    assert reports[0].overall == reports[1].overall
    recs = predict(art.f_pred, ds, sp.test)
    g = ds.attributes["age"][sp.test]
    for gm in reports[0].groups:
        sub = [r for r, k in zip(recs, g) if k == gm.group]
        assert gm.performance == f1(sub, 1)
        assert gm.qece == qece(sub, 5)


def test_evaluate_model_single_group_present():
    ds = blobs()
    art = train_erm(SMALL, ds, np.arange(100))
    test = np.flatnonzero(ds.attributes["a"] == 1)
    (rep,) = evaluate_model(art, ds, test, ["a"], 10)
    assert [g.group for g in rep.groups] == [1]
    assert rep.worst_qece[1] == rep.overall.qece
    with pytest.raises(ValueError):
        evaluate_model(art, ds, [], ["a"])


def test_sweep_single_run_matches_report():
    ds, sp = small_bench()
    table, runs = sweep(SMALL, ["erm"], [0], ds, sp, ["age", "sex"])
    rep = runs[0].reports[0]
    row = table.row("ERM", "age")
    assert row.worst_qece_mean == rep.worst_qece[1]
    assert row.worst_perf_mean == rep.worst_performance[1]
    assert row.worst_qece_std == 0.0 and row.n_runs == 1


def test_sweep_std_uses_sample_denominator():
    ds, sp = small_bench()
    table, runs = sweep(replace(SMALL, stage2_epochs=2), ["erm"], DEFAULT_SEEDS, ds, sp, ["age"])
    vals = np.array([r.reports[0].worst_qece[1] for r in runs])
    row = table.row("ERM", "age")
    assert row.n_runs == 5
    assert row.worst_qece_std == pytest.approx(math.sqrt(np.sum((vals - vals.mean()) ** 2) / 4), abs=1e-15)


def test_sweep_parallel_matches_serial():
    ds, sp = small_bench(300)
    cfg = replace(SMALL, stage2_epochs=2)
    serial, _ = sweep(cfg, ["erm", "focal"], [0, 1], ds, sp, ["age"], workers=1)
    parallel, _ = sweep(cfg, ["erm", "focal"], [0, 1], ds, sp, ["age"], workers=2)
    assert serial.to_csv() == parallel.to_csv()


def test_sweep_error_names_run():
    ds, sp = small_bench(300)
    with pytest.raises(TrainingError, match="ERM seed 3"):
        sweep(replace(SMALL, lr=1e300), ["erm"], [3], ds, sp, ["age"])
    with pytest.raises(ConfigError):
        sweep(SMALL, [], [0], ds, sp, ["age"])


def test_tradeoff_csv_shape():
    ds, sp = small_bench(300)
    table, _ = sweep(replace(SMALL, stage2_epochs=1), ["erm", "focal"], [0], ds, sp, ["age", "sex"])
    lines = table.to_csv().splitlines()
    assert lines[0].startswith("method,attribute,n_runs")
    assert len(lines) == 5
