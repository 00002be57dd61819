import csv
import json

import numpy as np
import pytest

from gcr import experiment as X


def write_eval(path, steps, rates):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "success_rate", "mean_length"])
        for s, r in zip(steps, rates):
            w.writerow([s, r, 10.0])
    return str(path)


def write_metrics(path, returns):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "episode", "sparse_return", "shaped_return", "epsilon", "td_loss"])
        step = 0
        for e, r in enumerate(returns):
            step += 10
            w.writerow([step, e, r, 0.0, 0.1, 0.0])
    return str(path)


def test_single_run_normalizes_to_one(tmp_path):
    c = X.read_curve(write_metrics(tmp_path / "gcr" / "m.csv", [0, 1, 0, 1, 1]))
    assert c.method == "gcr" and c.total == 3.0
    np.testing.assert_array_equal(c.values, [0, 1, 1, 2, 3])
    agg = X.aggregate([c])
    assert agg.bars["gcr"] == (1.0, 0.0, 1)


def test_identical_runs_have_zero_std(tmp_path):
    curves = [X.read_curve(write_eval(tmp_path / f"r{i}.csv", [0, 5, 10], [0.0, 0.5, 1.0]), "m") for i in range(3)]
    agg = X.aggregate(curves)
    mean, std, n = agg.curves["m"]
    np.testing.assert_array_equal(std, 0.0)
    np.testing.assert_array_equal(mean, [0.0, 0.5, 1.0])
    assert n == 3 and agg.bars["m"] == (1.0, 0.0, 3) and not agg.resampled


def test_hand_computed_means_and_bars(tmp_path):
    a1 = X.read_curve(write_eval(tmp_path / "a1.csv", [0, 10], [0.0, 1.0]), "a")  # area 5
    a2 = X.read_curve(write_eval(tmp_path / "a2.csv", [0, 10], [0.0, 0.5]), "a")  # area 2.5
    b1 = X.read_curve(write_eval(tmp_path / "b1.csv", [0, 10], [1.0, 1.0]), "b")  # area 10
    agg = X.aggregate([a1, a2, b1])
    assert agg.divisor == 10.0
    np.testing.assert_allclose(agg.curves["a"][0], [0.0, 0.75])
    np.testing.assert_allclose(agg.curves["a"][1], [0.0, 0.25])
    assert agg.bars["a"][:2] == pytest.approx((0.375, 0.125))
    assert agg.bars["b"] == (1.0, 0.0, 1)


def test_mismatched_grids_are_resampled_with_note(tmp_path):
    a = X.read_curve(write_eval(tmp_path / "a.csv", [0, 10, 20], [0.0, 0.5, 1.0]), "a")
    b = X.read_curve(write_eval(tmp_path / "b.csv", [0, 5, 10, 15], [0.0, 0.0, 0.0, 0.0]), "b")
    agg = X.aggregate([a, b])
    assert agg.resampled and agg.notes
    assert agg.grid[0] == 0.0 and agg.grid[-1] == 15.0 and len(agg.grid) == 4
    np.testing.assert_allclose(agg.curves["a"][0], agg.grid / 20.0)


def test_disjoint_grids_rejected(tmp_path):
    a = X.read_curve(write_eval(tmp_path / "a.csv", [0, 10], [0, 1]), "a")
    b = X.read_curve(write_eval(tmp_path / "b.csv", [20, 30], [0, 1]), "b")
    with pytest.raises(ValueError):
        X.aggregate([a, b])


def test_write_aggregate_files(tmp_path):
    c = X.read_curve(write_eval(tmp_path / "m" / "e.csv", [0, 10], [0.2, 0.4]))
    paths = X.write_aggregate(X.aggregate([c]), tmp_path / "out")
    with open(paths["curves.csv"]) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "m_mean", "m_std"] and float(rows[2][1]) == 0.4
    assert json.loads(open(paths["aggregate.json"]).read())["bars"]["m"]["mean"] == 1.0
    assert "curves.csv" in open(paths["plot.gp"]).read()


def test_success_auc_and_first_reaching():
    assert X.success_auc([0, 10, 20], [0.0, 1.0, 1.0]) == pytest.approx(0.75)
    assert X.first_reaching([(5, 0.1, 1), (10, 0.9, 1), (15, 1.0, 1)], 0.8) == 10
    assert X.first_reaching([(5, 0.1, 1)], 0.8) is None


def test_experiment_survives_crashed_seed(tiny, tmp_path, monkeypatch):
    real = X.run_synchronous

    def flaky(cfg, seed, **kw):
        if seed == 1:
            raise RuntimeError("injected failure")
        return real(cfg, seed, **kw)

    monkeypatch.setattr(X, "run_synchronous", flaky)
    summary = X.run_experiment(tiny(seeds=[0, 1, 2], steps=200, eval_every=100), str(tmp_path))
    assert [s.status for s in summary.seeds] == ["ok", "crashed", "ok"]
    data = json.loads((tmp_path / "summary.json").read_text())
    assert data["n_crashed"] == 1 and "injected failure" in data["seeds"][1]["error"]
    assert (tmp_path / "metrics_seed2.csv").exists() and (tmp_path / "policy_seed0.gcrt").exists()
    assert (tmp_path / "config.json").exists()


def test_experiment_outputs_are_deterministic(tiny, tmp_path):
    cfg = tiny(steps=300, eval_every=150)
    X.run_experiment(cfg, str(tmp_path / "a"))
    X.run_experiment(cfg, str(tmp_path / "b"))
    for name in ("metrics_seed0.csv", "eval_seed0.csv", "policy_seed0.gcrt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
