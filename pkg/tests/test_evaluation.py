import csv

import numpy as np
import pytest

from ssgp.data import prepare_input, synth_scene
from ssgp.evaluation import (boundary_band, config_hash, evaluate, evaluate_predictions,
                             fingerprint, metric_boundary, metric_epe, metric_koe, metric_mae,
                             metric_orr, metric_rmse, nearest_fill, predict, sweep_density,
                             sweep_noise, write_sweep_csv)
from ssgp.network import build_model, toy_config
from ssgp.sparse import MaskedFeature
from ssgp.tensor import Tensor

from oracles import epe_loop, koe_loop, mae_rmse_loop


def vec(u, v):
    return np.array([u, v], dtype=float).reshape(2, 1, 1)


ONE = np.ones((1, 1, 1))


def test_metrics_match_oracles():
    r = np.random.default_rng(0)
    for _ in range(5):
        pred, gt = r.standard_normal((2, 7, 6)) * 5, r.standard_normal((2, 7, 6)) * 5
        mask = (r.random((1, 7, 6)) < 0.7).astype(float)
        assert metric_epe(pred, gt, mask) == pytest.approx(epe_loop(pred, gt, mask), rel=1e-12)
        mae, rmse = mae_rmse_loop(pred, gt, mask)
        assert metric_mae(pred, gt, mask) == pytest.approx(mae, rel=1e-12)
        assert metric_rmse(pred, gt, mask) == pytest.approx(rmse, rel=1e-12)
        assert metric_koe(pred, gt, mask) == pytest.approx(koe_loop(pred, gt, mask), rel=1e-12)


def test_epe_three_four_five_and_empty_mask():
    assert metric_epe(vec(0, 0), vec(3, 4), ONE) == 5.0
    with pytest.raises(ValueError):
        metric_epe(vec(0, 0), vec(3, 4), np.zeros((1, 1, 1)))


def test_koe_and_rule():
    # 4 px error on a 10 px vector (40%): outlier
    assert metric_koe(vec(6, 0), vec(10, 0), ONE) == 100.0
    # 4 px error on a 100 px vector (4%): inlier
    assert metric_koe(vec(96, 0), vec(100, 0), ONE) == 0.0
    # 2 px error on a 1 px vector: large ratio but under 3 px
    assert metric_koe(vec(3, 0), vec(1, 0), ONE) == 0.0
    gt = np.concatenate([vec(10, 0), vec(100, 0)], axis=2)
    pred = np.concatenate([vec(6, 0), vec(96, 0)], axis=2)
    assert metric_koe(pred, gt, np.ones((1, 1, 2))) == 50.0


def test_koe_channel_groups():
    gt = np.zeros((4, 1, 1))
    pred = np.array([0.0, 0.0, 10.0, 0.0]).reshape(4, 1, 1)
    assert metric_koe(pred, gt, ONE, [0]) == 0.0
    assert metric_koe(pred, gt, ONE, [2, 3]) == 100.0


def orr_fixture():
    """8x8 flow field: gt (10, 0) everywhere, 4 input samples of which some are outliers."""
    gt = np.zeros((2, 8, 8))
    gt[0] = 10.0
    mask = np.zeros((1, 8, 8))
    pts = [(1, 1), (2, 5), (5, 2), (6, 6)]
    for p in pts:
        mask[0, p[0], p[1]] = 1
    return gt, mask, pts


def test_orr_hand_fixtures():
    gt, mask, pts = orr_fixture()
    inp = gt * mask
    for p in pts:
        inp[0, p[0], p[1]] = 30.0  # every input sample is 20 px off
    sparse = MaskedFeature(Tensor(inp), Tensor(mask))
    assert metric_orr(sparse, gt, gt, np.ones((1, 8, 8))).value == 100.0
    r = metric_orr(sparse, inp, gt, np.ones((1, 8, 8)))
    assert (r.value, r.outliers, r.corrected, r.vacuous) == (0.0, 4, 0, False)
    pred = gt.copy()
    pred[0, 6, 6] = 30.0  # three of four corrected
    assert metric_orr(sparse, pred, gt, np.ones((1, 8, 8))).value == 75.0
    clean = MaskedFeature(Tensor(gt * mask), Tensor(mask))
    r = metric_orr(clean, pred, gt, np.ones((1, 8, 8)))
    assert r.vacuous and r.value == 100.0


def test_boundary_band():
    band = boundary_band(64, 64, 10)
    assert band.sum() == 2160
    assert band[0, 32] and not band[10, 10] and band[9, 10]
    pred = np.zeros((1, 64, 64))
    pred[0, 0, :] = 2.0
    mae, rmse = metric_boundary(pred, np.zeros((1, 64, 64)), np.ones((1, 64, 64)))
    assert mae == pytest.approx(128 / 2160)
    assert rmse == pytest.approx(np.sqrt(256 / 2160))
    with pytest.raises(ValueError):
        boundary_band(20, 64, 10)


def test_nearest_fill():
    s = prepare_input(synth_scene(0, 32, 32), 0.05, seed=0)
    fill = nearest_fill(s)
    valid = s.sparse_mask[0] > 0
    np.testing.assert_array_equal(fill[:, valid], s.sparse_values[:, valid])
    assert np.all(np.isin(fill, s.sparse_values[:, valid]))


@pytest.fixture(scope="module")
def model_and_samples():
    model = build_model(toy_config(), seed=0)
    samples = [prepare_input(synth_scene(i, 48, 48), 0.1, noise_scale=1.0, seed=i) for i in range(3)]
    return model, samples


def test_report_and_csv(tmp_path, model_and_samples):
    model, samples = model_and_samples
    before = fingerprint(model)
    report = evaluate(model, samples, config_hash("a = 1\n"), margin=10, error_dir=tmp_path / "err")
    assert fingerprint(model) == before
    assert report.samples == 3 and report.config_hash == config_hash("a = 1\n")
    assert len(report.config_hash) == 16
    assert report["rmse"] >= report["mae"]
    assert report["boundary_rmse"] >= report["boundary_mae"]
    assert len(list((tmp_path / "err").glob("*.error.pgm"))) == 3
    report.write_csv(tmp_path / "m.csv")
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["metric", "value", "unit", "samples", "config_hash"]
    assert {r[0] for r in rows[1:]} >= {"epe", "koe", "mae", "rmse", "orr"}
    # predictions average per sample
    preds = [predict(model, s) for s in samples]
    manual = np.mean([metric_epe(p, s.gt_values, s.gt_mask) for p, s in zip(preds, samples)])
    assert evaluate_predictions(preds, samples)["epe"] == pytest.approx(manual)


def test_scene_flow_report_has_groups():
    s = prepare_input(synth_scene(0, 32, 32, "scene_flow"), 0.2, seed=0)
    report = evaluate_predictions([nearest_fill(s)], [s], margin=10)
    assert {"koe_d0", "koe_d1", "koe_of", "koe_sf"} <= set(report.values)
    depth = prepare_input(synth_scene(0, 32, 32, "depth"), 0.2, seed=0)
    assert "epe" not in evaluate_predictions([nearest_fill(depth)], [depth]).values


def test_sweeps(tmp_path, model_and_samples):
    model, samples = model_and_samples
    rows = sweep_noise(model, samples, ["gaussian", "laplacian"], [0, 2], metric="epe", seed=1)
    assert [r.relative_value for r in rows if r.level == 0] == [1.0, 1.0]
    again = sweep_noise(model, samples, ["gaussian", "laplacian"], [0, 2], metric="epe", seed=1)
    assert [r.absolute_value for r in rows] == [r.absolute_value for r in again]
    dens = sweep_density(model, samples, [1.0, 0.1], seed=1)
    assert dens[0].relative_value == 1.0 and dens[0].metric == "epe"
    write_sweep_csv(tmp_path / "s.csv", rows + dens)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "kind,level,metric,relative_value,absolute_value" and len(lines) == 7
    with pytest.raises(ValueError):
        sweep_noise(model, samples, metric="psnr")
