import math

import numpy as np
import pytest

from tipsfuse.features import assign_splits, fit_apply_normalization, generate_synthetic
from tipsfuse.model import Checkpoint, CheckpointError, Layout, ModelConfig, TipsFuseModel, load_checkpoint, save_checkpoint
from tipsfuse.training import (
    LOG_HEADER,
    Predictions,
    TrainConfig,
    encode_all,
    evaluate,
    param_checksum,
    predict,
    staged_train,
    worker_count,
    write_log,
)

TINY = dict(d=8, n_coarse=2, heads=4, head_h1=8, head_h2=4, ppg_h3=4)


def tiny_run(seed=0, epochs=(2, 2, 2), progress=None):
    ds, _ = generate_synthetic(seed, 40)
    assign_splits(ds, seed=seed)
    ds, norm = fit_apply_normalization(ds)
    model = TipsFuseModel(ModelConfig(**TINY), Layout.from_dataset(ds), seed)
    res = staged_train(ds, model, TrainConfig(*epochs, lr=1e-3, seed=seed), progress)
    return ds, norm, res


@pytest.fixture(scope="module")
def run():
    return tiny_run()


def test_log_rows_follow_stages(run):
    _, _, res = run
    assert [r.stage for r in res.log] == ["I", "I", "II-a", "II-a", "II-b", "II-b"]
    assert [r.epoch for r in res.log] == list(range(6))
    assert [r.metric_name for r in res.log][::2] == ["val_cindex_os", "val_mae_ppg", "val_cindex_ohe"]
    assert all(math.isfinite(r.loss) for r in res.log)
    assert set(res.best_epochs) == {"I", "II-a", "II-b"}
    assert res.pod.t == 2 * 24


def test_stage_two_leaves_backbone_untouched(run):
    _, _, res = run
    sums = res.stage_checksums
    assert list(sums) == ["I", "II-a", "II-b"]
    assert sums["I"] == sums["II-a"] == sums["II-b"]
    assert sums["I"] == param_checksum(res.model.backbone.parameters() + res.model.surv.parameters())


def test_stage_two_trains_the_other_heads(run):
    ds, _, res = run
    fresh = TipsFuseModel(ModelConfig(**TINY), Layout.from_dataset(ds), 0)
    fresh.reset_head("ppg", 11)
    fresh.reset_head("ohe", 13)
    assert param_checksum(res.model.ppg.parameters()) != param_checksum(fresh.ppg.parameters())
    assert param_checksum(res.model.ohe.parameters()) != param_checksum(fresh.ohe.parameters())


def test_training_is_deterministic(run):
    _, _, res = run
    _, _, again = tiny_run()
    assert [r.cells() for r in res.log] == [r.cells() for r in again.log]
    assert param_checksum(res.model.parameters()) == param_checksum(again.model.parameters())


def test_seed_changes_the_run(run):
    _, _, res = run
    _, _, other = tiny_run(seed=3)
    assert param_checksum(res.model.parameters()) != param_checksum(other.model.parameters())


def test_write_log(run, tmp_path):
    _, _, res = run
    write_log(res.log, tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOG_HEADER)
    assert len(lines) == 7


def test_checkpoint_round_trip(run, tmp_path):
    ds, norm, res = run
    ck = Checkpoint(res.model, res.bins_os, res.bins_ohe, norm, res.pod, {"split_seed": 0})
    save_checkpoint(tmp_path / "ck.npz", ck)
    back = load_checkpoint(tmp_path / "ck.npz")
    assert param_checksum(back.model.parameters()) == param_checksum(res.model.parameters())
    np.testing.assert_array_equal(back.bins_os.cuts, res.bins_os.cuts)
    assert back.extra == {"split_seed": 0}
    assert back.pod.to_dict() == res.pod.to_dict()
    test = ds.split("test")
    a, b = predict(res.model, test), predict(back.model, test)
    np.testing.assert_array_equal(a.z_os, b.z_os)
    np.testing.assert_array_equal(a.delta, b.delta)


def test_bad_checkpoint(tmp_path):
    p = tmp_path / "junk.npz"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def _oracle(records, z_bad=False):
    # hazards that rank by true time: earlier event, larger hazards
    n = len(records)
    t_os = np.array([r.outcomes.t_os for r in records])
    t_ohe = np.array([r.outcomes.t_ohe for r in records])
    z_os = np.repeat((1 - t_os / (t_os.max() + 1))[:, None], 4, axis=1)
    z_ohe = np.repeat((1 - t_ohe / (t_ohe.max() + 1))[:, None], 4, axis=1)
    if z_bad:
        z_os = np.full_like(z_os, 0.3)
    delta = np.array([r.outcomes.ppg_post - r.outcomes.ppg_pre for r in records])
    return Predictions(np.zeros((n, 1)), z_os, z_ohe, delta)


def test_evaluate_perfect_oracle(run):
    ds, _, res = run
    test = ds.split("test")
    ev = evaluate(res.model, test, res.bins_os, res.bins_ohe, preds=_oracle(test))
    assert ev["cindex_os"] == 1.0 and ev["cindex_ohe"] == 1.0
    assert ev["mae_ppg"] == pytest.approx(0.0, abs=1e-12)
    assert not ev["cindex_os_undefined"]


def test_evaluate_constant_predictions_flag_undefined(run):
    ds, _, res = run
    test = ds.split("test")
    ev = evaluate(res.model, test, res.bins_os, res.bins_ohe, preds=_oracle(test, z_bad=True))
    assert ev["cindex_os_undefined"] and not ev["cindex_ohe_undefined"]


def test_evaluate_keys(run):
    ds, _, res = run
    ev = evaluate(res.model, ds.split("test"), res.bins_os, res.bins_ohe)
    for k in ("cindex_os", "mbs_os", "cindex_ohe", "mbs_ohe", "mae_ppg", "rmse_ppg"):
        assert math.isfinite(ev[k])
    assert 0.0 <= ev["mbs_os"] <= 1.0


def test_threads_do_not_change_results(run, monkeypatch):
    ds, _, res = run
    recs = ds.split("val")
    one = encode_all(res.model, recs, threads=1)
    monkeypatch.setenv("TIPSFUSE_THREADS", "3")
    assert worker_count() == 3
    np.testing.assert_array_equal(encode_all(res.model, recs), one)
    monkeypatch.setenv("TIPSFUSE_THREADS", "many")
    assert worker_count() == 1


def test_train_config_checks():
    with pytest.raises(ValueError):
        TrainConfig(0, 1, 1)
    with pytest.raises(ValueError):
        TrainConfig(delta=-0.1)


def test_empty_validation_split_rejected():
    ds, _ = generate_synthetic(0, 10)
    for r in ds.records:
        r.split = "train"
    fit_apply_normalization(ds)
    model = TipsFuseModel(ModelConfig(**TINY), Layout.from_dataset(ds), 0)
    with pytest.raises(ValueError, match="val"):
        staged_train(ds, model, TrainConfig(1, 1, 1))
