import dataclasses

import numpy as np
import pytest

from ltmerge import numerics as nx
from ltmerge import trainer as T
from ltmerge.data import Dataset
from ltmerge.numerics import Tensor


def small(**kw):
    base = dict(epochs=3, t_warm=1, train_per_class=12, test_per_class=6, batch_size=8)
    base.update(kw)
    return T.TrainConfig(**base)


def same_arrays(a: dict, b: dict) -> bool:
    return list(a) == list(b) and all(a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes()
                                      for k in a)


def same_checkpoint(a: T.Checkpoint, b: T.Checkpoint) -> bool:
    if a.spec != b.spec or a.config != b.config or a.epoch != b.epoch or a.rng_state != b.rng_state:
        return False
    if a.optimizer["kind"] != b.optimizer["kind"] or a.optimizer["step"] != b.optimizer["step"]:
        return False
    if not (same_arrays(a.params, b.params) and same_arrays(a.optimizer["slots"], b.optimizer["slots"])):
        return False
    if a.input_centroids.tobytes() != b.input_centroids.tobytes():
        return False
    for sa, sb in zip(a.states, b.states):
        if (sa is None) != (sb is None):
            return False
        if sa is not None and not same_arrays(dataclasses.asdict(sa) | {"epoch": np.array(sa.epoch)},
                                              dataclasses.asdict(sb) | {"epoch": np.array(sb.epoch)}):
            return False
    return len(a.states) == len(b.states)


def test_config_json_rejects_unknown_keys():
    with pytest.raises(T.ConfigError, match="epochz"):
        T.TrainConfig.from_json('{"epochz": 3}')
    with pytest.raises(T.ConfigError):
        T.TrainConfig.from_json("{not json")
    with pytest.raises(T.ConfigError):
        T.TrainConfig(epochs=3, t_warm=5)
    cfg = T.TrainConfig.from_json('{"epochs": 4, "t_warm": 2, "ratio": [0.5, 1.0]}')
    assert cfg.model_spec().ratios == (0.5, 1.0)


def test_full_scale_schedule_preset():
    cfg = T.TrainConfig.full_scale()
    assert (cfg.epochs, cfg.t_warm, cfg.batch_size, cfg.lr_start, cfg.lr_peak) == (300, 100, 1024, 2e-4, 2e-3)
    assert cfg.eta == 1.0


def test_lr_schedule_shape():
    cfg = T.TrainConfig(epochs=10, t_warm=2, lr_warmup_epochs=2)
    lrs = [T.lr_at(cfg, s, 5) for s in range(50)]
    assert lrs[0] == pytest.approx(cfg.lr_start)
    assert lrs[10] == pytest.approx(cfg.lr_peak)
    assert all(a <= b for a, b in zip(lrs[:10], lrs[1:11]))
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert T.lr_at(cfg, 50, 5) == pytest.approx(cfg.lr_end)


def test_warmup_only_matches_baseline():
    cfg = small(epochs=2, t_warm=2)
    tr, _ = cfg.load_data()
    a = T.train(cfg, tr).checkpoint
    b = T.train(dataclasses.replace(cfg, merge=False), tr).checkpoint
    assert same_arrays(a.params, b.params)
    assert same_arrays(a.optimizer["slots"], b.optimizer["slots"])
    # unused mask modules are never stepped, weight decay included
    fresh = T.LTMNet.create(cfg.model_spec(), cfg.seed).params
    mask_keys = [k for k in a.params if ".mask." in k]
    assert mask_keys
    for k in mask_keys:
        assert a.params[k].tobytes() == fresh[k].data.tobytes()


def test_single_sample_loss_does_not_increase():
    cfg = T.TrainConfig(epochs=2, t_warm=1, num_classes=1, batch_size=1)
    ds = Dataset(np.random.default_rng(0).random((1, 16, 16)), np.zeros(1, dtype=np.int64))
    part = T.train(cfg, ds, stop_after=1).checkpoint
    full = T.train(cfg, ds).checkpoint
    before = T.evaluate(part, ds).loss
    after = T.evaluate(full, ds).loss
    assert after <= before


def test_training_deterministic_and_merging():
    cfg = small()
    tr, _ = cfg.load_data()
    a, b = T.train(cfg, tr), T.train(cfg, tr)
    assert same_checkpoint(a.checkpoint, b.checkpoint)
    assert a.report.to_csv() == b.report.to_csv()
    assert [h["merging"] for h in a.history] == [False, True, True]
    assert [r.epoch for r in a.report.records] == [0, 0, 1, 1, 2, 2]
    for r in a.report.records:
        assert r.ib_loss <= r.ibb - r.c0 + 1e-9


def test_states_consumed_are_from_previous_epoch():
    cfg = small()
    tr, _ = cfg.load_data()
    ck = T.train(cfg, tr, stop_after=2).checkpoint
    assert [s.epoch for s in ck.states] == [1, 1]


def test_checkpoint_round_trip(tmp_path):
    cfg = small()
    tr, te = cfg.load_data()
    ck = T.train(cfg, tr).checkpoint
    path = tmp_path / "c.ckpt"
    T.save_checkpoint(ck, path)
    back = T.load_checkpoint(path)
    assert same_checkpoint(ck, back)
    T.save_checkpoint(back, tmp_path / "d.ckpt")
    assert path.read_bytes() == (tmp_path / "d.ckpt").read_bytes()
    e1, e2 = T.evaluate(ck, te), T.evaluate(back, te)
    assert e1.accuracy == e2.accuracy and e1.loss == e2.loss
    assert e1.report.to_csv() == e2.report.to_csv()


def test_checkpoint_errors(tmp_path):
    cfg = small(epochs=1, t_warm=0)
    tr, _ = cfg.load_data()
    path = tmp_path / "c.ckpt"
    T.save_checkpoint(T.train(cfg, tr).checkpoint, path)
    raw = path.read_bytes()
    (tmp_path / "m").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(T.BadMagicError):
        T.load_checkpoint(tmp_path / "m")
    for cut in (4, 10, 40, len(raw) - 1):
        (tmp_path / "t").write_bytes(raw[:cut])
        with pytest.raises(T.TruncatedCheckpointError):
            T.load_checkpoint(tmp_path / "t")
    (tmp_path / "v").write_bytes(raw.replace(b'"version":1', b'"version":9', 1))
    with pytest.raises(T.VersionMismatchError):
        T.load_checkpoint(tmp_path / "v")


def test_resume_reproduces_trajectory(tmp_path):
    cfg = small()
    tr, _ = cfg.load_data()
    full = T.train(cfg, tr)
    first = T.train(cfg, tr, stop_after=1)
    T.save_checkpoint(first.checkpoint, tmp_path / "k.ckpt")
    rest = T.train(cfg, tr, resume=T.load_checkpoint(tmp_path / "k.ckpt"))
    assert same_checkpoint(full.checkpoint, rest.checkpoint)
    assert first.report.to_csv() + rest.report.to_csv().split("\n", 1)[1] == full.report.to_csv()


def test_ratio_one_matches_plain_evaluation():
    cfg = small(ratio=1.0)
    tr, te = cfg.load_data()
    ck = T.train(cfg, tr).checkpoint
    ev = T.evaluate(ck, te)
    logits = ck.model().forward(te.images, merge=False).data
    assert ev.logits.tobytes() == logits.tobytes()


def test_empty_class_rejected():
    cfg = small()
    tr, _ = cfg.load_data()
    with pytest.raises(T.TrainingError, match="no samples"):
        T.train(cfg, tr.subset(np.flatnonzero(tr.labels != 2)))


def test_non_finite_loss_aborts():
    cfg = small(lr_start=1e30, lr_peak=1e30, t_warm=0)
    tr, _ = cfg.load_data()
    with pytest.raises(T.TrainingError, match="non-finite"):
        T.train(cfg, tr)


def test_evaluate_rejects_mismatched_checkpoint():
    cfg = small(epochs=1, t_warm=0)
    tr, te = cfg.load_data()
    ck = T.train(cfg, tr).checkpoint
    bad = dataclasses.replace(ck, params={k: v for k, v in ck.params.items() if k != "head.b"})
    with pytest.raises(T.CheckpointError):
        T.evaluate(bad, te)


def test_export_masks_csv():
    cfg = small()
    tr, te = cfg.load_data()
    ck = T.train(cfg, tr).checkpoint
    text = T.export_masks(ck, te, 1, [0, 3])
    rows = text.splitlines()
    assert rows[0] == "sample,token_index,merged_index,weight"
    assert len(rows) == 1 + 2 * 8 * 4
    w = np.array([float(r.split(",")[3]) for r in rows[1:]]).reshape(2, 8, 4)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_ib_report_csv_round_trip():
    rep = T.IBReport([T.IBRecord(0, 1, 0.5, 0.25, 0.25, 1.0, -2.0)])
    assert T.IBReport.from_csv(rep.to_csv()).records == rep.records
