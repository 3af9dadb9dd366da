import json

import numpy as np
import pytest

from evimr import pipeline as P
from evimr import synth
from evimr.heads import MomentSpan
from evimr.metrics import Detection, metric_report, nms

TINY = {
    "synth.n_samples": 60, "synth.L_v": 8, "synth.D": 6, "synth.vocab_size": 40, "synth.n_concepts": 6,
    "model.width": 6, "model.n_rff": 1, "train.qr_epochs": 1, "train.epochs": 2, "train.batch_size": 16,
    "train.lr": 1e-3, "eval.iid_fraction": 0.25,
}


def tiny(**over):
    flat = dict(TINY)
    flat.update({k.replace("__", "."): v for k, v in over.items()})
    return P.RunConfig.from_flat(flat)


@pytest.fixture(scope="module")
def trained():
    cfg = tiny()
    splits = P.build_splits(cfg)
    return cfg, splits, P.train(cfg, splits=splits)


def test_config_round_trip():
    cfg = tiny(seed=5, train__mode="vanilla")
    flat = json.loads(json.dumps(cfg.to_flat()))
    assert P.RunConfig.from_flat(flat) == cfg
    assert P.RunConfig.from_flat({}) == P.RunConfig()


def test_config_defaults_follow_declared_schedule():
    cfg = P.RunConfig()
    assert (cfg.train.qr_epochs, cfg.train.qr_lr, cfg.train.epochs, cfg.train.lr, cfg.train.batch_size) == (30, 1e-5, 50, 1e-4, 32)
    assert cfg.model.n_rff == 4 and cfg.loss.lambda_geom == 1e-2 and cfg.loss.lambda_der == 1e-3


@pytest.mark.parametrize("flat", [
    {"train.learning_rate": 1e-3}, {"bogus": 1}, {"synth.seed": 3}, {"train": 1},
    {"train.epochs": "ten"}, {"train.epochs": 2.5}, {"model.residual": 1}, {"train.mode": "ridge"},
    {"train.lr": 0}, {"eval.vis_ladder": []}, {"eval.text_ladder": [0, 2]}, {"train.mask_policy": "half"},
    {"synth.D": 2}, {"seed": -1},
])
def test_config_rejects(flat):
    with pytest.raises(P.ConfigError):
        P.RunConfig.from_flat(flat)


def test_config_hash():
    a = tiny()
    assert a.config_hash() == tiny(out="elsewhere").config_hash()
    assert a.config_hash() != tiny(seed=1).config_hash()
    assert len(a.config_hash()) == 64


def test_load_config(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(TINY))
    cfg = P.load_config(p, seed=9, out=str(tmp_path))
    assert cfg.seed == 9 and cfg.out == str(tmp_path) and cfg.synth.L_v == 8
    p.write_text("[1, 2]")
    with pytest.raises(P.ConfigError):
        P.load_config(p)
    p.write_text("{not json")
    with pytest.raises(P.ConfigError):
        P.load_config(p)


def test_checkpoint_round_trip(trained, tmp_path):
    _, _, res = trained
    ck = res.checkpoint
    assert P.Checkpoint.from_bytes(ck.to_bytes()) == ck
    path = tmp_path / "ck.bin"
    ck.save(path)
    back = P.Checkpoint.load(path, expected_hash=ck.config_hash)
    assert back == ck and back.to_bytes() == ck.to_bytes()
    assert {"adam.m/evid.w", "adam.v/evid.w", "evid.w"} <= set(back.tensors)
    assert all(t.dtype == np.float32 for t in back.tensors.values())
    assert path.read_bytes()[:8] == b"DEMRCK01"


def test_checkpoint_integrity(trained, tmp_path):
    cfg, _, res = trained
    raw = bytearray(res.checkpoint.to_bytes())
    raw[100] ^= 0xFF
    with pytest.raises(ValueError, match="CRC"):
        P.Checkpoint.from_bytes(bytes(raw))
    path = tmp_path / "ck.bin"
    res.checkpoint.save(path)
    with pytest.raises(P.ConfigError):
        P.Checkpoint.load(path, expected_hash=tiny(seed=3).config_hash())
    with pytest.raises(P.ConfigError):
        P.model_from_checkpoint(tiny(seed=3), res.checkpoint)


def test_restore_reproduces_float32_params(trained):
    cfg, _, res = trained
    model = P.model_from_checkpoint(cfg, res.checkpoint)
    for name, p in model.store.params.items():
        np.testing.assert_array_equal(p, res.checkpoint.tensors[name].astype(np.float64))
    assert model.store.step == res.checkpoint.step


def test_zero_epochs(tmp_path):
    cfg = tiny(train__qr_epochs=0, train__epochs=0)
    res = P.train(cfg, out_dir=str(tmp_path))
    assert res.log == [] and res.checkpoint.step == 0
    fresh = P.MomentModel(cfg.model_config(), seed=cfg.seed)
    for name, p in fresh.store.params.items():
        np.testing.assert_array_equal(res.checkpoint.tensors[name], p.astype(np.float32))
    assert P.Checkpoint.load(tmp_path / "checkpoint.bin") == res.checkpoint


def test_training_log(trained):
    _, splits, res = trained
    log = res.log
    assert [r["stage"] for r in log] == ["qr", "main", "main"]
    assert log[0]["qr"] > 0 and all(r["qr"] == 0 for r in log[1:])
    assert all(set(P.LOG_FIELDS) <= set(r) for r in log)
    assert all(r["grad_norm_qr"] == 0 for r in log[1:])
    assert res.checkpoint.epoch == 3


def test_training_is_deterministic(trained):
    cfg, splits, res = trained
    again = P.train(cfg)
    assert again.checkpoint.to_bytes() == res.checkpoint.to_bytes()
    assert again.log == res.log


def test_qr_head_frozen_in_stage_two():
    stage1 = P.train(tiny(train__epochs=0)).checkpoint
    full = P.train(tiny(train__epochs=3)).checkpoint
    for name in ("qr.w", "qr.b", "adam.m/qr.w", "adam.v/qr.b"):
        np.testing.assert_array_equal(stage1.tensors[name], full.tensors[name])
    assert not np.array_equal(stage1.tensors["evid.w"], full.tensors["evid.w"])


def test_resume_after_interruption(tmp_path):
    cfg = tiny()

    def stop(row):
        if row["epoch"] == 0:
            raise KeyboardInterrupt

    with pytest.raises(KeyboardInterrupt):
        P.train(cfg, out_dir=str(tmp_path), on_epoch=stop)
    ck = P.Checkpoint.load(tmp_path / "checkpoint.bin", expected_hash=cfg.config_hash())
    assert ck.epoch == 1
    resumed = P.train(cfg, resume=ck)
    assert [r["epoch"] for r in resumed.log] == [1, 2]
    assert resumed.checkpoint.epoch == 3


def test_numerical_failure_keeps_last_good(tmp_path, monkeypatch):
    cfg = tiny()
    calls = {"n": 0}
    orig = P.MomentModel.loss_and_grad

    def flaky(self, *a, **k):
        calls["n"] += 1
        parts, out, frozen = orig(self, *a, **k)
        if calls["n"] > 5:
            parts = dict(parts, total=float("nan"))
        return parts, out, frozen

    monkeypatch.setattr(P.MomentModel, "loss_and_grad", flaky)
    with pytest.raises(P.NumericalError):
        P.train(cfg, out_dir=str(tmp_path))
    ck = P.Checkpoint.load(tmp_path / "checkpoint.bin")
    assert ck.epoch == 1  # three batches per epoch; the second epoch failed


def test_eval_oracle_predictions_score_perfectly(trained):
    _, splits, _ = trained
    samples = splits.test_iid
    N, L = len(samples), 8
    starts = np.zeros((N, L))
    ends = np.full((N, L), 1.0)
    scores = np.full((N, L), 0.1)
    for i, s in enumerate(samples):
        starts[i, 3], ends[i, 3], scores[i, 3] = s.gt.start, s.gt.end, 0.9
    z = np.ones((N, L, 2))
    pred = P.SplitPredictions(starts, ends, scores, z, z, z)
    res = P.evaluate_predictions(pred, samples)
    r = res.report
    assert r.r1_at == {0.3: 1.0, 0.5: 1.0, 0.7: 1.0} and r.miou == 1.0 and r.map_avg == 1.0
    assert np.all(res.top_clip == 3)


def test_eval_reproduces_pure_recomputation(trained):
    cfg, splits, res = trained
    samples = splits.test_iid
    got = P.evaluate(res.model, samples)
    video, tokens, _ = synth.stack(samples)
    p = res.model.predict(video, tokens)
    ranked = []
    for i in range(len(samples)):
        dets = [Detection(MomentSpan(float(p["starts"][i, j]), float(p["ends"][i, j])),
                          float(1 / (1 + np.exp(-p["fg_logit"][i, j]))), j) for j in range(cfg.synth.L_v)]
        ranked.append(nms(dets, 0.7))
    ref = metric_report(ranked, [s.gt for s in samples])
    assert got.report.to_dict() == ref.to_dict()
    top = [r[0].source for r in ranked]
    np.testing.assert_array_equal(got.epistemic, [p["epistemic"][i, t].mean() for i, t in enumerate(top)])


def test_eval_errors(trained):
    cfg, splits, res = trained
    with pytest.raises(P.ConfigError):
        P.evaluate(res.model, [])
    wide = [s.with_video(np.zeros((8, 9))) for s in splits.test_iid[:2]]
    with pytest.raises(P.ConfigError):
        P.evaluate(res.model, wide)


def test_noise_sweep(trained):
    cfg, splits, res = trained
    sweep = P.noise_sweep(res.model, cfg, splits.test_iid, (0.0, 1.0), (0.0, 0.5))
    n = len(splits.test_iid)
    assert len(sweep.rows) == 4 * n
    clean = P.evaluate(res.model, splits.test_iid).epistemic
    vis0 = [u for lvl, m, u in sweep.rows if m == "visual" and lvl == 0.0]
    txt0 = [u for lvl, m, u in sweep.rows if m == "text" and lvl == 0.0]
    assert vis0 == clean.tolist() and txt0 == clean.tolist()
    assert sweep.var_vis >= 0 and sweep.delta_var == abs(sweep.var_vis - sweep.var_text)
    with pytest.raises(P.ConfigError):
        P.noise_sweep(res.model, cfg, splits.test_iid, (), (0.0,))


def test_calibrate(trained):
    cfg, splits, res = trained
    rep, rows = P.calibrate(res.model, cfg, splits.test_iid)
    assert len(rows) == len(splits.test_iid)
    assert max(r[0] for r in rows) == pytest.approx(1.0)
    assert -1 <= rep.spearman_epistemic <= 1


@pytest.mark.parametrize("mode", ["none", "nll_only", "vanilla", "geom"])
def test_gradcheck_every_mode(mode):
    rep = P.gradcheck_model(mode)
    assert rep.passed, rep.offenders


def test_gradcheck_negative_control_and_mode_coverage():
    bad = P.gradcheck_model("geom", corrupt="rff.0.ca.wq")
    assert not bad.passed and "rff.0.ca.wq" in bad.offenders
    assert P.gradcheck_model("none", "concat").loss != P.gradcheck_model("geom", "concat").loss


def test_csv_and_json_format(tmp_path):
    P.write_csv(tmp_path / "a.csv", ("x", "y"), [(0.5, "t"), (1e-20, "u")])
    raw = (tmp_path / "a.csv").read_bytes()
    assert raw == b"x,y\n0.5,t\n1e-20,u\n"
    P.write_json(tmp_path / "a.json", {"b": 1, "a": {"d": 2, "c": 3}})
    text = (tmp_path / "a.json").read_text()
    assert text.index('"a"') < text.index('"b"') and text.index('"c"') < text.index('"d"')
    assert text.endswith("}\n") and "\r" not in text
