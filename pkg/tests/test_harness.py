import csv
import json
import struct

import numpy as np
import pytest

from ctrcl import harness
from ctrcl.data import make_dataset, save_dataset
from ctrcl.harness import RunConfig, load_checkpoint, save_checkpoint, train
from ctrcl.objective import poly_lr

TINY = dict(num_train=12, num_test=6, height=32, width=32, batch_size=4, cnn_width=4, transformer_width=4, eval_every=1)


@pytest.fixture(scope="module")
def tiny_data():
    return make_dataset(12, 32, 32, 4, seed=100), make_dataset(6, 32, 32, 4, seed=101)


def cfg(**kw):
    return RunConfig(**{**TINY, "epochs": 2, **kw})


def logs_of(result):
    return [lg.comparable() for lg in result.logs]


def params_of(result):
    return {f"{k}/{n}": p.data.copy() for k, st in result.state.students.items() for n, p in st.params.items()}


# -- config -----------------------------------------------------------------


def test_config_text_roundtrip_and_overrides():
    c = harness.parse_config_text("mode = dml\nbeta=0.5  # weaker\naugment = false\n\nepochs = 3\n")
    assert (c.mode, c.beta, c.augment, c.epochs) == ("dml", 0.5, False, 3)
    assert harness.parse_config_text(harness.config_to_text(c)) == c


@pytest.mark.parametrize("text", ["bogus = 1", "epochs", "augment = maybe", "epochs = x"])
def test_config_errors(text):
    with pytest.raises(ValueError):
        harness.parse_config_text(text)


@pytest.mark.parametrize("kw", [dict(mode="teacher"), dict(epochs=0), dict(lambda_factors="axz"), dict(beta=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        RunConfig(**kw).validate()


def test_mode_gates():
    g = {m: RunConfig(mode=m).gates for m in harness.MODES}
    assert not any(g["vanilla"].values())
    assert g["rlcl"] == {"rlcl": True, "dml": False, "cfcl_e": False, "cfcl_d": False}
    assert g["cfcl"] == {"rlcl": False, "dml": False, "cfcl_e": True, "cfcl_d": True}
    assert g["ctrcl"] == {"rlcl": True, "dml": False, "cfcl_e": True, "cfcl_d": True}
    assert g["dml"] == {"rlcl": False, "dml": True, "cfcl_e": False, "cfcl_d": False}


def test_seed_streams_are_distinct():
    s = harness._derived_seeds(0)
    assert len(set(s.values())) == 4
    assert s == harness._derived_seeds(0) and s != harness._derived_seeds(1)


# -- training ---------------------------------------------------------------


def test_vanilla_logs_zero_peer_terms(tiny_data):
    res = train(cfg(mode="vanilla", epochs=1), data=tiny_data)
    for lg in res.logs:
        assert lg.rlcl == lg.cfcl_e == lg.cfcl_d == 0.0
        assert lg.total == lg.seg


@pytest.mark.parametrize("mode", ["ctrcl", "dml", "rlcl", "cfcl"])
def test_logged_totals_recombine(tiny_data, mode):
    c = cfg(mode=mode, epochs=1)
    res = train(c, data=tiny_data)
    for lg in res.logs:
        assert lg.total == pytest.approx(lg.seg + c.beta * lg.rlcl + c.gamma1 * lg.cfcl_e + c.gamma2 * lg.cfcl_d, abs=1e-9)
    nonzero = {k for k in ("rlcl", "cfcl_e", "cfcl_d") if res.logs[0].row()[k] != 0}
    want = {"ctrcl": {"rlcl", "cfcl_e", "cfcl_d"}, "dml": {"rlcl"}, "rlcl": {"rlcl"}, "cfcl": {"cfcl_e", "cfcl_d"}}
    assert nonzero == want[mode]


def test_zero_weight_ctrcl_equals_vanilla(tiny_data):
    a = train(cfg(mode="ctrcl", beta=0, gamma1=0, gamma2=0), data=tiny_data)
    b = train(cfg(mode="vanilla"), data=tiny_data)
    assert logs_of(a) == logs_of(b)
    pa, pb = params_of(a), params_of(b)
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)


def test_poly_lr_logged_per_iteration(tiny_data):
    c = cfg(mode="vanilla", epochs=2)
    res = train(c, data=tiny_data)
    max_iter = 2 * 3
    assert res.lrs == [poly_lr(c.base_lr, i, max_iter) for i in range(max_iter)]
    assert [lg.lr for lg in res.logs[::2]] == [res.lrs[0], res.lrs[3]]


def test_rerun_is_bitwise_identical(tiny_data, tmp_path):
    a = train(cfg(mode="ctrcl", epochs=1, out=str(tmp_path / "a")), data=tiny_data)
    b = train(cfg(mode="ctrcl", epochs=1, out=str(tmp_path / "b")), data=tiny_data)
    assert logs_of(a) == logs_of(b)
    assert (tmp_path / "a" / "checkpoint.bin").read_bytes() != b""
    ra = load_checkpoint(tmp_path / "a" / "checkpoint.bin")
    rb = load_checkpoint(tmp_path / "b" / "checkpoint.bin")
    assert ra.config["out"] != rb.config["out"]
    assert all(ra.arrays[k].tobytes() == rb.arrays[k].tobytes() for k in ra.arrays)


def test_resume_equals_uninterrupted(tiny_data, tmp_path):
    full = train(cfg(mode="ctrcl", epochs=3, eval_every=3), data=tiny_data)
    c = cfg(mode="ctrcl", epochs=3, eval_every=3, out=str(tmp_path / "split"))
    first = train(c, stop_after=1, data=tiny_data)
    second = train(c, resume=str(tmp_path / "split" / "checkpoint.bin"), data=tiny_data)
    assert logs_of(full) == logs_of(first) + logs_of(second)
    pf, ps = params_of(full), params_of(second)
    assert all(pf[k].tobytes() == ps[k].tobytes() for k in pf)
    rows = list(csv.DictReader(open(tmp_path / "split" / "epochs.csv")))
    assert [int(r["epoch"]) for r in rows] == [0, 0, 1, 1, 2, 2]


def test_resume_rejects_other_config(tiny_data, tmp_path):
    c = cfg(mode="ctrcl", epochs=2, out=str(tmp_path))
    train(c, stop_after=1, data=tiny_data)
    with pytest.raises(ValueError):
        train(cfg(mode="vanilla", epochs=2), resume=str(tmp_path / "checkpoint.bin"), data=tiny_data)


def test_outputs_and_eval_reproduce_final_metrics(tiny_data, tmp_path):
    train_set, test_set = tiny_data
    save_dataset(tmp_path / "train.ctrs", train_set)
    save_dataset(tmp_path / "test.ctrs", test_set)
    c = cfg(mode="ctrcl", epochs=2, out=str(tmp_path / "run"), train_data=str(tmp_path / "train.ctrs"), test_data=str(tmp_path / "test.ctrs"))
    res = train(c)
    run = tmp_path / "run"
    rows = list(csv.DictReader(open(run / "epochs.csv")))
    assert len(rows) == 2 * 2 and {r["student"] for r in rows} == {"cnn", "transformer"}
    report = json.loads((run / "report.json").read_text())
    final = {lg.student: lg.metrics for lg in res.logs if lg.epoch == 1}
    assert report["cnn"] == final["cnn"].to_dict()

    again = harness.evaluate_cmd(run / "checkpoint.bin", out_dir=tmp_path / "eval")
    for k in harness.STUDENTS:
        assert again[k].to_dict() == final[k].to_dict()
    csv_rows = list(csv.reader(open(tmp_path / "eval" / "report.csv")))
    # header + per student (3 foreground classes + 1 summary)
    assert len(csv_rows) == 1 + 2 * (3 + 1)


def test_eval_errors(tiny_data, tmp_path):
    with pytest.raises(FileNotFoundError):
        harness.evaluate_cmd(tmp_path / "nope.bin")
    c = cfg(mode="vanilla", epochs=1, out=str(tmp_path))
    train(c, data=tiny_data)
    with pytest.raises(ValueError):
        harness.evaluate_cmd(tmp_path / "checkpoint.bin", make_dataset(2, 32, 32, 3, seed=0))


def test_checkpoint_roundtrip_idempotent(tiny_data, tmp_path):
    train(cfg(mode="ctrcl", epochs=1, out=str(tmp_path)), data=tiny_data)
    p1 = tmp_path / "checkpoint.bin"
    rec = load_checkpoint(p1)
    p2 = tmp_path / "again.bin"
    save_checkpoint(p2, rec)
    assert p1.read_bytes() == p2.read_bytes()
    state = rec.to_state()
    p3 = tmp_path / "third.bin"
    save_checkpoint(p3, harness.CheckpointRecord.from_state(state))
    assert p1.read_bytes() == p3.read_bytes()


def test_checkpoint_corruption(tiny_data, tmp_path):
    train(cfg(mode="vanilla", epochs=1, out=str(tmp_path)), data=tiny_data)
    raw = (tmp_path / "checkpoint.bin").read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(raw[:4] + struct.pack("<H", 99) + raw[6:])
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(bad)
    bad.write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    bad.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        load_checkpoint(bad)


def test_diag_dump(tiny_data, tmp_path):
    train(cfg(mode="ctrcl", epochs=1, diag=True, out=str(tmp_path)), data=tiny_data)
    index = json.loads((tmp_path / "diag" / "index.json").read_text())
    names = {e["file"] for e in index}
    assert "epoch000_cnn_lam.bin" in names and "epoch000_transformer_cfcl_d_prototypes.bin" in names
    for e in index:
        arr = np.fromfile(tmp_path / "diag" / e["file"], dtype="<f8")
        assert arr.size == int(np.prod(e["shape"]))
