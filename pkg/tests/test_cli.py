import json
import subprocess
import sys

import numpy as np
import pytest

from avt import network as nw
from avt.cli import main
from avt.evaluate import MetricsReport
from avt.groups import ClusterTree

BLOBS = {"class_centers": [[0.1, 0.1], [0.2, 0.1], [0.8, 0.9], [0.9, 0.9]],
         "noise_stddev": 0.02, "samples_per_class": 50, "seed": 1}


def _write(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def _train_cfg(tmp, name, epochs=8, **train):
    doc = {"dataset": dict(BLOBS, kind="blobs"), "arch": "mlp-tiny",
           "train": dict({"epochs": epochs, "batch_size": 32}, **train)}
    return _write(tmp / f"{name}.json", doc)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--config", _write(tmp / "synth.json", BLOBS),
                 "--out", str(tmp / "data")]) == 0
    assert main(["train", "--config", _train_cfg(tmp, "nat", epochs=20),
                 "--out", str(tmp / "nat")]) == 0
    assert main(["cluster", str(tmp / "nat" / "model.json"), "--out", str(tmp / "clu")]) == 0
    return tmp


def test_synth_outputs_and_manifest(work):
    out = work / "data"
    assert sorted(p.name for p in out.iterdir()) == ["images.idx", "labels.idx", "manifest.json"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["tool"] == "avt" and man["command"] == "synth" and man["config"] == BLOBS
    assert main(["synth", "--config", str(work / "synth.json"), "--out", str(work / "d2")]) == 0
    for f in ("images.idx", "labels.idx", "manifest.json"):
        assert (out / f).read_bytes() == (work / "d2" / f).read_bytes()


def test_cluster_pairs_before_root(work):
    tree = ClusterTree.from_json(str(work / "clu" / "tree.json"))
    assert tree.nested() == [[0, 1], [2, 3]]
    assert json.loads((work / "clu" / "partition.json").read_text()) == \
        {"groups": [[0, 1], [2, 3]]}
    assert main(["cluster", str(work / "nat" / "model.json"), "--out", str(work / "clu2")]) == 0
    assert (work / "clu" / "tree.json").read_bytes() == (work / "clu2" / "tree.json").read_bytes()


def test_cluster_two_class_model(tmp_path):
    nw.save(nw.init([nw.Dense(3, 2)], 0), tmp_path / "m.json")
    assert main(["cluster", str(tmp_path / "m.json"), "--out", str(tmp_path / "c")]) == 0
    assert len(json.loads((tmp_path / "c" / "tree.json").read_text())["merges"]) == 1


def test_train_zero_epochs_saves_initialization(tmp_path):
    assert main(["train", "--config", _train_cfg(tmp_path, "z", epochs=0),
                 "--out", str(tmp_path / "z")]) == 0
    saved = nw.load(tmp_path / "z" / "model.json")
    fresh = nw.init(nw.preset("mlp-tiny", (2,), 4), 0, (2,))
    assert all(a.tobytes() == b.tobytes()
               for a, b in zip(nw.snapshot(saved), nw.snapshot(fresh)))
    assert (tmp_path / "z" / "history.jsonl").read_text() == ""


def test_train_rerun_is_byte_identical(tmp_path):
    cfg = _train_cfg(tmp_path, "r", epochs=3, loss={"kind": "robust", "eps": 0.05})
    for out in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / out)]) == 0
    for f in ("model.json", "history.jsonl", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "9"]) == 0
    assert (tmp_path / "a" / "model.json").read_bytes() != \
        (tmp_path / "c" / "model.json").read_bytes()


def test_train_igrp_from_partition_file(work):
    cfg = _train_cfg(work, "igrp", epochs=4,
                     loss={"kind": "igrp", "eps_outer": 0.1, "eps_inner": 0.02, "ubs": True})
    doc = json.loads(open(cfg).read())
    doc["partition"] = str(work / "clu" / "partition.json")
    _write(work / "igrp.json", doc)
    assert main(["train", "--config", cfg, "--out", str(work / "igrp")]) == 0
    man = json.loads((work / "igrp" / "manifest.json").read_text())
    assert str(work / "clu" / "partition.json") in man["inputs"]


def test_eval_and_certify(work, capsys):
    cfg = _write(work / "eval.json", {"dataset": {"kind": "idx-dir", "path": str(work / "data")},
                                      "partition": str(work / "clu" / "partition.json")})
    model = str(work / "nat" / "model.json")
    assert main(["eval", "--config", cfg, "--model", model, "--out", str(work / "ev")]) == 0
    rep = MetricsReport.load(work / "ev" / "report_eps0.json")
    assert rep.metadata["eps"] == 0.0 and 0.0 <= rep.verified_error <= 1.0
    assert rep.verified_error >= rep.clean_error
    assert "Verified Inter-Group Error" in capsys.readouterr().out
    assert main(["certify", "--config", cfg, "--model", model, "--eps", "0,0.05",
                 "--out", str(work / "cert")]) == 0
    reps = [MetricsReport.load(work / "cert" / f"report_eps{e}.json") for e in ("0", "0.05")]
    assert reps[0].verified_error <= reps[1].verified_error
    assert reps[0].to_json() == rep.to_json()
    assert main(["certify", "--config", cfg, "--model", model, "--out", str(work / "c2")]) == 2


def test_train_ndt_and_eval(work):
    cfg = {"dataset": dict(BLOBS, kind="blobs"), "arch": "mlp-tiny",
           "tree": str(work / "clu" / "tree.json"), "variant": "mixed", "eps_table": [0.05],
           "train": {"epochs": 5, "batch_size": 32}}
    assert main(["train-ndt", "--config", _write(work / "ndt.json", cfg),
                 "--out", str(work / "ndt")]) == 0
    lines = (work / "ndt" / "history.jsonl").read_text().splitlines()
    assert {json.loads(l)["node"] for l in lines} == {"r", "r0", "r1"}
    ecfg = _write(work / "eval_ndt.json", {"dataset": dict(BLOBS, kind="blobs"),
                                           "partition": {"groups": [[0, 1], [2, 3]]},
                                           "eps": [0.05]})
    assert main(["eval", "--config", ecfg, "--model", str(work / "ndt" / "ndt"),
                 "--out", str(work / "ev_ndt")]) == 0
    rep = MetricsReport.load(work / "ev_ndt" / "report_eps0.05.json")
    assert rep.verified_error is None and rep.verified_inter_group_error is not None


def test_unknown_model_is_an_error(work, capsys):
    cfg = _write(work / "e.json", {"dataset": dict(BLOBS, kind="blobs"),
                                   "partition": {"groups": [[0, 1], [2, 3]]}})
    code = main(["eval", "--config", cfg, "--model", str(work / "nope.json"),
                 "--out", str(work / "x")])
    assert code == 1 and "nope.json" in capsys.readouterr().err


def test_schema_errors_exit_2_with_field_paths(tmp_path, capsys):
    bad = {"dataset": {"kind": "blobs", "class_centers": [[0, 0], [1, 1]],
                       "noise_stddev": -1, "samples_per_class": 5},
           "arch": "mlp-tiny", "train": {"epochs": -3, "colour": "red"}}
    assert main(["train", "--config", _write(tmp_path / "b.json", bad),
                 "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "config.dataset.noise_stddev" in err and "config.train.epochs" in err
    assert "colour" in err
    (tmp_path / "j.json").write_text("{")
    assert main(["train", "--config", str(tmp_path / "j.json"), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--config", _train_cfg(tmp_path, "t"), "--out", str(tmp_path / "o"),
                 "--threads", "0"]) == 2


def test_igrp_eps_order_is_a_config_error(tmp_path):
    cfg = _train_cfg(tmp_path, "o", loss={"kind": "igrp", "eps_outer": 0.01, "eps_inner": 0.1})
    doc = json.loads(open(cfg).read())
    doc["partition"] = {"groups": [[0, 1], [2, 3]]}
    assert main(["train", "--config", _write(tmp_path / "o.json", doc),
                 "--out", str(tmp_path / "o")]) == 2


def test_nan_exits_3(tmp_path, capsys):
    net = nw.init(nw.preset("mlp-tiny", (2,), 4), 0, (2,))
    net.params[-1][1].data[0] = np.nan
    nw.save(net, tmp_path / "nan.json")
    cfg = _train_cfg(tmp_path, "n", epochs=1)
    doc = json.loads(open(cfg).read())
    doc["init_model"] = str(tmp_path / "nan.json")
    assert main(["train", "--config", _write(tmp_path / "n.json", doc),
                 "--out", str(tmp_path / "o")]) == 3
    assert "non-finite" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "avt", "synth", "--config",
                           _write(tmp_path / "s.json", BLOBS), "--out", str(tmp_path / "s")],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and (tmp_path / "s" / "images.idx").exists()
    proc = subprocess.run([sys.executable, "-m", "avt", "frobnicate"], capture_output=True)
    assert proc.returncode == 2
