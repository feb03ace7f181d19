import json

import numpy as np
import pytest

from macdiff.cli import main
from macdiff.skeleton import load_dataset


def run(*argv):
    return main([str(a) for a in argv])


def report(path):
    return json.loads((path / "report.json").read_text())


def tree_bytes(path):
    return {p.relative_to(path).as_posix(): p.read_bytes() for p in sorted(path.rglob("*"))
            if p.is_file() and p.name != "run.json"}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "data", "--classes", 2, "--per-class", 4, "--frames", 16, "--seed", 1) == 0
    assert run("train", "--data", root / "data", "--out", root / "run", "--set", "train.max_steps=3",
               "--set", "train.batch_size=4", "--seed", 0) == 0
    return root


def test_synth_defaults(tmp_path):
    assert run("synth", "--out", tmp_path / "d") == 0
    data = load_dataset(tmp_path / "d")
    X, y = data.subset("train")
    Xt, yt = data.subset("test")
    assert X.shape == (256, 64, 25, 3) and Xt.shape == (256, 64, 25, 3)
    assert np.bincount(y).tolist() == [64] * 4 and np.bincount(yt).tolist() == [64] * 4
    assert report(tmp_path / "d")["results"]["sequences"] == {"train": 256, "test": 256}


def test_synth_same_seed_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--out", tmp_path / name, "--classes", 2, "--per-class", 3, "--seed", 7) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert "timestamp" in json.loads((tmp_path / "a" / "run.json").read_text())
    assert run("synth", "--out", tmp_path / "c", "--classes", 2, "--per-class", 3, "--seed", 8) == 0
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


def test_non_empty_out_needs_force(tmp_path, capsys):
    out = tmp_path / "d"
    assert run("synth", "--out", out, "--classes", 2, "--per-class", 2) == 0
    assert run("synth", "--out", out, "--classes", 2, "--per-class", 2) == 1
    assert "not empty" in json.loads(capsys.readouterr().err.strip().splitlines()[-1])["message"]
    assert run("synth", "--out", out, "--classes", 2, "--per-class", 2, "--force") == 0


def test_unknown_config_key_and_missing_file(pipeline, tmp_path, capsys):
    code = run("train", "--data", pipeline / "data", "--out", tmp_path / "r", "--set", "train.model.embed_dimm=3")
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert code == 2 and err["error"] == "ConfigError" and "embed_dimm" in err["message"]
    assert run("train", "--data", tmp_path / "missing", "--out", tmp_path / "r2") == 2


def test_train_outputs(pipeline):
    rep = report(pipeline / "run")
    assert rep["results"]["steps"] == 3 and rep["command"] == "train"
    assert (pipeline / "run" / "loss.csv").exists() and (pipeline / "run" / "checkpoint" / "manifest.json").exists()


def test_generate_deterministic(pipeline, tmp_path):
    for name in ("g1", "g2"):
        assert run("generate", "--checkpoint", pipeline / "run", "--out", tmp_path / name, "--n", 3,
                   "--seed", 4, "--set", "sampler.num_steps=3") == 0
    assert tree_bytes(tmp_path / "g1") == tree_bytes(tmp_path / "g2")
    assert len(load_dataset(tmp_path / "g1").sequences) == 3


def test_evalgen_identical_sets(pipeline, tmp_path):
    assert run("synth", "--out", tmp_path / "d", "--classes", 2, "--per-class", 20, "--frames", 16) == 0
    assert run("evalgen", "--checkpoint", pipeline / "run", "--real", tmp_path / "d", "--gen", tmp_path / "d",
               "--out", tmp_path / "e") == 0
    res = report(tmp_path / "e")["results"]
    assert res["fid"] < 1e-3 and res["precision"] == 1.0 and res["recall"] == 1.0


def test_inpaint_and_augment(pipeline, tmp_path):
    assert run("inpaint", "--checkpoint", pipeline / "run", "--data", pipeline / "data", "--out", tmp_path / "i",
               "--n", 2, "--occlusion", "body_part", "--set", "inpaint.num_steps=3") == 0
    res = report(tmp_path / "i")["results"]
    assert res["observed_exact"] and np.load(tmp_path / "i" / "observed_mask.npy").shape == (32, 25)
    assert run("augment", "--checkpoint", pipeline / "run", "--data", pipeline / "data", "--out", tmp_path / "a",
               "--ratio", 0.5) == 0
    entries = json.loads((tmp_path / "a" / "augment_manifest.json").read_text())["samples"]
    assert len(entries) == 4 and all(e["t_s"] == 500 and e["source_file"].startswith("train_") for e in entries)


def test_probe_and_semi(pipeline, tmp_path):
    assert run("probe", "--checkpoint", pipeline / "run", "--data", pipeline / "data", "--out", tmp_path / "p",
               "--set", "eval.probe_epochs=3") == 0
    res = report(tmp_path / "p")["results"]
    assert 0 <= res["accuracy"] <= 1 and res["chance"] == 0.5
    assert len((tmp_path / "p" / "probe_epochs.csv").read_text().splitlines()) == 4
    assert run("semi", "--checkpoint", pipeline / "run", "--data", pipeline / "data", "--out", tmp_path / "s",
               "--fraction", 0.5, "--ratio", 1.0, "--set", "eval.finetune_epochs=1") == 0
    res = report(tmp_path / "s")["results"]
    assert res["labeled"] == 4 and res["augmented_train_size"] == 8


def test_schedule_dump_and_gradcheck(tmp_path):
    assert run("schedule-dump", "--out", tmp_path / "s", "--kind", "cosine", "--T", 10) == 0
    lines = (tmp_path / "s" / "schedule.csv").read_text().strip().splitlines()
    assert len(lines) == 11 and lines[0] == "t,beta,alpha_bar,snr"
    assert run("gradcheck", "--model", "micro", "--max-coords", 200, "--out", tmp_path / "g") == 0
    assert report(tmp_path / "g")["results"]["passed"]
