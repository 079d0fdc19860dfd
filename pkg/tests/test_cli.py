import csv
import json
import os

import pytest
from conftest import UMLS_DIR

from rungnn.cli import PRESETS, ConfigError, RunConfig, main
from rungnn.training import load_checkpoint

TINY = ["--synthetic", "family:families=3,seed=1", "--n", "2", "--m", "1", "--d", "4", "--seed", "3"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def read_log_without_time(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    k = rows[0].index("seconds")
    return [r[:k] + r[k + 1:] for r in rows]


# ---------------------------------------------------------------- prepare


@pytest.mark.skipif(not os.path.isdir(UMLS_DIR), reason="UMLS files not present")
def test_prepare_umls(capsys, tmp_path):
    code, out, _ = run(capsys, "prepare", "--dataset", UMLS_DIR, "--out", tmp_path)
    assert code == 0
    s = json.loads(out)
    assert (s["entities"], s["relations"], s["train"], s["valid"], s["test"]) == (135, 46, 5216, 652, 661)
    assert json.loads((tmp_path / "summary.json").read_text()) == s


def test_prepare_synthetic_deterministic(capsys, tmp_path):
    outs = []
    for i in range(2):
        code, out, _ = run(capsys, "prepare", "--synthetic", "family:families=20,seed=7",
                           "--write", tmp_path / f"d{i}", "--out", tmp_path / f"o{i}")
        assert code == 0
        outs.append(out)
    assert outs[0] == outs[1]
    for f in ("train.txt", "valid.txt", "test.txt"):
        assert (tmp_path / "d0" / f).read_bytes() == (tmp_path / "d1" / f).read_bytes()
    # the written files load back to the same summary
    code, out, _ = run(capsys, "prepare", "--dataset", tmp_path / "d0", "--out", tmp_path / "o2")
    assert json.loads(out)["train"] == json.loads(outs[0])["train"]


def test_prepare_missing_file(capsys, tmp_path):
    (tmp_path / "train.txt").write_text("a\tr\tb\n")
    (tmp_path / "valid.txt").write_text("")
    code, _, err = run(capsys, "prepare", "--dataset", tmp_path, "--out", tmp_path / "o")
    assert code == 1 and "test.txt" in err


def test_prepare_manifest_mismatch(capsys, tmp_path):
    d = tmp_path / "ds"
    run(capsys, "prepare", "--synthetic", "family:families=3,seed=1", "--write", d, "--out", tmp_path / "o")
    (d / "manifest.json").write_text(json.dumps({"train": 1}))
    code, out, _ = run(capsys, "prepare", "--dataset", d, "--out", tmp_path / "o")
    assert code == 1 and "manifest_mismatch" in json.loads(out)


# ---------------------------------------------------------------- config


def test_config_merge_order(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"preset": "umls", "d": 32, "synthetic": "family:families=3"}))
    cfg = RunConfig.build(cfg_file, {"m": 0, "lr": None})
    assert (cfg.n, cfg.m, cfg.d, cfg.lr) == (PRESETS["umls"]["n"], 0, 32, PRESETS["umls"]["lr"])


@pytest.mark.parametrize("bad", [{"n": 11}, {"d": 300}, {"m": -1}, {"variant": "bogus"}, {"lr": -1.0},
                                 {"bogus_key": 1}, {"preset": "nope"}, {"dataset": "/no/such/dir"},
                                 {"synthetic": None}])
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        RunConfig.build(None, {"synthetic": "family:families=3", **bad} if bad != {"synthetic": None} else {})


def test_invalid_config_fails_before_compute(capsys, tmp_path):
    code, _, err = run(capsys, "train", *TINY, "--n", "12", "--out", tmp_path / "r")
    assert code == 1 and "n must be" in err
    assert not (tmp_path / "r" / "train_log.csv").exists()


# ---------------------------------------------------------------- train / evaluate / hops / extract


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    assert main(["train", *TINY, "--epochs", "3", "--out", str(base / "run")]) == 0
    return base


def test_train_outputs(trained):
    run_dir = trained / "run"
    for f in ("best.ckpt", "last.ckpt", "train_log.csv", "config.json", "run_config.json",
              "test_metrics.csv", "test_metrics.json"):
        assert (run_dir / f).exists(), f
    assert len(read_log_without_time(run_dir / "train_log.csv")) == 4
    params = load_checkpoint(run_dir / "best.ckpt")
    assert params.config.n == 2 and params.meta["seed"] == 3


def test_train_rerun_byte_identical(capsys, trained, tmp_path):
    primary = ("best.ckpt", "last.ckpt", "config.json", "run_config.json", "test_metrics.csv", "test_metrics.json")
    before = {f: (trained / "run" / f).read_bytes() for f in primary}
    log_before = read_log_without_time(trained / "run" / "train_log.csv")
    code, _, _ = run(capsys, "train", *TINY, "--epochs", "3", "--out", trained / "run")
    assert code == 0
    for f in primary:
        assert (trained / "run" / f).read_bytes() == before[f], f
    assert read_log_without_time(trained / "run" / "train_log.csv") == log_before


def test_evaluate_and_hops(capsys, trained):
    ck = trained / "run" / "best.ckpt"
    code, out, _ = run(capsys, "evaluate", "--checkpoint", ck, "--synthetic", TINY[1], "--out", trained / "ev")
    assert code == 0
    ev = json.loads(out)
    assert ev == json.loads((trained / "run" / "test_metrics.json").read_text())
    assert (trained / "ev" / "test_metrics.csv").exists()
    code, out, _ = run(capsys, "hops", "--checkpoint", ck, "--synthetic", TINY[1], "--out", trained / "hops")
    assert code == 0
    hops = json.loads(out)
    assert sum(b["count"] for b in hops["buckets"].values()) == hops["count"] == ev["count"]
    with open(trained / "hops" / "hops.csv") as fh:
        assert [r["bucket"] for r in csv.DictReader(fh)][0] == "ALL"


def test_extract(capsys, trained):
    ck = trained / "run" / "best.ckpt"
    code, out, _ = run(capsys, "extract", "--checkpoint", ck, "--synthetic", TINY[1], "--head", "f0_c0",
                       "--relation", "has_father", "--beam", "2", "--out", trained / "ex")
    assert code == 0 and out.startswith("# query (f0_c0, has_father, ?)")
    assert (trained / "ex" / "evidence.txt").read_text() == out
    code, _, err = run(capsys, "extract", "--checkpoint", ck, "--synthetic", TINY[1], "--head", "nobody",
                       "--relation", "has_father", "--out", trained / "ex")
    assert code == 1 and "nobody" in err


def test_probe_order(capsys, trained, tmp_path):
    add_dir = tmp_path / "add"
    assert main(["train", *TINY, "--epochs", "1", "--variant", "message-addition", "--out", str(add_dir)]) == 0
    capsys.readouterr()
    pairs = tmp_path / "pairs.txt"
    pairs.write_text("has_father has_sister\nhas_sister has_father\nhas_father has_father\n")
    code, out, _ = run(capsys, "probe-order", "--checkpoints",
                       f"full={trained / 'run' / 'best.ckpt'},add={add_dir / 'best.ckpt'}",
                       "--pairs", pairs, "--synthetic", TINY[1], "--out", tmp_path / "probe")
    assert code == 0
    summary = json.loads(out)
    assert summary["add"]["max"] == 0.0 and summary["full"]["mean"] > 0
    with open(tmp_path / "probe" / "probe_order.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 6 and all(float(r["distance"]) == 0 for r in rows if r["r1"] == r["r2"])
    pairs.write_text("has_father nonsense\n")
    code, _, err = run(capsys, "probe-order", "--checkpoints", f"full={trained / 'run' / 'best.ckpt'}",
                       "--pairs", pairs, "--synthetic", TINY[1], "--out", tmp_path / "probe")
    assert code == 1 and "nonsense" in err


def test_missing_checkpoint(capsys, tmp_path):
    code, _, err = run(capsys, "evaluate", "--checkpoint", tmp_path / "none.ckpt", "--synthetic", TINY[1],
                       "--out", tmp_path)
    assert code == 1


def test_ablate_small(capsys, tmp_path):
    code, out, _ = run(capsys, "ablate", *TINY, "--epochs", "1", "--variants", "full-qrfgu,no-buffer",
                       "--seeds", "0,1", "--out", tmp_path)
    assert code == 0
    with open(tmp_path / "ablation.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if r["bucket"] == "ALL"]
    assert sorted((r["variant"], r["seed"]) for r in rows) == [("full-qrfgu", "0"), ("full-qrfgu", "1"),
                                                                ("no-buffer", "0"), ("no-buffer", "1")]
    summary = json.loads((tmp_path / "ablation_summary.json").read_text())
    assert set(summary["median_mrr"]) == {"full-qrfgu", "no-buffer"}


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_passes_and_covers_all_params(capsys, tmp_path):
    code, out, _ = run(capsys, "gradcheck", "--n", "2", "--m", "1", "--d", "3", "--instances", "1",
                       "--out", tmp_path)
    assert code == 0 and json.loads(out)["passed"]
    rep = json.loads((tmp_path / "gradcheck.json").read_text())
    names = set(rep["instances"][0]["max_rel_error"])
    assert "W_score" in names and "layers.2.update.W_c" in names and "layers.0.message.W_u" in names
    # per layer: relation table, six message-fusion tensors, three attention, six update-fusion
    assert len(names) == 3 * 16 + 1


def test_gradcheck_failure_exit_code(capsys, tmp_path):
    # an absurd tolerance makes the check fail, exercising the numeric-failure path
    code, _, _ = run(capsys, "gradcheck", "--n", "1", "--m", "0", "--d", "2", "--instances", "1",
                     "--tolerance", "-1", "--out", tmp_path)
    assert code == 2


def test_gradcheck_rejects_large(capsys, tmp_path):
    code, _, err = run(capsys, "gradcheck", "--d", "64", "--out", tmp_path)
    assert code == 1


def test_run_dir_env(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("RUNGNN_RUN_DIR", str(tmp_path / "env_runs"))
    code, _, _ = run(capsys, "prepare", "--synthetic", "family:families=3,seed=1")
    assert code == 0 and (tmp_path / "env_runs" / "prepare" / "summary.json").exists()
