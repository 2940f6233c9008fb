import json
import shutil
from pathlib import Path

import pytest

from flowmeta import cli, metasgd
from flowmeta.errors import UsageError

from pcapkit import Pkt, write_pcap

ROOT = Path(__file__).resolve().parents[1]
SMOKE = ROOT / "configs" / "smoke.conf"


def run(*argv):
    return cli.main([str(a) for a in argv])


def strip_timestamps(path):
    doc = json.loads(Path(path).read_text())
    doc.pop("timestamps")
    return doc


# ---- dispatch and exit codes


def test_no_arguments_prints_usage(capsys):
    assert run() == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_flag_names_token(capsys):
    assert run("pipeline", "--bogus-flag", "1") == 1
    assert "--bogus-flag" in capsys.readouterr().err


def test_unknown_subcommand(capsys):
    assert run("frobnicate") == 1
    assert "frobnicate" in capsys.readouterr().err


def test_constraint_violation_exit_3(capsys):
    assert run("pipeline", "--m", "0") == 3
    assert "m must be >= 1" in capsys.readouterr().err


def test_bad_capture_exit_2(tmp_path, capsys):
    (tmp_path / "bad.pcap").write_bytes(b"\x00" * 40)
    assert run("extract", "--in", tmp_path / "bad.pcap", "--out", tmp_path / "f.csv") == 2
    assert "magic" in capsys.readouterr().err


def test_missing_input_exit_2(tmp_path):
    assert run("select", "--in", tmp_path / "nope.csv", "--out-manifest", tmp_path / "s.json") == 2


def test_numerical_failure_exit_4(tmp_path, capsys):
    data = tmp_path / "d.csv"
    assert run("make-synthetic", "--out", data, "--synthetic-classes", 8, "--synthetic-normal", 300,
               "--manifest-out", tmp_path / "m0.json") == 0
    assert run("select", "--in", data, "--out-manifest", tmp_path / "s.json", "--trees", 5,
               "--manifest-out", tmp_path / "m1.json") == 0
    code = run("meta-train", "--data", data, "--manifest", tmp_path / "s.json", "--episodes", 3,
               "--hidden", 8, "--n-test", 2, "--alpha-init", "1e300", "--out", tmp_path / "x.ckpt",
               "--manifest-out", tmp_path / "m2.json", "--quiet")
    assert code == 4
    assert "non-finite" in capsys.readouterr().err


def test_bad_thread_setting(monkeypatch, tmp_path):
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    assert run("make-synthetic", "--out", tmp_path / "d.csv") == 1


# ---- configuration


def test_empty_config_gives_defaults(tmp_path):
    (tmp_path / "empty.conf").write_text("")
    c, sources = cli.resolve_config(cli.load_config(tmp_path / "empty.conf"))
    assert (c["k"], c["m"], c["n"], c["beta"]) == (5, 10, 10, 0.001)
    assert (c["missing"], c["bottom"], c["idle_timeout_s"]) == (0.5, 0.3, 120.0)
    assert (c["adapt_steps"], c["trials"], c["mode"]) == (10, 100, "exact")
    assert sources["k"] == "default"


def test_flags_override_file(tmp_path):
    (tmp_path / "a.conf").write_text("# comment\nk = 3\nbeta=0.01\n")
    c, sources = cli.resolve_config(cli.load_config(tmp_path / "a.conf"), {"k": "5"})
    assert c["k"] == 5 and sources["k"] == "flag"
    assert c["beta"] == 0.01 and sources["beta"] == "file"


def test_n_follows_m():
    c, sources = cli.resolve_config({"m": "20"})
    assert c["n"] == 20 and sources["n"] == "m"
    c, _ = cli.resolve_config({"m": "20", "n": "7"})
    assert c["n"] == 7


def test_unknown_key_and_type_mismatch(tmp_path):
    with pytest.raises(UsageError, match="'colour'"):
        cli.resolve_config({"colour": "red"})
    with pytest.raises(UsageError, match="'k'"):
        cli.resolve_config({"k": "five"})
    with pytest.raises(UsageError):
        cli.resolve_config({"k": 2.5})  # JSON float where an integer is needed
    (tmp_path / "bad.conf").write_text("just words\n")
    with pytest.raises(Exception, match="key=value"):
        cli.load_config(tmp_path / "bad.conf")


def test_json_manifest_is_a_config(tmp_path):
    doc = {"config": {"k": 4, "hidden": [32, 16], "test_classes": ["a", "b"]}, "timestamps": {}}
    (tmp_path / "m.json").write_text(json.dumps(doc))
    c, _ = cli.resolve_config(cli.load_config(tmp_path / "m.json"))
    assert c["k"] == 4 and c["hidden"] == [32, 16] and c["test_classes"] == ["a", "b"]


def test_every_training_default_is_in_the_schema():
    c, _ = cli.resolve_config()
    cfg = cli.train_config(c).to_dict()
    defaults = metasgd.TrainConfig().to_dict()
    assert cfg == defaults
    forest = cli.forest_config(c)
    assert (forest.n_trees, forest.max_depth, forest.min_split) == (c["trees"], c["max_depth"], c["min_split"])


# ---- subcommands


def test_extract_with_labels(tmp_path):
    pkts = [Pkt(0, "10.0.0.1", "10.0.0.2", 1000, 80, payload=10),
            Pkt(5, "10.0.0.2", "10.0.0.1", 80, 1000, payload=20),
            Pkt(9, "10.0.0.3", "10.0.0.2", 2000, 22, payload=1, flags=("RST",))]
    write_pcap(tmp_path / "c.pcap", pkts)
    (tmp_path / "labels.csv").write_text(
        "src_addr,src_port,dst_addr,dst_port,protocol,label\n10.0.0.2,22,10.0.0.3,2000,6,ssh-scan\n")
    assert run("extract", "--in", tmp_path / "c.pcap", "--out", tmp_path / "f.csv",
               "--labels", tmp_path / "labels.csv") == 0
    rows = (tmp_path / "f.csv").read_text().splitlines()
    assert rows[0].endswith(",label") and len(rows) == 3
    assert rows[1].endswith(",ssh-scan") and rows[2].endswith(",BENIGN")
    man = json.loads((tmp_path / "f.csv.run.json").read_text())
    assert man["results"]["flows"] == 2 and "pcap" in man["inputs"]
    assert len(man["inputs"]["pcap"]["sha256"]) == 64


def test_stepwise_commands(tmp_path, capsys):
    d = tmp_path / "d.csv"
    assert run("make-synthetic", "--out", d, "--synthetic-classes", 9, "--synthetic-normal", 500, "--seed", 1) == 0
    assert run("summary", "--data", d, "--out", tmp_path / "summary.json") == 0
    assert "normal (BENIGN): 500 flows" in capsys.readouterr().out
    assert run("select", "--in", d, "--out-manifest", tmp_path / "sel.json", "--trees", 10) == 0
    sel_manifest = json.loads((tmp_path / "sel.json.run.json").read_text())
    assert sel_manifest["preprocessing"]["medians"]
    assert run("meta-train", "--data", d, "--manifest", tmp_path / "sel.json", "--episodes", 20,
               "--patience", 0, "--hidden", "16", "--n-test", 3, "--out", tmp_path / "m.ckpt", "--quiet") == 0
    meta, header = metasgd.load_meta(tmp_path / "m.ckpt")
    test_class = header["split"]["test"][0]
    assert len(header["split"]["test"]) == 3 and header["train_config"]["episodes"] == 20
    assert run("adapt", "--ckpt", tmp_path / "m.ckpt", "--data", d, "--class", test_class,
               "--m", 10, "--steps", 5, "--out", tmp_path / "a.ckpt") == 0
    adapted, ah = metasgd.load_meta(tmp_path / "a.ckpt")
    assert ah["adapted_class"] == test_class and adapted.theta != meta.theta
    assert run("eval", "--ckpt", tmp_path / "m.ckpt", "--data", d, "--m", 10, "--trials", 4,
               "--out", tmp_path / "r.json", "--trials-csv", tmp_path / "t.csv", "--baseline") == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["protocol"] == "mshot" and set(report["variants"]) == {"pre_training", "fine_tuning", "from_scratch"}
    assert set(report["variants"]["fine_tuning"]["trial_classes"]) <= set(header["split"]["test"])
    assert run("adapt", "--ckpt", tmp_path / "m.ckpt", "--data", d, "--class", "BENIGN",
               "--out", tmp_path / "b.ckpt") == 3


def test_pipeline_smoke(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run("pipeline", "--config", SMOKE, "--quiet") == 0
    out = tmp_path / "run_smoke"
    for name in ("data.csv", "selection.json", "meta.ckpt", "adapted.ckpt", "report_m10.json",
                 "trials_m10.csv", "summary.json", "run_manifest.json", "train_log.jsonl"):
        assert (out / name).is_file(), name
    man = json.loads((out / "run_manifest.json").read_text())
    assert set(cli.SCHEMA) <= set(man["config"])
    assert set(man["config"]) == set(man["config_sources"])
    for key in ("tool_version", "subcommand", "inputs", "seeds", "preprocessing", "outer_mode",
                "hvp_method", "timestamps"):
        assert man[key], key
    assert man["preprocessing"]["means"] and man["preprocessing"]["stds"]
    assert man["outer_mode"] == "exact" and man["loss_reduction"] == "mean"
    assert man["outputs"]["checkpoint"]["sha256"]


def test_pipeline_with_cross_dataset(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run("pipeline", "--config", SMOKE, "--data-b", "synthetic", "--cross-m", 5, "--trials", 3,
               "--episodes", 10, "--quiet") == 0
    summary = json.loads((tmp_path / "run_smoke" / "summary.json").read_text())
    assert "cross" in summary and (tmp_path / "run_smoke" / "report_cross.json").is_file()


def test_pipeline_reproducible_from_manifest(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run("pipeline", "--config", SMOKE, "--episodes", 30, "--trials", 5, "--quiet") == 0
    shutil.copy("run_smoke/run_manifest.json", "origin.json")
    runs = []
    for i in range(2):
        assert run("pipeline", "--config", "origin.json", "--quiet") == 0
        runs.append(Path(shutil.copytree("run_smoke", f"copy{i}")))
    a, b = runs
    for name in ("meta.ckpt", "adapted.ckpt", "report_m10.json", "selection.json", "summary.json", "data.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    assert strip_timestamps(a / "run_manifest.json") == strip_timestamps(b / "run_manifest.json")
