import csv
import json
from pathlib import Path

import numpy as np
import pytest

from parseg.cli import main
from parseg.core import PROV_PSEUDO, load_dataset
from parseg.metrics import REPORT_SCHEMA

TINY = {
    "synth": {"image_size": [32, 32], "num_organs": 3, "num_datasets": 2, "samples_per_dataset": 8, "val_fraction": 0.25},
    "stage1": {"epochs": 1, "batch_size": 4, "lr": 0.05, "momentum": 0.9, "depth": 2, "base_width": 4, "feature_dim": 8},
    "stage2": {"epochs": 1, "batch_size": 4, "lr": 0.05, "momentum": 0.9, "depth": 2, "base_width": 4, "feature_dim": 8},
}


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    data = root / "data"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data), "--seed", "3"]) == 0
    dirs = [str(data / "D1"), str(data / "D2")]
    assert main(["train-stage1", "--data", *dirs, "--config", str(cfg), "--out", str(root / "s1")]) == 0
    assert main(["gen-pseudo", "--models", str(root / "s1"), "--data", *dirs, "--out", str(root / "comb")]) == 0
    comb = [str(root / "comb" / "D1"), str(root / "comb" / "D2")]
    assert main(["train-stage2", "--data", *comb, "--config", str(cfg), "--out", str(root / "s2")]) == 0
    return {"root": root, "cfg": str(cfg), "data": dirs, "comb": comb}


def test_gen_data_layout_and_determinism(pipeline, tmp_path):
    d1 = Path(pipeline["data"][0])
    assert {p.name for p in d1.iterdir()} >= {"manifest.json", "images", "labels", "gt"}
    assert (d1.parent / "partition.json").exists()
    assert main(["gen-data", "--config", pipeline["cfg"], "--out", str(tmp_path / "again"), "--seed", "3"]) == 0
    assert tree_bytes(d1.parent) == tree_bytes(tmp_path / "again")


def test_gen_data_env_seed(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("PARSEG_SEED", "3")
    assert main(["gen-data", "--config", pipeline["cfg"], "--out", str(tmp_path / "env")]) == 0
    assert tree_bytes(Path(pipeline["data"][0]).parent) == tree_bytes(tmp_path / "env")
    monkeypatch.setenv("PARSEG_SEED", "x")
    assert main(["gen-data", "--config", pipeline["cfg"], "--out", str(tmp_path / "bad")]) == 2


def test_gen_data_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"synth": {"num_organs": 2, "num_datasets": 3}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "num_organs" in capsys.readouterr().err
    bad.write_text("{not json")
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    bad.write_text(json.dumps({"stage3": {}}))
    assert main(["gen-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["gen-data", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2


def test_gen_data_runtime_failure(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth": {"image_size": [12, 12], "num_organs": 6}}))
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_usage_errors():
    assert main([]) == 2
    assert main(["no-such-command"]) == 2


def test_train_stage1_outputs(pipeline):
    s1 = pipeline["root"] / "s1"
    assert (s1 / "P1.pt").exists() and (s1 / "P2.pt").exists()
    terms = {r["term"] for r in csv.DictReader((s1 / "losses.csv").open())}
    assert {"pd", "fd"} <= terms
    man = json.loads((s1 / "manifest.json").read_text())
    assert man["config"]["epochs"] == 1


def test_train_stage1_toggle_flags(pipeline, tmp_path):
    out = tmp_path / "off"
    assert main(["train-stage1", "--data", *pipeline["data"], "--config", pipeline["cfg"], "--out", str(out), "--no-pd", "--no-fd"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["config"]["toggles"]["pd"] is False and man["config"]["toggles"]["fd"] is False
    terms = {r["term"] for r in csv.DictReader((out / "losses.csv").open())}
    assert not {"pd", "fd"} & terms


def test_train_stage1_errors(pipeline, tmp_path):
    assert main(["train-stage1", "--data", pipeline["data"][0], str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert main(["train-stage1", "--data", pipeline["data"][0], "--out", str(tmp_path / "o")]) == 2
    assert main(["train-stage1", "--data", pipeline["data"][0], pipeline["data"][0], "--out", str(tmp_path / "o")]) == 2


def test_gen_pseudo_outputs(pipeline):
    for d in pipeline["comb"]:
        ds = load_dataset(d)
        assert ds.is_combined
        assert set(np.unique(ds.labels).tolist()) <= {0, 1, 2, 3}
    q = json.loads((pipeline["root"] / "comb" / "pseudo_quality.json").read_text())
    per_ds = {}
    for r in q["rows"]:
        per_ds[r["dataset"]] = per_ds.get(r["dataset"], 0) + 1
    assert per_ds == {"D1": 1, "D2": 2}  # D1 labels organs 1 and 3, D2 labels organ 2


def test_gen_pseudo_min_confidence(pipeline, tmp_path):
    out = tmp_path / "strict"
    args = ["gen-pseudo", "--models", str(pipeline["root"] / "s1"), "--data", *pipeline["data"], "--out", str(out)]
    assert main(args + ["--min-confidence", "1.01"]) == 0
    for name in ("D1", "D2"):
        assert not (load_dataset(out / name).provenance == PROV_PSEUDO).any()


def test_gen_pseudo_missing_model(pipeline, tmp_path):
    assert main(["gen-pseudo", "--models", str(tmp_path), "--data", *pipeline["data"], "--out", str(tmp_path / "o")]) == 2


def test_train_stage2_outputs(pipeline):
    man = json.loads((pipeline["root"] / "s2" / "manifest.json").read_text())
    assert man["selected_model"] in ("F1", "F2")
    assert man["config"]["toggles"] == {"pd": True, "fd": True, "ps": True, "fs_static": False, "dfs": True}


@pytest.mark.parametrize(
    "flags,expect",
    [
        ([], {"ps": True, "fs_static": False, "dfs": True}),
        (["--fs-static"], {"ps": True, "fs_static": True, "dfs": False}),
        (["--no-fs"], {"ps": True, "fs_static": False, "dfs": False}),
        (["--no-ps", "--no-fs"], {"ps": False, "fs_static": False, "dfs": False}),
    ],
)
def test_train_stage2_flag_rows(pipeline, tmp_path, flags, expect):
    out = tmp_path / "s2"
    assert main(["train-stage2", "--data", *pipeline["comb"], "--config", pipeline["cfg"], "--out", str(out), *flags]) == 0
    tg = json.loads((out / "manifest.json").read_text())["config"]["toggles"]
    assert {k: tg[k] for k in expect} == expect


def test_train_stage2_errors(pipeline, tmp_path):
    args = ["train-stage2", "--data", *pipeline["comb"], "--out", str(tmp_path / "o")]
    assert main(args + ["--fs-static", "--no-fs"]) == 2
    # uncombined datasets lack pseudo labels
    assert main(["train-stage2", "--data", *pipeline["data"], "--out", str(tmp_path / "o")]) == 2


def test_evaluate_reports(pipeline, tmp_path):
    jsonschema = pytest.importorskip("jsonschema")
    man = json.loads((pipeline["root"] / "s2" / "manifest.json").read_text())
    final = pipeline["root"] / "s2" / f"{man['selected_model']}.pt"
    out = tmp_path / "full.json"
    assert main(["evaluate", "--model", str(final), "--data", *pipeline["data"], "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    jsonschema.validate(rep, REPORT_SCHEMA)
    assert sorted(v["index"] for v in rep["organs"].values()) == [1, 2, 3]
    assert out.with_suffix(".txt").exists()
    part = tmp_path / "p1.json"
    assert main(["evaluate", "--model", str(pipeline["root"] / "s1" / "P1.pt"), "--data", *pipeline["data"], "--out", str(part)]) == 0
    assert sorted(v["index"] for v in json.loads(part.read_text())["organs"].values()) == [1, 3]


def test_evaluate_bad_model(pipeline, tmp_path):
    junk = tmp_path / "junk.pt"
    junk.write_bytes(b"nope")
    assert main(["evaluate", "--model", str(junk), "--data", *pipeline["data"], "--out", str(tmp_path / "r.json")]) == 2
    assert main(["evaluate", "--model", str(tmp_path / "absent.pt"), "--data", *pipeline["data"], "--out", str(tmp_path / "r.json")]) == 2


def test_export_features(pipeline, tmp_path):
    out = tmp_path / "f.csv"
    assert main(["export-features", "--model", str(pipeline["root"] / "s1" / "P1.pt"), "--data", pipeline["data"][0], "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert len(rows) == 1 + 8 and len(rows[0]) == 2 + 8


def test_ablate_counts_and_determinism(pipeline, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["ablate", "--config", pipeline["cfg"], "--out", str(a), "--seeds", "0,1"]) == 0
    rows = list(csv.reader((a / "ablation.csv").open()))
    assert rows[0] == ["stage", "row", "seed_0", "seed_1", "mean"]
    assert [r[1] for r in rows[1:]] == ["off", "pd", "pd+fd", "baseline", "ps", "ps+fs", "ps+dfs"]
    for r in rows[1:]:
        vals = [float(v) for v in r[2:4]]
        assert float(r[4]) == pytest.approx(sum(vals) / 2, abs=1e-6)
    log = [json.loads(line) for line in (a / "ablation_log.jsonl").read_text().splitlines()]
    assert len(log) == 2 * (3 + 4)
    assert main(["ablate", "--config", pipeline["cfg"], "--out", str(b), "--seeds", "0,1"]) == 0
    assert (a / "ablation.csv").read_bytes() == (b / "ablation.csv").read_bytes()


def test_ablate_bad_seeds(pipeline, tmp_path):
    assert main(["ablate", "--config", pipeline["cfg"], "--out", str(tmp_path), "--seeds", "1,x"]) == 2
    assert main(["ablate", "--config", pipeline["cfg"], "--out", str(tmp_path), "--seeds", "1,1"]) == 2
