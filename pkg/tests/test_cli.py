import json
import subprocess
import sys

import numpy as np
import pytest

from snapml import datasets as dsm
from snapml.cli import COMMANDS, main
from snapml.fixedpoint import import_weights
from snapml.networks import load_model

FAST = ["--steps", "64", "--grid", "8"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """generate -> preprocess -> train, shared by the downstream command tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--angles", "6", "--max-iters", "30", "--restarts", "0",
                 "--out", str(root / "ds"), *FAST]) == 0
    assert main(["preprocess", "--data", str(root / "ds"), "--threshold", "1", "--window", "2",
                 "--fractions", "0.5", "0.25", "0.25", "--out", str(root / "pp"), *FAST]) == 0
    assert main(["train", "--data", str(root / "pp"), "--widths", "1-6-32", "--epochs", "3",
                 "--out", str(root / "train")]) == 0
    return root


def manifest(path):
    return json.loads((path / "manifest.json").read_text())


def test_generate_contract(pipeline):
    ds = dsm.load(pipeline / "ds" / "dataset.csv")
    assert len(ds) == 6 and ds.meta["steps"] == 64
    m = manifest(pipeline / "ds")
    assert m["command"] == "generate" and m["seeds"] == {"seed": 0}
    assert str(pipeline / "ds" / "dataset.csv") in m["outputs"]
    assert m["config"]["angles"] == 6 and m["version"]


def test_preprocess_writes_splits_with_scale(pipeline):
    parts = [dsm.load(pipeline / "pp" / f"{n}.csv") for n in ("train", "val", "test")]
    assert sum(len(p) for p in parts) == 6
    assert parts[0].meta["scale"] == parts[2].meta["scale"] == dsm.target_scale(parts[0])


def test_evaluate_contract(pipeline, capsys):
    out = pipeline / "eval"
    code, text, _ = run(capsys, "evaluate", "--model", pipeline / "train" / "model.json", "--out", out, *FAST)
    assert code == 0
    mean, mx = (float(tok.split("=")[1]) for tok in text.split())
    assert text.startswith("mean=") and 0 <= mean <= mx <= 1
    prof = np.loadtxt(out / "profile.csv", delimiter=",", skiprows=1)
    assert prof.shape == (8, 2)
    assert np.isclose(prof[:, 1].mean(), mean, rtol=1e-6)


def test_train_is_deterministic(pipeline, capsys):
    code, _, _ = run(capsys, "train", "--data", pipeline / "pp", "--widths", "1-6-32", "--epochs", "3",
                     "--out", pipeline / "train2")
    assert code == 0
    a = (pipeline / "train" / "model.json").read_bytes()
    assert a == (pipeline / "train2" / "model.json").read_bytes()


def test_config_file_precedence(pipeline, capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 2, "widths": "1-4-32"}))
    code, _, _ = run(capsys, "train", "--data", pipeline / "pp", "--config", cfg, "--epochs", "4",
                     "--out", tmp_path / "o")
    assert code == 0
    m = manifest(tmp_path / "o")
    assert m["config"]["epochs"] == 4 and m["config"]["widths"] == "1-4-32"
    cfg.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", str(pipeline / "pp"), "--config", str(cfg), "--out", str(tmp_path / "o2")])
    assert exc.value.code == 2


def test_model_commands(pipeline, capsys):
    pp, model = pipeline / "pp", pipeline / "train" / "model.json"
    assert run(capsys, "finetune", "--model", model, "--rounds", "1", "--out", pipeline / "ft", *FAST)[0] == 0
    assert load_model(pipeline / "ft" / "model.json").n_params == load_model(model).n_params
    assert run(capsys, "moe", "--data", pp, "--widths", "1-4-32", "--experts", "2", "--epochs", "2",
               "--out", pipeline / "moe")[0] == 0
    assert load_model(pipeline / "moe" / "model.json").kind == "moe"
    assert run(capsys, "mr", "--data", pp, "--widths", "1-4-32", "--epochs", "2", "--out", pipeline / "mr")[0] == 0
    assert run(capsys, "distill", "--model", pipeline / "moe" / "model.json", "--n", "40",
               "--out", pipeline / "dist")[0] == 0
    dist = dsm.load(pipeline / "dist" / "dataset.csv")
    teacher = load_model(pipeline / "moe" / "model.json")
    assert len(dist) == 40 and np.array_equal(dist.theta, teacher.forward(dist.alpha))
    code, text, _ = run(capsys, "dse", "--data", pp, "--configs", "3", "--depth", "1", "2", "--width", "4", "6",
                        "--epochs", "1", "--out", pipeline / "dse")
    assert code == 0 and "configs=3" in text
    assert (pipeline / "dse" / "results.csv").exists() and (pipeline / "dse" / "pareto.csv").exists()


def test_quantize_trace_export(pipeline, capsys):
    model = pipeline / "train" / "model.json"
    assert run(capsys, "quantize", "--model", model, "--data", pipeline / "pp", "--frac-bits", "6",
               "--epochs", "2", "--out", pipeline / "q")[0] == 0
    qm = import_weights(pipeline / "q" / "qmodel.json")
    assert qm.quant.weight.frac_bits == 6
    code, text, _ = run(capsys, "trace", "--model", pipeline / "q" / "qmodel.json", "--out", pipeline / "tr",
                        "--grid", "16")
    assert code == 0 and text.count("layer=") == 2
    rows = np.loadtxt(pipeline / "tr" / "trace.csv", delimiter=",", skiprows=1)
    assert rows.shape == (2, 6)
    assert run(capsys, "export", "--model", model, "--frac-bits", "4", "--out", pipeline / "ex")[0] == 0
    assert import_weights(pipeline / "ex" / "weights.json").quant.weight.total_bits == 5
    assert run(capsys, "quantize", "--data", pipeline / "pp", "--widths", "1-4-32", "--frac-bits", "3",
               "--epochs", "1", "--out", pipeline / "q2")[0] == 0
    assert import_weights(pipeline / "q2" / "qmodel.json").config.layer_widths == (1, 4, 32)
    code, _, err = run(capsys, "trace", "--model", model, "--out", pipeline / "tr2")
    assert code == 1 and "quantized" in err


def test_plots_emit_svg_and_table(pipeline, capsys):
    out = pipeline / "plots"
    assert run(capsys, "plot", "heatmap", "--data", pipeline / "ds", "--out", out)[0] == 0
    assert run(capsys, "evaluate", "--model", pipeline / "train" / "model.json", "--out", pipeline / "ev",
               *FAST)[0] == 0
    assert run(capsys, "plot", "infidelity", "--data", pipeline / "ev" / "profile.csv", "--out", out)[0] == 0
    assert run(capsys, "dse", "--data", pipeline / "pp", "--configs", "2", "--epochs", "1", "--evaluate",
               "--out", pipeline / "dse2", *FAST)[0] == 0
    assert run(capsys, "plot", "pareto", "--data", pipeline / "dse2", "--out", out)[0] == 0
    for kind in ("heatmap", "infidelity", "pareto"):
        svg = (out / f"{kind}.svg").read_text()
        assert svg.lstrip().startswith("<?xml") and "<svg" in svg
        assert (out / f"{kind}.csv").exists()
    table = np.loadtxt(out / "heatmap.csv", delimiter=",", skiprows=1)
    assert table.shape == (6, 33)
    first = (out / "heatmap.svg").read_bytes()
    run(capsys, "plot", "heatmap", "--data", pipeline / "ds", "--out", out)
    assert (out / "heatmap.svg").read_bytes() == first


def test_missing_input_exits_1(tmp_path, capsys):
    code, _, err = run(capsys, "evaluate", "--model", tmp_path / "nope.json", "--out", tmp_path)
    assert code == 1 and str(tmp_path / "nope.json") in err


def test_usage_errors_exit_2(tmp_path):
    for argv in (["train", "--bogus"], ["frobnicate"], [], ["plot", "bar", "--data", "x"]):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2


def test_entry_point_process(tmp_path):
    res = subprocess.run([sys.executable, "-m", "snapml.cli", "evaluate", "--model", str(tmp_path / "m.json"),
                          "--out", str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 1 and "input not found" in res.stderr
    res = subprocess.run([sys.executable, "-m", "snapml.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and all(c in res.stdout for c in COMMANDS)
