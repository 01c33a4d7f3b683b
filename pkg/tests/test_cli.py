import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from dquant.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO, main
from dquant.config import ConfigError, ExperimentConfig, load_config, parse_config
from dquant.formats import load_tensor, save_tensor

TINY_MODEL = ["--set", "model.width=4", "--set", "model.res_blocks=1", "--set", "model.batch_size=8",
              "--set", "model.steps=3", "--set", "quantizer.D=2", "--set", "quantizer.M=2",
              "--set", "quantizer.K=8,8", "--set", "data.train_images=32", "--set", "data.test_images=8"]


def rows(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_capacity_row(tmp_path):
    assert main(["capacity", "--out", str(tmp_path), "--set", "quantizer.K=512", "--set", "quantizer.M=10"]) == 0
    r = rows(tmp_path / "capacity.csv")
    assert r[0] == ["K", "M", "cost", "capacity_nats", "capacity_bits"]
    assert r[1][:3] == ["512", "10", "5120"] and float(r[1][3]) == pytest.approx(62.383, abs=5e-4)
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["schema"] == 1 and s["mode"] == "capacity"
    assert s["results"]["rows"][0]["kl_constant"] == s["results"]["rows"][0]["capacity_nats"]


def test_flags_before_or_after_mode(tmp_path):
    assert main(["--seed", "4", "capacity", "--out", str(tmp_path / "a")]) == 0
    assert main(["capacity", "--seed", "4", "--out", str(tmp_path / "b")]) == 0
    assert json.loads((tmp_path / "b" / "summary.json").read_text())["seed"] == 4


def test_config_errors_have_their_own_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[quantizer]\nMM = 3\n")
    assert main(["capacity", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "unknown key 'MM'" in capsys.readouterr().err
    assert main(["capacity", "--set", "nosuch.x=1", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["capacity", "--set", "quantizer.M=zero", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["capacity", "--set", "quantizer.M", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["capacity", "--config", str(tmp_path / "missing.ini")]) == EXIT_IO
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == 2


def test_io_errors_exit_code(tmp_path, capsys):
    (tmp_path / "x.dqt").write_bytes(b"DQTENS01\x02")
    code = main(["posthoc", "--out", str(tmp_path / "o"), "--set", "data.source=files",
                 "--set", f"data.files={tmp_path}/*.dqt"])
    assert code == EXIT_IO
    assert "byte offset 9" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code(tmp_path):
    code = main(["train", "--out", str(tmp_path), "--set", "model.lr=1e30", *TINY_MODEL,
                 "--set", "model.steps=40"])
    assert code == EXIT_DIVERGED


def test_config_parsing():
    cfg = parse_config("[run]\nmode = train-dqae\n[quantizer]\nK = 32, 64\naxes = channel\n")
    assert cfg.run.mode == "train" and cfg.quantizer.K == (32, 64) and cfg.quantizer.axes == ("channel",)
    assert parse_config(cfg.to_ini()) == cfg
    for text in ["[nope]\n", "[run]\nmode = fly\n", "[model]\nuse_ema = maybe\n", "[data]\nchannel_redundancy = 2\n",
                 "[ablate]\nvariants = dq, pq\n"]:
        with pytest.raises(ConfigError):
            parse_config(text)
    with pytest.raises(ConfigError):
        ExperimentConfig().with_overrides(model={"widht": 3})


def test_reproducible_json_is_byte_identical(tmp_path):
    args = ["posthoc", "--reproducible", "--set", "data.count=12", "--set", "quantizer.K=8",
            "--set", "quantizer.M=4"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    a, b = (tmp_path / "a" / "summary.json").read_bytes(), (tmp_path / "b" / "summary.json").read_bytes()
    assert a == b and b"created" not in a
    assert main(["posthoc", "--set", "data.count=12", "--out", str(tmp_path / "c")]) == 0
    assert "created" in json.loads((tmp_path / "c" / "summary.json").read_text())


def test_echoed_config_reproduces_run(tmp_path):
    assert main(["train", "--seed", "3", "--reproducible", "--out", str(tmp_path / "a"), *TINY_MODEL]) == 0
    echoed = load_config(tmp_path / "a" / "config.ini")
    assert echoed.run.seed == 3 and echoed.model.width == 4
    assert main(["train", "--config", str(tmp_path / "a" / "config.ini"), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
    lines = (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3 and json.loads(lines[0])["step"] == 1
    assert (tmp_path / "a" / "checkpoint" / "params.dqp").exists()


def test_posthoc_channel_row_dominates(tmp_path):
    assert main(["posthoc", "--out", str(tmp_path), "--set", "data.count=64", "--set", "quantizer.K=32",
                 "--set", "quantizer.M=8", "--set", "quantizer.epochs=3"]) == 0
    r = {row[0]: row for row in rows(tmp_path / "posthoc.csv")[1:]}
    assert float(r["channel"][4]) < float(r["pixel"][4])
    assert float(r["channel"][5]) > float(r["pixel"][5])
    assert rows(tmp_path / "posthoc.csv")[0] == ["axis", "K", "M", "slice_dim", "l2_per_element",
                                                 "mean_entropy_nats"]


def test_synth_then_posthoc_on_files(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "s"), "--set", "data.count=10",
                 "--set", "data.shape=16,4,4"]) == 0
    files = sorted((tmp_path / "s" / "tensors").glob("*.dqt"))
    assert len(files) == 10 and load_tensor(files[0]).shape == (16, 4, 4)
    assert rows(tmp_path / "s" / "synth.csv")[0] == ["channel_redundancy", "mean_abs_corr"]
    assert main(["posthoc", "--out", str(tmp_path / "p"), "--set", "data.source=files",
                 "--set", f"data.files={tmp_path}/s/tensors/*.dqt", "--set", "quantizer.K=4",
                 "--set", "quantizer.M=4"]) == 0
    save_tensor(tmp_path / "s" / "tensors" / "zz.dqt", np.zeros((3, 4, 4)))
    assert main(["posthoc", "--out", str(tmp_path / "p"), "--set", "data.source=files",
                 "--set", f"data.files={tmp_path}/s/tensors/*.dqt"]) == EXIT_IO


def test_analyze_reports(tmp_path):
    assert main(["train", "--out", str(tmp_path / "t"), *TINY_MODEL]) == 0
    assert main(["analyze", "--out", str(tmp_path / "a"), *TINY_MODEL,
                 "--set", f"analyze.checkpoint={tmp_path}/t/checkpoint"]) == 0
    mi = rows(tmp_path / "a" / "mi.csv")
    assert mi[0] == ["level", "book_i", "book_j", "mi_nats"] and len(mi) == 1 + 2 * 3
    hier = rows(tmp_path / "a" / "hierarchy.csv")
    assert [r[0] for r in hier] == ["zeroed_level", "none", "0", "1"]
    info = json.loads((tmp_path / "a" / "info_level0.json").read_text())
    assert info["schema"] == 1 and len(info["per_book_entropy"]) == 2


def test_ablation_csv(tmp_path):
    assert main(["ablate", "--out", str(tmp_path), *TINY_MODEL, "--set", "ablate.M=1,2",
                 "--set", "ablate.K=8", "--set", "ablate.seeds=2", "--set", "ablate.variants=dq,vq"]) == 0
    runs = rows(tmp_path / "ablation_runs.csv")
    assert runs[0] == ["variant", "K", "M", "seed", "reconstruction", "mse", "bits_per_dim", "mean_entropy",
                       "mean_mi"]
    assert len(runs) == 1 + 2 * 2 * 2
    summary = rows(tmp_path / "ablation.csv")
    assert "reconstruction_median" in summary[0] and "reconstruction_mean" in summary[0]
    assert len(summary) == 1 + 4
    assert (tmp_path / "runs" / "vq_K8_M2_seed1" / "metrics.jsonl").exists()


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "dquant.cli", "capacity", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "capacity: wrote" in res.stdout
