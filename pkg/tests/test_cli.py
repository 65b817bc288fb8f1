import csv
import json
import shutil
import time

import pytest

from pinnopf.cli import (EXIT_CONFIG, EXIT_OK, ConfigError, hyper_grid, main, parse_config, substream)

SMOKE = """
case = case2
seed = 3
out_dir = run
n_samples = 40
epochs = 20
n_batches = 4
line_restarts = 2
line_pool = 16
"""

COMMANDS = ("gen-data", "train", "eval", "verify-gen", "verify-line", "sweep-domain", "export-model")


def write_config(path, text):
    path.write_text(text)
    return str(path)


def run_all(cfg):
    return [main([cmd, cfg]) for cmd in COMMANDS]


@pytest.mark.parametrize("text, match", [
    ("seed = 1\n", "missing mandatory key 'case'"),
    ("case = case2\n", "missing mandatory key 'seed'"),
    ("case = case2\nseed = 1\nbogus = 3\n", "unknown config keys: bogus"),
    ("case = case2\nseed = 1.5\n", "seed must be an integer"),
    ("case = case2\nseed = 1\ndelta = 0.3\n", "delta"),
    ("case = case2\nseed = 1\nmodels = ['cnn']\n", "unknown model kinds"),
    ("case = case2\nseed = 1\nweights = {'lambda_Q': 1}\n", "bad weights"),
    ("case = case2\nseed = 1\nfractions = {'train': 0.5}\n", "sum to 1"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_config_errors_exit_code(tmp_path, capsys):
    assert main(["gen-data", write_config(tmp_path / "c.cfg", "seed = 1\n")]) == EXIT_CONFIG
    assert main(["gen-data", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    cfg = write_config(tmp_path / "d.cfg", "case = nowhere\nseed = 1\n")
    assert main(["gen-data", cfg]) == EXIT_CONFIG
    cfg = write_config(tmp_path / "e.cfg", "case = case2\nseed = 1\n")
    assert main(["train", cfg]) == EXIT_CONFIG        # no dataset yet


def test_substreams_distinct():
    vals = {substream(7, s) for s in ("data", "init", "train", "verify")}
    assert len(vals) == 4 and substream(7, "data") == substream(7, "data")


def test_smoke_two_bus(tmp_path):
    cfg = write_config(tmp_path / "run.cfg", SMOKE)
    t0 = time.monotonic()
    assert run_all(cfg) == [EXIT_OK] * len(COMMANDS)
    assert time.monotonic() - t0 < 60
    out = tmp_path / "run"
    for name in ("dataset.csv", "model_nn.json", "model_pinn.json", "history_pinn.csv", "eval.csv",
                 "verify_gen_nn.json", "verify_line_pinn.json", "worst_case.csv", "sweep_domain.csv",
                 "verify_pinn_gen.lp"):
        assert (out / name).is_file(), name
    rows = list(csv.DictReader((out / "sweep_domain.csv").open()))
    assert len(rows) == 8
    for model in ("nn", "pinn"):
        vals = [float(r["v_g_mw"]) for r in rows if r["model"] == model]
        assert len(vals) == 4 and all(a >= b for a, b in zip(vals, vals[1:]))


def test_byte_determinism(tmp_path):
    dirs = []
    for k in ("a", "b"):
        d = tmp_path / k
        d.mkdir()
        run_all(write_config(d / "run.cfg", SMOKE))
        dirs.append(d / "run")
    files = sorted(p.name for p in dirs[0].iterdir())
    assert files == sorted(p.name for p in dirs[1].iterdir())
    for name in files:
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes(), name


def test_case14_split_and_percentage(tmp_path):
    cfg = write_config(tmp_path / "c14.cfg", "case = case14\nseed = 7\nout_dir = run\nn_samples = 200\n"
                                             "models = ['nn']\nepochs = 5\nn_batches = 4\n")
    assert main(["gen-data", cfg]) == EXIT_OK
    meta = json.loads((tmp_path / "run" / "dataset.csv.meta.json").read_text())
    from pinnopf.data import load_dataset
    ds = load_dataset(tmp_path / "run" / "dataset.csv")
    assert ds.counts() == {"collocation": 100, "train": 40, "test": 60}
    assert "sha256" in meta
    assert main(["train", cfg]) == EXIT_OK
    main(["verify-gen", cfg])
    rep = json.loads((tmp_path / "run" / "verify_gen_nn.json").read_text())
    assert rep["v_g_percent"] == pytest.approx(100 * rep["v_g_mw"] / 259.0, rel=1e-3)


def test_paired_seeds_and_hyper(tmp_path):
    text = SMOKE + "seeds = [1, 2]\nhyper_grid = {'lambda_P': [1], 'lambda_V': [1], 'lambda_L': [0.1], " \
                   "'lambda_eps': [0, 0.01, 0.1]}\nhyper_epochs = 5\n"
    cfg = write_config(tmp_path / "run.cfg", text)
    for cmd in ("gen-data", "train", "eval", "sweep-hyper"):
        assert main([cmd, cfg]) == EXIT_OK
    out = tmp_path / "run"
    assert (out / "model_pinn-s2.json").is_file()
    assert (out / "paired.csv").read_text().rstrip().splitlines()[-1].startswith("# pinn_le_nn ")
    rows = list(csv.DictReader((out / "sweep_hyper.csv").open()))
    assert len(rows) == 2 and sum(int(r["selected"]) for r in rows) == 1
    sel = json.loads((out / "hyper_selected.json").read_text())
    best = min(rows, key=lambda r: float(r["val_mae_t"]))
    assert sel["weights"]["lambda_eps"] == float(best["lambda_eps"]) and best["selected"] == "1"
    assert len(hyper_grid(parse_config(text))) == 2


def test_relative_case_path(tmp_path):
    from pinnopf.grid import case_to_text, load_case
    (tmp_path / "mine.m").write_text(case_to_text(load_case("case2")))
    cfg = write_config(tmp_path / "r.cfg", "case = mine.m\nseed = 1\nn_samples = 10\n")
    assert main(["gen-data", cfg]) == EXIT_OK
    shutil.rmtree(tmp_path / "out")
