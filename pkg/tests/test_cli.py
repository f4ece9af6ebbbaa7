import csv
import json

import numpy as np
import pytest

from tcrnn.cli import main, read_path_csv, write_path_csv
from tcrnn.datagen import benchmark_dataset
from tcrnn.pipeline import load_checkpoint, read_checkpoint

from helpers import small_path

BENCHMARK_DATA = {"synthetic": {"cycles": 2, "loading_strain": 1e-2, "unloading_strain": 5e-3,
                            "increments": [3.75e-5, 4.29e-5, 5e-5, 6e-5, 7.5e-5]}}
TINY_MODEL = {"hidden_dim": 3, "isv_dim": 1, "rnn_steps": 2, "energy_hidden": [3]}
TINY_TRAINING = {"epochs": 2, "noise_ratio": 0.3, "seed": 4}


def write_config(tmp_path, name="cfg.json", **sections):
    path = tmp_path / name
    path.write_text(json.dumps(sections))
    return str(path)


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    root = tmp_path_factory.mktemp("gen")
    cfg = write_config(root, data=BENCHMARK_DATA)
    assert main(["generate", "--config", cfg, "--out", str(root / "data")]) == 0
    return root / "data"


# generate ---------------------------------------------------------------------

def test_generate_writes_five_paths_and_manifest(generated):
    files = sorted(generated.glob("*.csv"))
    assert len(files) == 5
    manifest = json.loads((generated / "manifest.json").read_text())["paths"]
    assert [e["role"] for e in manifest].count("train") == 1
    train = [e for e in manifest if e["role"] == "train"][0]
    assert train["meta"]["strain_increment"] == 5e-5


def test_generated_csv_round_trips_exactly(generated):
    ref = benchmark_dataset()
    manifest = json.loads((generated / "manifest.json").read_text())["paths"]
    for entry, path in zip(manifest, ref):
        back = read_path_csv(generated / entry["file"])
        assert back.stress.tobytes() == path.stress.tobytes()
        assert back.strain.tobytes() == path.strain.tobytes()
        assert back.dissipation.tobytes() == path.dissipation.tobytes()
        assert back.reference_isv.tobytes() == path.reference_isv.tobytes()


def test_generate_is_byte_identical(tmp_path, generated):
    cfg = write_config(tmp_path, data=BENCHMARK_DATA)
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
    for f in generated.iterdir():
        assert (tmp_path / "again" / f.name).read_bytes() == f.read_bytes()


def test_zero_cycles_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, data={"synthetic": {"cycles": 0}})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "cycle" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = write_config(tmp_path, data=BENCHMARK_DATA, model={"hiden_dim": 3})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "hiden_dim" in capsys.readouterr().err


def test_two_data_sources_rejected(tmp_path):
    cfg = write_config(tmp_path, data={**BENCHMARK_DATA, "csv": {"files": ["*.csv"]}})
    assert main(["generate", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_missing_config_file(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "nope.json"), "--out",
                 str(tmp_path)]) == 2


# CSV ingest -------------------------------------------------------------------

def test_missing_column_is_named(tmp_path):
    f = tmp_path / "p.csv"
    f.write_text("t,eps_0\n0,0\n1,1e-4\n")
    with pytest.raises(ValueError, match="missing required column 'sig_0'"):
        read_path_csv(f)


def test_column_mapping(tmp_path):
    f = tmp_path / "shear.csv"
    f.write_text("time,gamma,tau\n0,0,0\n1,1e-3,2e3\n2,2e-3,3e3\n")
    p = read_path_csv(f, columns={"t": "time", "eps_0": "gamma", "sig_0": "tau"})
    np.testing.assert_array_equal(p.stress[:, 0], [0, 2e3, 3e3])
    assert p.name == "shear"


def test_csv_writer_round_trip(tmp_path):
    path = small_path(thermal=True)
    write_path_csv(path, tmp_path / "x.csv")
    back = read_path_csv(tmp_path / "x.csv")
    assert back.temperature.tobytes() == path.temperature.tobytes()
    assert back.entropy.tobytes() == path.entropy.tobytes()


# train / eval -----------------------------------------------------------------

def run_train(tmp_path, data_dir, out="run", seed=None):
    cfg = write_config(tmp_path, model=TINY_MODEL, training=TINY_TRAINING)
    argv = ["train", "--config", cfg, "--data", str(data_dir), "--out", str(tmp_path / out)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return main(argv), tmp_path / out


def test_train_smoke_and_outputs(tmp_path, generated):
    code, out = run_train(tmp_path, generated)
    assert code == 0
    hist = read_rows(out / "loss_history.csv")
    assert len(hist) == TINY_TRAINING["epochs"]
    data = read_checkpoint(out / "checkpoint.json")
    assert data["final_loss"] == float(hist[-1]["loss"])
    assert data["config_echo"]["seed"] == 4


def test_train_is_byte_identical(tmp_path, generated):
    _, a = run_train(tmp_path, generated, "a")
    _, b = run_train(tmp_path, generated, "b")
    for name in ("checkpoint.json", "loss_history.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_seed_flag_overrides_config(tmp_path, generated):
    _, a = run_train(tmp_path, generated, "a")
    _, b = run_train(tmp_path, generated, "b", seed=9)
    assert read_checkpoint(b / "checkpoint.json")["config_echo"]["seed"] == 9
    assert (a / "checkpoint.json").read_bytes() != (b / "checkpoint.json").read_bytes()


def test_missing_data_exits_two(tmp_path, capsys):
    code, _ = run_train(tmp_path, tmp_path / "nowhere")
    assert code == 2
    assert "data not found: " in capsys.readouterr().err


def test_csv_glob_data_source(tmp_path, generated):
    cfg = write_config(tmp_path, data={"csv": {"files": [str(generated / "*5e-05*.csv")]}},
                       model=TINY_MODEL, training={**TINY_TRAINING, "epochs": 1})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "g")]) == 0


def test_csv_glob_without_match(tmp_path, capsys):
    cfg = write_config(tmp_path, data={"csv": {"files": ["missing_*.csv"]}},
                       model=TINY_MODEL, training=TINY_TRAINING)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "g")]) == 2
    assert "data not found: " in capsys.readouterr().err


@pytest.mark.parametrize("variant", ["rate", "increment"])
def test_eval_outputs(tmp_path, generated, variant):
    cfg = write_config(tmp_path, model={**TINY_MODEL, "variant": variant},
                       training=TINY_TRAINING)
    assert main(["train", "--config", cfg, "--data", str(generated),
                 "--out", str(tmp_path / "m")]) == 0
    ckpt = str(tmp_path / "m" / "checkpoint.json")
    assert main(["eval", "--config", cfg, "--data", str(generated), "--checkpoint", ckpt,
                 "--out", str(tmp_path / "e")]) == 0
    summary = read_rows(tmp_path / "e" / "summary.csv")
    assert len(summary) == 5
    assert [r["role"] for r in summary].count("train") == 1
    ref = benchmark_dataset()
    for r, p in zip(summary, ref):
        trace = read_rows(tmp_path / "e" / f"trace_{r['path_id']}.csv")
        assert len(trace) == len(p)
        assert {"sig_hat_0", "free_energy_hat", "dissipation_hat", "isv_hat_0"} <= set(trace[0])
        assert np.isfinite(float(trace[-1]["dissipation_hat"]))


def test_eval_reports_the_same_error_as_the_library(tmp_path, generated):
    from tcrnn.evaluate import evaluate_paths
    code, out = run_train(tmp_path, generated)
    cfg = write_config(tmp_path, "e.json")
    assert main(["eval", "--config", cfg, "--data", str(generated), "--checkpoint",
                 str(out / "checkpoint.json"), "--out", str(tmp_path / "e")]) == 0
    model = load_checkpoint(out / "checkpoint.json")
    ds = benchmark_dataset()
    rep = evaluate_paths(model, ds[2:3], ["train"], traces=False)
    row = [r for r in read_rows(tmp_path / "e" / "summary.csv") if r["role"] == "train"][0]
    assert float(row["relative_error"]) == rep.paths[0].relative_error


def test_eval_dimension_mismatch(tmp_path, generated):
    code, out = run_train(tmp_path, generated)
    data = tmp_path / "d2"
    data.mkdir()
    (data / "p.csv").write_text("t,eps_0,eps_1,sig_0,sig_1\n0,0,0,0,0\n1,1,1,1,1\n2,2,1,2,1\n")
    (data / "manifest.json").write_text(json.dumps({"paths": [{"file": "p.csv"}]}))
    cfg = write_config(tmp_path, "e.json")
    assert main(["eval", "--config", cfg, "--data", str(data), "--checkpoint",
                 str(out / "checkpoint.json"), "--out", str(tmp_path / "e")]) == 2


def test_eval_missing_checkpoint(tmp_path, generated):
    cfg = write_config(tmp_path, "e.json")
    assert main(["eval", "--config", cfg, "--data", str(generated), "--checkpoint",
                 str(tmp_path / "none.json"), "--out", str(tmp_path / "e")]) == 2


# sweep ------------------------------------------------------------------------

def sweep_config(tmp_path, values, reps=1):
    return write_config(tmp_path, "s.json", model=TINY_MODEL,
                        training={**TINY_TRAINING, "epochs": 1},
                        sweep={"axis": "isv_dim", "values": values, "repetitions": reps})


def test_sweep_rows_and_resume(tmp_path, generated):
    cfg = sweep_config(tmp_path, [1, 2], reps=2)
    out = tmp_path / "sw"
    assert main(["sweep", "--config", cfg, "--data", str(generated), "--out", str(out)]) == 0
    rows = read_rows(out / "sweep_results.csv")
    assert len(rows) == 2 * 2 * 5
    assert list(rows[0]) == ["axis", "value", "seed", "path_id", "role", "relative_error",
                             "wall_s"]
    before = (out / "sweep_results.csv").read_bytes()
    assert main(["sweep", "--config", cfg, "--data", str(generated), "--out", str(out)]) == 0
    assert (out / "sweep_results.csv").read_bytes() == before


def test_interrupted_sweep_completes_missing_cells(tmp_path, generated):
    full = tmp_path / "full"
    cfg = sweep_config(tmp_path, [1, 2])
    assert main(["sweep", "--config", cfg, "--data", str(generated), "--out", str(full)]) == 0
    part = tmp_path / "part"
    part.mkdir()
    lines = (full / "sweep_results.csv").read_text().splitlines(keepends=True)
    (part / "sweep_results.csv").write_text("".join(lines[:6]))  # header + first cell
    assert main(["sweep", "--config", cfg, "--data", str(generated), "--out", str(part)]) == 0
    a, b = read_rows(full / "sweep_results.csv"), read_rows(part / "sweep_results.csv")
    assert len(b) == len(a)
    for ra, rb in zip(a, b):
        # wall-clock time is the one column that is not reproducible
        assert {k: v for k, v in ra.items() if k != "wall_s"} == \
               {k: v for k, v in rb.items() if k != "wall_s"}


def test_hidden_dim_sweep_values_accepted(tmp_path, generated):
    cfg = write_config(tmp_path, "h.json", model=TINY_MODEL,
                       training={**TINY_TRAINING, "epochs": 1},
                       sweep={"axis": "hidden_dim", "values": [5, 100], "repetitions": 1})
    out = tmp_path / "h"
    assert main(["sweep", "--config", cfg, "--data", str(generated), "--out", str(out)]) == 0
    assert {r["value"] for r in read_rows(out / "sweep_results.csv")} == {"5", "100"}


def test_bad_sweep_axis(tmp_path, generated):
    cfg = write_config(tmp_path, "b.json", sweep={"axis": "depth", "values": [1]})
    assert main(["sweep", "--config", cfg, "--data", str(generated),
                 "--out", str(tmp_path / "b")]) == 2
