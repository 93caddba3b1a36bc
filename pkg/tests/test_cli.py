import csv
import json

import numpy as np
import numpy.testing as npt
import pandas as pd
import pytest

from kanbeats.cli import main
from kanbeats.data import MarketSeries, ingest_csv
from kanbeats.experiment import ExperimentConfig, aggregate, format_table
from kanbeats.model import ModelConfig, init_model, load_model, save_model

TINY = """
lookback = 48
horizon = 24
n_stacks = 1
n_blocks = 2
hidden_dim = 8
grid_lo = -3.0
grid_hi = 3.0
batch_size = 64
"""


def write_config(path, body):
    path.write_text(body)
    return path


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--out", str(out), "--hours", "1500", "--seed", "7"]) == 0
    return out


def tiny_config(tmp_path, synth_dir, extra="", epochs=2):
    body = TINY + f"""
csv_m1 = "{synth_dir / 'm1.csv'}"
csv_m2 = "{synth_dir / 'm2.csv'}"
csv_m3 = "{synth_dir / 'm3.csv'}"
primary_market = "m1"
secondary_market = "m2"
target_market = "m3"
epochs = {epochs}
train_stride = 12
""" + extra
    return write_config(tmp_path / "cfg.toml", body)


def read_log(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_synth_writes_readable_csvs(synth_dir):
    files = sorted(p.name for p in synth_dir.glob("*.csv"))
    assert files == ["m1.csv", "m2.csv", "m3.csv"]
    s = ingest_csv(synth_dir / "m1.csv", "m1")
    assert len(s) == 1500
    assert (synth_dir / "m1.csv").read_text().startswith("timestamp,price\n2016-01-04T00:00:00Z,")


def test_train_two_epochs(tmp_path, synth_dir):
    cfg = tiny_config(tmp_path, synth_dir)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "checkpoint.kbc").exists()
    rows = read_log(tmp_path / "run" / "train_log.csv")
    assert len(rows) == 2
    assert list(rows[0]) == ["epoch", "forecast_loss", "domain_loss", "domain_accuracy", "lambda", "val_mae"]
    model, extras, meta = load_model(tmp_path / "run" / "checkpoint.kbc", with_extras=True)
    assert model.config.lookback == 48
    assert "classifier.hidden.weight" in extras
    assert meta["primary_market"] == "m1" and "m1" in meta["scalers"]


def test_same_seed_gives_identical_checkpoints(tmp_path, synth_dir):
    cfg = tiny_config(tmp_path, synth_dir, "classifier_steps = 2\n", epochs=1)
    for name in ("a", "b"):
        assert main(["train", "--config", str(cfg), "--seed", "3", "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "checkpoint.kbc").read_bytes() == (tmp_path / "b" / "checkpoint.kbc").read_bytes()
    assert main(["train", "--config", str(cfg), "--seed", "4", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "checkpoint.kbc").read_bytes() != (tmp_path / "c" / "checkpoint.kbc").read_bytes()


def test_lambda_zero_domain_accuracy_rises(tmp_path):
    # a clean daily sinusoid versus white noise: trivially separable domains
    stamps = pd.date_range("2020-01-01T00:00:00Z", periods=2000, freq="h")
    rng = np.random.default_rng(0)
    t = np.arange(2000)
    MarketSeries("A", stamps, 30 + 8 * np.sin(2 * np.pi * t / 24)).to_csv(tmp_path / "a.csv")
    MarketSeries("B", stamps, 30 + 8 * rng.normal(size=2000)).to_csv(tmp_path / "b.csv")
    cfg = write_config(tmp_path / "cfg.toml", TINY + f"""
csv_A = "{tmp_path / 'a.csv'}"
csv_B = "{tmp_path / 'b.csv'}"
primary_market = "A"
secondary_market = "B"
grl_lambda = 0.0
grl_schedule = "constant"
classifier_lr = 0.01
epochs = 4
train_stride = 4
""")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    rows = read_log(tmp_path / "run" / "train_log.csv")
    assert all(float(r["lambda"]) == 0.0 for r in rows)
    assert float(rows[-1]["domain_accuracy"]) > 0.8


def test_evaluate_outputs(tmp_path, synth_dir):
    cfg = tiny_config(tmp_path, synth_dir, epochs=1)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 0
    assert main(["evaluate", "--config", str(cfg), "--out", str(tmp_path / "run"),
                 "--test-start", "2016-02-20", "--test-end", "2016-02-25"]) == 0
    report = json.loads((tmp_path / "run" / "report.json").read_text())
    assert report["n_windows"] == 6
    assert report["mae"] > 0 and 0 < report["smape"] < 2
    assert "naive_persistence" in report
    fc = pd.read_csv(tmp_path / "run" / "forecast.csv")
    assert list(fc.columns) == ["date", "hour", "actual", "predicted"]
    assert len(fc) == 6 * 24
    assert sorted(fc["hour"].unique()) == list(range(24))
    # actuals are the raw target prices
    target = ingest_csv(synth_dir / "m3.csv", "m3").slice("2016-02-20", "2016-02-25")
    npt.assert_allclose(fc["actual"].to_numpy(), target.prices, atol=1e-6)


def test_perfect_oracle_on_constant_series(tmp_path):
    # zero forecast heads predict 0 in normalized units = the series mean
    model = init_model(ModelConfig(lookback=48, horizon=24, n_stacks=1, n_blocks=1, hidden_dim=4), seed=0)
    for name, arr in model.parameters().items():
        if "theta_f_head" in name:
            arr[...] = 0.0
    save_model(model, tmp_path / "oracle.kbc")
    stamps = pd.date_range("2020-01-01T00:00:00Z", periods=24 * 20, freq="h")
    MarketSeries("C", stamps, np.full(len(stamps), 42.5)).to_csv(tmp_path / "c.csv")
    assert main(["evaluate", "--checkpoint", str(tmp_path / "oracle.kbc"), "--target-csv",
                 str(tmp_path / "c.csv"), "--target-market", "C", "--out", str(tmp_path / "ev")]) == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["mae"] == 0.0 and report["smape"] == 0.0
    assert report["n_windows"] == 10


def test_evaluate_rejects_mismatched_config(tmp_path, synth_dir, capsys):
    model = init_model(ModelConfig(lookback=48, horizon=24, n_stacks=1, n_blocks=1, hidden_dim=4), seed=0)
    save_model(model, tmp_path / "m.kbc")
    cfg = write_config(tmp_path / "cfg.toml", f'lookback = 72\ncsv_m3 = "{synth_dir / "m3.csv"}"\n')
    code = main(["evaluate", "--config", str(cfg), "--checkpoint", str(tmp_path / "m.kbc"),
                 "--target-market", "m3", "--out", str(tmp_path / "ev")])
    assert code == 2
    assert "lookback" in capsys.readouterr().err


def test_matrix_one_leg(tmp_path, synth_dir):
    cfg = tiny_config(tmp_path, synth_dir, epochs=1)
    assert main(["matrix", "--config", str(cfg), "--out", str(tmp_path / "mx")]) == 0
    cells = pd.read_csv(tmp_path / "mx" / "matrix.csv")
    assert list(cells["variant"]) == ["kan", "proposed"]
    assert list(cells["primary"]) == ["m1", "m1"]
    legs = json.loads((tmp_path / "mx" / "matrix.json").read_text())["legs"]
    assert [leg["secondary"] for leg in legs] == [None, "m2"]
    table = (tmp_path / "mx" / "matrix.txt").read_text().splitlines()
    assert len(table) == 2 and table[1].split()[0] == "m1"


def test_aggregate_population_std():
    legs = [
        {"primary": "P", "variant": "kan", "status": "ok", "mae": 1.0, "smape": 0.1},
        {"primary": "P", "variant": "kan", "status": "ok", "mae": 3.0, "smape": 0.3},
        {"primary": "P", "variant": "proposed", "status": "failed"},
    ]
    rows = aggregate(legs)
    kan = rows[0]
    assert (kan["mae_mean"], kan["mae_std"]) == (2.0, 1.0)
    assert abs(kan["smape_std"] - 0.1) < 1e-15
    assert rows[1]["n_runs"] == 0
    text = format_table(rows, ["kan", "proposed"])
    assert "2.0000 ± 1.00" in text and "FAILED" in text


def test_dump_activations(tmp_path):
    model = init_model(ModelConfig(lookback=8, horizon=2, n_stacks=1, n_blocks=1, hidden_dim=3), seed=0)
    save_model(model, tmp_path / "m.kbc")
    out = tmp_path / "act.csv"
    assert main(["dump-activations", "--checkpoint", str(tmp_path / "m.kbc"), "--n-samples", "5",
                 "--output", str(out)]) == 0
    table = pd.read_csv(out)
    assert list(table.columns) == ["layer", "edge_out", "edge_in", "x", "phi"]
    # trunk0: 8 -> 3, trunk1: 3 -> 3
    assert len(table) == (3 * 8 + 3 * 3) * 5
    assert main(["dump-activations", "--checkpoint", str(tmp_path / "m.kbc"),
                 "--layer", "stack0.block0.trunk1", "--output", str(out)]) == 0
    assert set(pd.read_csv(out)["layer"]) == {"stack0.block0.trunk1"}
    assert main(["dump-activations", "--checkpoint", str(tmp_path / "m.kbc"),
                 "--layer", "nope", "--output", str(out)]) == 2


def test_exit_codes(tmp_path, synth_dir, capsys):
    bad_key = write_config(tmp_path / "bad.toml", "no_such_key = 1\n")
    assert main(["train", "--config", str(bad_key)]) == 2
    table = write_config(tmp_path / "table.toml", "[model]\nlookback = 3\n")
    assert main(["train", "--config", str(table)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.toml")]) == 2
    roles = write_config(tmp_path / "roles.toml", f'csv_m1 = "{synth_dir / "m1.csv"}"\nprimary_market = "m1"\n')
    assert main(["train", "--config", str(roles)]) == 2  # adversarial without a secondary

    broken = tmp_path / "broken.csv"
    broken.write_text("timestamp,price\n2020-01-01T00:00:00Z,1\n2020-01-01T01:00:00Z,oops\n")
    data = write_config(tmp_path / "data.toml", f'csv_X = "{broken}"\ncsv_Y = "{broken}"\n'
                        'primary_market = "X"\nsecondary_market = "Y"\n')
    assert main(["train", "--config", str(data)]) == 3
    assert "broken.csv:3" in capsys.readouterr().err

    (tmp_path / "junk.kbc").write_bytes(b"garbage!" * 4)
    assert main(["evaluate", "--checkpoint", str(tmp_path / "junk.kbc"), "--target-csv",
                 str(synth_dir / "m3.csv"), "--target-market", "m3", "--out", str(tmp_path)]) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path, synth_dir):
    cfg = tiny_config(tmp_path, synth_dir, "lr = 1e300\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")]) == 4


def test_config_lists_and_relative_paths(tmp_path):
    cfg = write_config(tmp_path / "c.toml", 'csv_FR = "data/fr.csv"\nmatrix_primaries = "FR, BE"\n'
                       'matrix_seeds = [1, 2]\nout_dir = "runs"\n')
    loaded = ExperimentConfig.load(cfg)
    assert loaded.csv_paths["FR"] == tmp_path / "data" / "fr.csv"
    assert loaded.matrix_primaries == ["FR", "BE"] and loaded.matrix_seeds == [1, 2]
    assert loaded.out_dir == tmp_path / "runs"
    assert loaded.train_range("PJM") == ("2013-01-01", "2018-12-24")


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit):
        main(["train", "--help"])
    text = capsys.readouterr().out
    assert "grl_lambda" in text and "csv_<MARKET>" in text and "exit codes" in text
