import csv
import io

import numpy as np
import pytest

from vflmid.errors import ConfigError
from vflmid.harness.cli import main
from vflmid.harness.config import (ExperimentConfig, get_key, load_config, parse_config, serialize_config, set_key,
                                   with_override)
from vflmid.harness.sweep import (CSV_HEADER, ResultRow, mask_wall_ms, read_pgm, rows_to_csv, run_single, run_sweep,
                                  write_pgm)


def tiny(**over) -> ExperimentConfig:
    cfg = parse_config("dataset.n = 200\ndataset.dim = 8\ntrain.epochs = 2\ntrain.batch_size = 32\n")
    for k, v in over.items():
        set_key(cfg, k.replace("__", "."), v)
    return cfg


# ---------------------------------------------------------------- config

def test_config_round_trip():
    cfg = tiny(train__defense__kind="mid", train__defense__lam=3.0, attack__kind="dli", seeds=[1, 2])
    text = serialize_config(cfg)
    again = parse_config(text)
    assert serialize_config(again) == text
    assert again.train.defense.lam == 3.0 and again.seeds == [1, 2]


def test_config_comments_and_coercion():
    cfg = parse_config("# comment\n\ntrain.defense.lam = 2\ndataset.n = 300.0\n")
    assert isinstance(cfg.train.defense.lam, float) and cfg.dataset.n == 300


@pytest.mark.parametrize("text, needle", [
    ("nope.key = 1", "unknown config key"),
    ("dataset.n = \"many\"", "line 1"),
    ("dataset.n = 2.5", "integer"),
    ("dataset", "key = value"),
    ("dataset.kind = [1", "cannot parse"),
    ("train = 1", "section"),
])
def test_config_errors(text, needle):
    with pytest.raises(ConfigError, match=needle):
        parse_config(text)


def test_config_validation_rules():
    with pytest.raises(ConfigError):
        tiny(seeds=[]).validate()
    with pytest.raises(ConfigError):
        tiny(sweep__param="train.defense.lam").validate()
    with pytest.raises(ConfigError):
        tiny(dataset__kind="mnist").validate()


def test_with_override_leaves_original():
    cfg = tiny()
    other = with_override(cfg, "train.defense.lam", 5.0)
    assert get_key(other, "train.defense.lam") == 5.0 and cfg.train.defense.lam != 5.0


def test_load_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("dataset.classes = 3\n")
    assert load_config(p).dataset.classes == 3


# ---------------------------------------------------------------- sweeps and CSV

def test_single_run_row():
    rows = run_sweep(tiny(attack__kind="dli"))
    assert len(rows) == 1
    r = rows[0]
    assert r.attack == "dli" and r.defense == "none" and r.error == ""
    assert 0 <= r.main_acc <= 1 and r.attack_metric == 1.0


def test_sweep_row_count_and_order():
    cfg = tiny(train__defense__kind="mid", sweep__param="train.defense.lam", sweep__values=[0.0, 1.0, 10.0],
               seeds=[0, 1, 2, 3, 4])
    rows = run_sweep(cfg)
    assert len(rows) == 15
    assert [(r.sweep_value, r.seed) for r in rows] == [(v, s) for v in (0.0, 1.0, 10.0) for s in range(5)]


def test_csv_format():
    rows = [ResultRow("seed=0", 0, "", None, "none", "dli", 0.1 + 0.2, None, None, 3, 12, ""),
            ResultRow("seed=1", 1, "", None, "none", "cafe", 0.5, 99.0, 99.0, 3, 7, "ReconstructionDiverged: x")]
    text = rows_to_csv(rows)
    parsed = list(csv.reader(io.StringIO(text)))
    assert parsed[0] == CSV_HEADER
    assert parsed[1][6] == "0.30000000000000004" and parsed[1][7] == ""
    assert parsed[2][5] == "cafe!ReconstructionDiverged"
    masked = list(csv.reader(io.StringIO(mask_wall_ms(text))))
    assert all(r[-1] == "" for r in masked[1:]) and masked[0] == CSV_HEADER


def test_sweep_deterministic_across_workers():
    cfg = tiny(sweep__param="train.lr_local", sweep__values=[0.05, 0.1], seeds=[0, 1])
    a = rows_to_csv(run_sweep(cfg, threads=1))
    b = rows_to_csv(run_sweep(cfg, threads=2))
    assert mask_wall_ms(a) == mask_wall_ms(b)


def test_diverged_run_is_recorded(monkeypatch):
    from vflmid.errors import TrainingDiverged
    from vflmid.harness import sweep

    def boom(cfg, seed):
        raise TrainingDiverged(0, 1, float("nan"))
    monkeypatch.setattr(sweep, "run_experiment", boom)
    row = run_single(tiny(), 0)
    assert row.error.startswith("TrainingDiverged") and row.main_acc is None


def test_pgm_round_trip(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    write_pgm(tmp_path / "a.pgm", img)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == (3, 4) and np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


# ---------------------------------------------------------------- CLI

def test_cli_bound_degenerate(capsys):
    assert main(["bound", "--i-ht", "0", "--i-hptp", "0", "--m-count", "1"]) == 0
    assert capsys.readouterr().out.strip() == "0"


def test_cli_bound_terms(capsys):
    assert main(["bound", "--i-ht", "0.01", "--i-hptp", "0.01", "--card-t", "4", "--min-p", "0.5",
                 "--min-p-prime", "0.5", "--terms"]) == 0
    lines = capsys.readouterr().out.split()
    assert float(lines[0]) == pytest.approx(8.399651703557675)
    assert lines[1::2] == ["t1", "t2", "t3", "t4", "b0"]


def test_cli_bound_domain_error(capsys):
    assert main(["bound", "--min-p", "0"]) == 2
    assert "min_p" in capsys.readouterr().err


def test_cli_selftest(capsys):
    assert main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_cli_unknown_command():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code != 0


def test_cli_run_and_attack_eval(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(serialize_config(tiny(attack__kind="pmc", attack__finetune_epochs=20)))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out), "--seed", "3", "--save-checkpoint"]) == 0
    text = capsys.readouterr().out
    assert text.splitlines()[0] == ",".join(CSV_HEADER)
    assert (out / "results.csv").read_text() == text
    ckpt = out / "seed3_party1.ckpt"
    assert ckpt.exists()
    assert main(["attack-eval", "--config", str(cfg), "--seed", "3", "--checkpoint", str(ckpt)]) == 0
    row = capsys.readouterr().out.splitlines()[1].split(",")
    assert row[5] == "pmc" and 0 <= float(row[7]) <= 1


def test_cli_sweep(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text('train.epochs = 1\ndataset.n = 200\nsweep.param = "train.lr_local"\nsweep.values = [0.1, 0.2]\n'
                   'seeds = [0, 1]\n')
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o"), "--threads", "2"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 5


def test_cli_bad_config(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("dataset.nope = 1\n")
    assert main(["run", "--config", str(cfg)]) == 2
    assert "unknown config key" in capsys.readouterr().err
