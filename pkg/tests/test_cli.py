import json
import subprocess
import sys

import pytest

from synthpersist import io as dbio
from synthpersist.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main


@pytest.fixture(scope="module")
def small_db(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "db.csv"
    assert main(["generate", "--subjects", "60", "--band1", "4", "--band4", "6", "--seed", "42", "--out", str(out)]) == 0
    return out


def test_generate_writes_file_and_sidecar(small_db):
    assert small_db.exists()
    side = json.loads(dbio.sidecar_path(small_db).read_text())
    assert side["master_seed"] == 42
    assert side["n_features"] == 10
    assert side["format_version"] == 1
    assert {f["band"] for f in side["features"]} == {"Band1", "Band4"}


def test_generate_is_deterministic(small_db, tmp_path):
    again = tmp_path / "again.csv"
    main(["generate", "--subjects", "60", "--band1", "4", "--band4", "6", "--seed", "42", "--out", str(again)])
    assert again.read_bytes() == small_db.read_bytes()
    assert dbio.sidecar_path(again).read_bytes() == dbio.sidecar_path(small_db).read_bytes()


def test_verify_ok(small_db, capsys):
    assert main(["verify", str(small_db)]) == EXIT_OK
    assert "OK: 10 features" in capsys.readouterr().out


def test_verify_tampered_sidecar(small_db, tmp_path, capsys):
    db = tmp_path / "t.csv"
    db.write_bytes(small_db.read_bytes())
    side = json.loads(dbio.sidecar_path(small_db).read_text())
    side["features"][3]["achieved_icc"] += 0.01
    dbio.sidecar_path(db).write_text(json.dumps(side))
    assert main(["verify", str(db)]) == EXIT_DATA
    assert "f0004" in capsys.readouterr().err


def test_verify_tampered_values(small_db, tmp_path, capsys):
    db = tmp_path / "v.csv"
    lines = small_db.read_text().splitlines()
    cells = lines[1].split(",")
    cells[4] = "3.5"  # third feature of subject 1, session 1
    lines[1] = ",".join(cells)
    db.write_text("\n".join(lines) + "\n")
    dbio.sidecar_path(db).write_bytes(dbio.sidecar_path(small_db).read_bytes())
    with pytest.warns(dbio.ZScoreWarning):
        code = main(["verify", str(db)])
    assert code == EXIT_DATA
    assert "f0003" in capsys.readouterr().err


def test_verify_without_sidecar(small_db, tmp_path):
    db = tmp_path / "bare.csv"
    db.write_bytes(small_db.read_bytes())
    assert main(["verify", str(db)]) == EXIT_DATA


def test_icc_table(small_db, tmp_path, capsys):
    assert main(["icc", str(small_db)]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("feature,icc,raw_icc,label,band")
    assert len(out) == 11
    assert out[-1].split(",")[3] == "Excellent" or out[-1].split(",")[3] == "Good"
    table = tmp_path / "icc.csv"
    assert main(["icc", str(small_db), "--out", str(table)]) == EXIT_OK
    assert len(table.read_text().splitlines()) == 11


def test_evaluate(small_db, tmp_path, capsys):
    prefix = tmp_path / "ev"
    assert main(["evaluate", str(small_db), "--band", "Band4", "--out", str(prefix)]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    side = json.loads(dbio.sidecar_path(small_db).read_text())
    expected = [dbio.feature_name(f["feature_index"]) for f in side["features"] if f["band"] == "Band4"]
    assert payload["features"] == expected and len(expected) == 6
    assert 0 <= payload["eer"] <= 1
    assert payload["n_genuine"] == 60 and payload["n_impostor"] == 60 * 59
    assert (tmp_path / "ev.csv").exists() and (tmp_path / "ev.json").exists()


def test_evaluate_feature_list_and_sampling(small_db, capsys):
    assert main(["evaluate", str(small_db), "--features", "f0001,2", "--impostor-sample", "100",
                 "--metric", "cosine"]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["features"] == ["f0001", "f0002"]
    assert payload["n_impostor"] == 100
    assert payload["metric"] == "cosine"


def test_evaluate_count(small_db, capsys):
    assert main(["evaluate", str(small_db), "--count", "3", "--subset-seed", "5"]) == EXIT_OK
    assert len(json.loads(capsys.readouterr().out)["features"]) == 3
    assert main(["evaluate", str(small_db), "--count", "30"]) == EXIT_USAGE


def test_intercorr(small_db, tmp_path, capsys):
    prefix = tmp_path / "ic"
    assert main(["intercorr", str(small_db), "--out", str(prefix)]) == EXIT_OK
    payload = json.loads(capsys.readouterr().out)
    assert payload["n_pairs"] == 45
    rows = (tmp_path / "ic.csv").read_text().splitlines()
    assert rows[0] == "bin_low,bin_high,count" and len(rows) == 101


def test_experiment_from_config(tmp_path):
    cfg = tmp_path / "fig5.cfg"
    cfg.write_text(
        "[experiment]\nprotocol = feature_sweep\nseed = 1\nn_subjects = 40\n"
        "bands = Band3, Band4\npool_size = 10\nfeature_counts = 2, 5\nreplicates = 3\n"
    )
    assert main(["experiment", str(cfg)]) == EXIT_OK
    table = (tmp_path / "fig5.result.csv").read_text().splitlines()
    assert table[0].startswith("band,n_subjects,feature_count,median_eer")
    assert len(table) == 5
    payload = json.loads((tmp_path / "fig5.result.json").read_text())
    assert payload["provenance"]["seed"] == 1


def test_experiment_icc_histogram_writes_database(tmp_path):
    cfg = tmp_path / "h.json"
    cfg.write_text(json.dumps({"protocol": "icc_histogram", "seed": 3, "n_subjects": [50], "quotas": {"Band2": 5}}))
    assert main(["experiment", str(cfg), "--out", str(tmp_path / "h")]) == EXIT_OK
    assert (tmp_path / "h.db.csv").exists()
    assert main(["verify", str(tmp_path / "h.db.csv")]) == EXIT_OK


def test_experiment_preset_needs_seed(tmp_path):
    assert main(["experiment", "--preset", "fig4"]) == EXIT_USAGE
    assert main(["experiment"]) == EXIT_USAGE


def test_experiment_bad_config_is_data_error(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"protocol": "feature_sweep", "seed": 1, "mystery": 2}))
    assert main(["experiment", str(cfg)]) == EXIT_DATA


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["generate", "--subjects", "10"],
        ["generate", "--subjects", "10", "--seed", "1", "--out", "x.csv", "--bogus"],
        ["generate", "--subjects", "0", "--seed", "1", "--out", "x.csv"],
        ["generate", "--subjects", "10", "--seed", "-3", "--out", "x.csv"],
        ["evaluate", "db.csv", "--features", "1", "--count", "2"],
    ],
)
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert capsys.readouterr().err


def test_missing_database_is_data_error(tmp_path):
    assert main(["icc", str(tmp_path / "missing.csv")]) == EXIT_DATA


def test_help_exits_zero(capsys):
    assert main(["--help"]) == EXIT_OK
    assert "generate" in capsys.readouterr().out


def test_module_entry_point(tmp_path):
    out = tmp_path / "m.csv"
    proc = subprocess.run(
        [sys.executable, "-m", "synthpersist", "generate", "--subjects", "20", "--band3", "2",
         "--seed", "9", "--out", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert out.exists()


@pytest.mark.parametrize("workers", [4, 16])
def test_generate_identical_across_workers(tmp_path, workers):
    base = tmp_path / "w1.csv"
    other = tmp_path / f"w{workers}.csv"
    args = ["generate", "--subjects", "100", "--band1", "20", "--band2", "20", "--band3", "20", "--band4", "20",
            "--seed", "5"]
    assert main([*args, "--workers", "1", "--out", str(base)]) == EXIT_OK
    assert main([*args, "--workers", str(workers), "--out", str(other)]) == EXIT_OK
    assert base.read_bytes() == other.read_bytes()
    assert dbio.sidecar_path(base).read_bytes() == dbio.sidecar_path(other).read_bytes()
