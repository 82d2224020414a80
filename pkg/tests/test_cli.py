import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from haloscope import cli, io, simgen

RATE = 100_000


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    cfg = {
        "sample_rate": RATE,
        "generate": {
            "train_seconds": 38,
            "validation_seconds": 12,
            "science_seconds": 300,
            "schedule": simgen.band_schedule(1_000, 30_000, 38).to_dict(),
        },
        "limit": {"f_lo": 2e4, "f_hi": 4e4, "n_masses": 40},
        "band": {"n_trials": 100},
    }
    path = tmp_path_factory.mktemp("cfg") / "config.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, config_path):
    out = tmp_path_factory.mktemp("data")
    rc = cli.main(["generate", "--config", str(config_path), "--output-dir", str(out), "--quiet"])
    assert rc == 0
    return out


def test_generate_layout(dataset):
    names = sorted(p.name for p in dataset.iterdir())
    for stem in ("train_000.tsd", "validation_000.tsd", "science_000.tsd", "manifest.json"):
        assert stem in names
        assert stem + ".prov.json" in names or stem == "manifest.json"
    h = io.read_header(dataset / "train_000.tsd")
    assert h.n_channels == 2 and h.channel_lengths == (38 * RATE, 38 * RATE)
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert {f["split"] for f in manifest["files"]} == {"train", "validation", "science"}
    prov = json.loads((dataset / "train_000.tsd.prov.json").read_text())
    assert {"config_sha256", "config", "seeds", "versions"} <= set(prov)
    assert "timestamp" not in json.dumps(prov)


def test_generate_refuses_overwrite_then_reproduces(dataset, config_path, capsys):
    argv = ["generate", "--config", str(config_path), "--output-dir", str(dataset), "--quiet",
            "--science-files", "0"]
    before = (dataset / "train_000.tsd").read_bytes()
    assert cli.main(argv) == 3
    assert "use --force" in capsys.readouterr().err
    assert cli.main(argv + ["--force"]) == 0
    assert (dataset / "train_000.tsd").read_bytes() == before


def test_generate_big_data_guard(tmp_path, capsys):
    rc = cli.main(["generate", "--output-dir", str(tmp_path), "--science-files", "3", "--quiet"])
    assert rc == 2
    err = capsys.readouterr().err
    assert "--big-data" in err and "833.82" in err
    assert not any(tmp_path.iterdir())


def test_denoise_none_is_bit_identical(dataset, tmp_path):
    out = tmp_path / "copy.tsd"
    assert cli.main(["denoise", str(dataset / "train_000.tsd"), str(out), "--kind", "none"]) == 0
    assert out.read_bytes() == (dataset / "train_000.tsd").read_bytes()
    assert (tmp_path / "copy.tsd.prov.json").exists()


def test_score_raw_is_one(dataset, tmp_path, capsys):
    rc = cli.main(["score", str(dataset / "train_000.tsd"), "--output-dir", str(tmp_path), "--quiet"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "fine score: 1.0000" in out
    coarse = json.loads((tmp_path / "score_coarse.json").read_text())
    assert coarse["n_segments"] == 4  # ceil(38 / 10)
    fine = json.loads((tmp_path / "score_fine.json").read_text())
    assert fine["n_segments"] == 38 and fine["score"] == pytest.approx(1.0, abs=1e-12)


def test_denoise_then_score(dataset, tmp_path, capsys):
    src = dataset / "validation_000.tsd"
    dst = tmp_path / "ma.tsd"
    assert cli.main(["denoise", str(src), str(dst), "--kind", "moving_average", "--quiet"]) == 0
    h = io.read_header(dst)
    assert h.sample_format is io.SampleFormat.REAL32 and h.n_channels == 2
    rc = cli.main(["score", str(dst), "--raw", str(src), "--mode", "fine",
                   "--output-dir", str(tmp_path), "--quiet"])
    assert rc == 0
    rep = json.loads((tmp_path / "score_fine.json").read_text())
    assert rep["score"] < 1.0
    assert cli.main(["export", "score", str(tmp_path / "score_fine.json"), str(tmp_path / "s.csv")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 12 and "snr_squid" in rows[0]


def test_noise_grid(dataset, tmp_path):
    rc = cli.main(["score", str(dataset / "validation_000.tsd"), "--mode", "fine", "--noise-grid",
                   "--output-dir", str(tmp_path), "--quiet"])
    assert rc == 0
    grid = json.loads((tmp_path / "score_grid.json").read_text())
    assert np.shape(grid["scores"]) == (5, 5)
    assert cli.main(["export", "score-grid", str(tmp_path / "score_grid.json"), str(tmp_path / "g.csv")]) == 0
    assert (tmp_path / "g.csv").read_text().startswith("amplitude,sigma=1")


def test_missing_external_command(dataset, tmp_path, capsys):
    rc = cli.main(["denoise", str(dataset / "validation_000.tsd"), str(tmp_path / "x.tsd"),
                   "--kind", "external", "--command", "no-such-denoiser", "--quiet"])
    assert rc == 3
    assert "not found" in capsys.readouterr().err


def test_external_failure_names_segment(dataset, tmp_path, capsys, script):
    cmd = " ".join(script("failing.py"))
    rc = cli.main(["denoise", str(dataset / "validation_000.tsd"), str(tmp_path / "x.tsd"),
                   "--kind", "external", "--command", cmd, "--quiet"])
    assert rc == 3
    err = capsys.readouterr().err
    assert "segment 0" in err and "status 7" in err


def test_limit_refuses_short_run(dataset, tmp_path, capsys):
    rc = cli.main(["limit", str(dataset / "train_000.tsd"), "--output-dir", str(tmp_path), "--quiet"])
    assert rc == 3
    assert "at least 300 s" in capsys.readouterr().err


def test_limit_and_band(dataset, config_path, tmp_path):
    rc = cli.main(["limit", str(dataset / "science_000.tsd"), "--config", str(config_path),
                   "--output-dir", str(tmp_path), "--quiet", "--band"])
    assert rc == 0
    with open(tmp_path / "limit.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["mass_ev", "frequency_hz", "a95", "g95", "ts_at_zero"]
    assert len(rows) == 40 and all(np.isfinite(float(r["g95"])) for r in rows)
    for name in ("psd.npz", "limit.json", "band.csv", "band.json"):
        assert (tmp_path / name).exists() and (tmp_path / (name + ".prov.json")).exists()
    band = json.loads((tmp_path / "band.json").read_text())
    assert band["n_averaged"] == 30 and band["n_trials"] == 100
    assert cli.main(["export", "limit", str(tmp_path / "limit.json"), str(tmp_path / "l.csv")]) == 0
    assert cli.main(["export", "psd", str(tmp_path / "psd.npz"), str(tmp_path / "p.csv")]) == 0
    assert (tmp_path / "p.csv").read_text().startswith("frequency_hz,power")


def test_band_needs_n_averaged(tmp_path):
    assert cli.main(["band", "--output-dir", str(tmp_path)]) == 2


def test_bad_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["band", "--config", str(bad)]) == 2


def test_console_script_version():
    res = subprocess.run([sys.executable, "-m", "haloscope.cli", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and "0.1.0" in res.stdout
