import json
import struct

import numpy as np
import pytest

from firescope import firecli, raster_store as rs, train_engine as te


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert firecli.main(["ingest", "--synthetic", "8", "--size", "16", "-o", str(d / "d.fpc")]) == 0
    assert firecli.main(["train-fcn", str(d / "d.fpc"), "--out", str(d / "run"),
                         "--epochs", "3", "--no-split"]) == 0
    return d


def test_ingest_synthetic(workdir):
    ds = rs.read_container(workdir / "d.fpc")
    assert len(ds) == 8 and ds.band_ids == ["B6", "B7"]
    assert rs.datasets_equal(ds, firecli.synthetic.make_dataset(8, 16, seed=7))
    manifest = json.loads((workdir / "d.fpc.manifest.json").read_text())
    assert manifest["command"] == "ingest"


def test_ingest_missing_dir(tmp_path):
    assert firecli.main(["ingest", "--raw", str(tmp_path / "nope"), "-o", str(tmp_path / "x")]) == 3


def test_ingest_raw(tmp_path):
    raw = tmp_path / "raw"
    raw.mkdir()
    (raw / "ingest.cfg").write_text("height = 2\nwidth = 3\ndtype = u16\nbands = B6,B9\n")
    rng = np.random.default_rng(0)
    for pid in ("a", "b"):
        for band in ("B6", "B9"):
            rng.integers(0, 900, 6).astype("<u2").tofile(raw / f"{pid}.{band}.raw")
        np.array([0, 1, 0, 0, 0, 1], np.uint8).tofile(raw / f"{pid}.mask.raw")
    out = tmp_path / "r.fpc"
    assert firecli.main(["ingest", "--raw", str(raw), "-o", str(out)]) == 0
    ds = rs.read_container(out)
    assert len(ds) == 2 and ds[0].pixels.shape == (2, 3, 2) and ds[1].mask.sum() == 2


def test_train_outputs(workdir):
    run = workdir / "run"
    log = te.TrainLog.from_csv((run / "train_log.csv").read_text())
    assert len(log.records) == 3
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["config"]["epochs"] == 3
    assert (run / "model.fpg").read_bytes()[:4] == b"FPG1"


def test_eval_writes_metrics(workdir):
    out = workdir / "ev"
    assert firecli.main(["eval", str(workdir / "run" / "model.fpg"), str(workdir / "d.fpc"),
                         "--out", str(out)]) == 0
    assert (out / "metrics.csv").read_text().startswith("precision,recall,f1,f2")
    assert "Predicted: Fire" in (out / "confusion.txt").read_text()


def test_eval_threshold_monotone(workdir):
    fps = []
    for t in ("0.2", "0.5", "0.8"):
        out = workdir / f"ev{t}"
        firecli.main(["eval", str(workdir / "run" / "model.fpg"), str(workdir / "d.fpc"),
                      "--out", str(out), "--threshold", t])
        text = (out / "confusion.txt").read_text()
        fps.append(int(text.split("FP = ")[1].split()[0].replace(",", "")))
    assert fps == sorted(fps, reverse=True)


def test_eval_empty_container(workdir, tmp_path):
    empty = tmp_path / "empty.fpc"
    empty.write_bytes(struct.pack("<4sIIHHHBB", b"FPC1", 1, 0, 16, 16, 0, 1, 0))
    assert firecli.main(["eval", str(workdir / "run" / "model.fpg"), str(empty),
                         "--out", str(tmp_path / "o")]) == 3


def test_predict_pgm(workdir):
    out = workdir / "pred"
    assert firecli.main(["predict", str(workdir / "run" / "model.fpg"), str(workdir / "d.fpc"),
                         "--out", str(out)]) == 0
    data = (out / "mask_00000.pgm").read_bytes()
    assert data.startswith(b"P5\n16 16\n255\n") and len(data) == 13 + 256
    assert set(data[13:]) <= {0, 255}
    assert len(list(out.glob("mask_*.pgm"))) == 8


def test_predict_probabilities(workdir):
    out = workdir / "prob"
    assert firecli.main(["predict", str(workdir / "run" / "model.fpg"), str(workdir / "d.fpc"),
                         "--out", str(out), "--probabilities"]) == 0
    data = (out / "mask_00003.pgm").read_bytes()
    assert data.startswith(b"P5\n16 16\n65535\n") and len(data) == 15 + 512


def test_segment_and_eda(tmp_path):
    c = tmp_path / "c.fpc"
    firecli.main(["ingest", "--synthetic", "6", "--size", "16", "--bands", "B6,B7,B9", "-o", str(c)])
    assert firecli.main(["segment", str(c), "--out", str(tmp_path / "seg")]) == 0
    rows = (tmp_path / "seg" / "contamination.csv").read_text().splitlines()
    assert rows[0] == "image_index,fire_pixels,dense,scattered,none" and len(rows) == 7
    assert (tmp_path / "seg" / "cirrus_00005.pgm").exists()
    assert firecli.main(["eda", str(c), "--out", str(tmp_path / "eda")]) == 0
    names = sorted(p.name for p in (tmp_path / "eda").iterdir())
    assert names == ["fire_vs_cirrus.csv", "fire_vs_dense.svg", "fire_vs_none.svg",
                     "fire_vs_scattered.svg", "fits.csv", "manifest.json"]


def test_segment_missing_band(workdir, tmp_path):
    assert firecli.main(["segment", str(workdir / "d.fpc"), "--out", str(tmp_path / "s")]) == 3


def test_stats_z(capsys):
    assert firecli.main(["stats", "--test", "z", "--p1", "0.95572", "--n1", "1084",
                         "--p2", "0.93266", "--n2", "1084"]) == 0
    p = float(capsys.readouterr().out.rsplit("p=", 1)[1])
    assert p == pytest.approx(0.0097, abs=5e-4)


def test_stats_equal_inputs(capsys):
    assert firecli.main(["stats", "--test", "welch", "--mean1", "1", "--sd1", "0.1", "--n1", "9",
                         "--mean2", "1", "--sd2", "0.1", "--n2", "9"]) == 0
    assert capsys.readouterr().out.strip().endswith("p=0.5")


def test_stats_bad_alternative():
    with pytest.raises(SystemExit) as exc:
        firecli.main(["stats", "--test", "z", "--alternative", "sideways"])
    assert exc.value.code == 2


def test_stats_missing_args():
    assert firecli.main(["stats", "--test", "z", "--p1", "0.5"]) == 3


def test_stats_from_logs(tmp_path, capsys):
    def log(seconds):
        recs = [te.EpochRecord(i, 0.0, 0.0, 0.0, s) for i, s in enumerate(seconds)]
        return te.TrainLog("accuracy", {"seed": 0}, 0, recs).to_csv()

    (tmp_path / "a.csv").write_text(log([2.0, 2.1, 2.2, 2.05]))
    (tmp_path / "b.csv").write_text(log([1.0, 1.2, 1.1, 1.0]))
    assert firecli.main(["stats", "--test", "paired", "--log-a", str(tmp_path / "a.csv"),
                         "--log-b", str(tmp_path / "b.csv")]) == 0
    assert capsys.readouterr().out.startswith("paired t (greater)")


def test_config_file_overrides(workdir, tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text("epochs = 1\nlearning_rate = 0.005\nbase_width = 4\n")
    assert firecli.main(["train-fcn", str(workdir / "d.fpc"), "--out", str(tmp_path / "r"),
                         "--config", str(cfg), "--no-split"]) == 0
    m = json.loads((tmp_path / "r" / "manifest.json").read_text())
    assert m["config"]["epochs"] == 1 and m["config"]["learning_rate"] == 0.005
    assert m["config"]["base_width"] == 4


def test_info(workdir, capsys):
    assert firecli.main(["info", str(workdir / "d.fpc")]) == 0
    assert "patches=8" in capsys.readouterr().out


def test_missing_container(tmp_path):
    assert firecli.main(["info", str(tmp_path / "none.fpc")]) == 3


def test_bad_container(tmp_path):
    bad = tmp_path / "bad.fpc"
    bad.write_bytes(b"NOPE" + bytes(30))
    assert firecli.main(["info", str(bad)]) == 3


def test_preset_alias(workdir, tmp_path):
    assert firecli.main(["train-fcn", str(workdir / "d.fpc"), "--out", str(tmp_path / "p"),
                         "--preset", "paper", "--epochs", "1", "--no-split"]) == 0
    m = json.loads((tmp_path / "p" / "manifest.json").read_text())
    assert m["config"]["preset"] == "full" and m["config"]["base_width"] == 48
