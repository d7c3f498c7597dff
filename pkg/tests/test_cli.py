import json

import pytest

from bcpnn_stream.cli import main
from bcpnn_stream.config import save_config
from bcpnn_stream.data import write_idx
from bcpnn_stream.serialize import FORMAT_VERSION
from bcpnn_stream.structural import read_pgm

from conftest import pattern_dataset, tiny_config


@pytest.fixture
def workspace(tmp_path):
    cfg = tiny_config(rewire_interval=5)
    save_config(cfg, tmp_path / "tiny.cfg")
    for name, n, seed in (("train", 30, 0), ("test", 12, 1)):
        ds = pattern_dataset(n, cfg, seed=seed)
        write_idx(ds, tmp_path / f"{name}-images", tmp_path / f"{name}-labels")
    return tmp_path


def _data_args(ws, *splits):
    args = []
    for s in splits:
        args += [f"--{s}-images", str(ws / f"{s}-images"), f"--{s}-labels", str(ws / f"{s}-labels")]
    return args


def _train(ws, out="out", *extra):
    argv = ["train", "--config", str(ws / "tiny.cfg"), "--out-dir", str(ws / out), *_data_args(ws, "train", "test")]
    return main(argv + list(extra))


def _manifest(out_dir):
    (path,) = out_dir.glob("*.manifest.json")
    return json.loads(path.read_text())


class TestTrainEval:
    def test_train_writes_manifest_and_model(self, workspace, capsys):
        assert _train(workspace) == 0
        m = _manifest(workspace / "out")
        assert (workspace / "out" / m["model_file"]).exists()
        assert m["steps"] == {"unsupervised": 30, "supervised": 30}
        assert 0.0 <= m["metrics"]["test_accuracy"] <= 1.0
        assert json.loads(capsys.readouterr().out)["run_id"] == m["run_id"]

    def test_reproducible_apart_from_timings(self, workspace):
        assert _train(workspace, "a") == 0
        assert _train(workspace, "b") == 0
        a, b = _manifest(workspace / "a"), _manifest(workspace / "b")
        a.pop("timings_s"), b.pop("timings_s")
        assert a == b

    def test_engines_agree(self, workspace):
        assert _train(workspace, "o", "--engine", "oracle") == 0
        assert _train(workspace, "p", "--engine", "pipeline") == 0
        assert _manifest(workspace / "o")["model_state_sha256"] == _manifest(workspace / "p")["model_state_sha256"]

    def test_eval_leaves_model_untouched(self, workspace, capsys):
        assert _train(workspace) == 0
        model = workspace / "out" / _manifest(workspace / "out")["model_file"]
        before = model.read_bytes()
        capsys.readouterr()
        argv = ["eval", "--model", str(model), "--out-dir", str(workspace / "ev"), *_data_args(workspace, "test")]
        assert main(argv) == 0
        assert model.read_bytes() == before
        acc = json.loads(capsys.readouterr().out)["accuracy"]
        assert acc == _manifest(workspace / "out")["metrics"]["test_accuracy"]
        (stats,) = (workspace / "ev").glob("*.stats.csv")
        assert len(stats.read_text().splitlines()) == 13

    def test_struct_snapshots(self, workspace):
        code = _train(workspace, "s", "--mode", "struct", "--snapshot-every", "10", "--snapshot-hc", "1")
        assert code == 0
        snaps = _manifest(workspace / "s")["rf_snapshots"]
        assert len(snaps) == 4
        for name in snaps:
            assert (read_pgm(workspace / "s" / name) > 0).sum() == 8


class TestExitCodes:
    def test_missing_dataset(self, workspace):
        argv = ["train", "--config", str(workspace / "tiny.cfg"), "--out-dir", str(workspace / "out"),
                "--train-images", str(workspace / "nope"), "--train-labels", str(workspace / "nope")]
        assert main(argv) == 3
        assert not list((workspace).glob("out/*.model"))

    def test_bad_config_value(self, workspace):
        (workspace / "bad.cfg").write_text((workspace / "tiny.cfg").read_text() + "hidden_mc = 0\n")
        argv = ["train", "--config", str(workspace / "bad.cfg"), *_data_args(workspace, "train")]
        assert main(argv) == 2

    def test_config_and_preset_conflict(self, workspace):
        assert main(["export-rf", "--config", str(workspace / "tiny.cfg"), "--preset", "model1"]) == 2

    def test_corrupted_model_header(self, workspace):
        assert _train(workspace) == 0
        model = workspace / "out" / _manifest(workspace / "out")["model_file"]
        raw = bytearray(model.read_bytes())
        raw[8:12] = (FORMAT_VERSION + 7).to_bytes(4, "little")
        model.write_bytes(bytes(raw))
        assert main(["eval", "--model", str(model), *_data_args(workspace, "test")]) == 3

    def test_geometry_mismatch(self, workspace):
        argv = ["train", "--preset", "model1", *_data_args(workspace, "train")]
        assert main(argv) == 2

    def test_unknown_subcommand(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2


class TestRoofline:
    def test_three_presets(self, tmp_path, capsys):
        argv = ["roofline", "--out-dir", str(tmp_path)]
        for name in ("model1", "model2", "model3"):
            argv += ["--preset", name]
        assert main(argv) == 0
        assert "hbm_bandwidth=460.8 GB/s" in capsys.readouterr().out
        (csv,) = tmp_path.glob("*.roofline.csv")
        points = [l for l in csv.read_text().splitlines() if l.startswith("point")]
        assert [p.split(",")[1] for p in points] == ["model1:unsupervised", "model2:unsupervised", "model3:unsupervised"]

    def test_resource_file(self, tmp_path, capsys):
        (tmp_path / "r.res").write_text("dsp_available = 9024\n")
        assert main(["roofline", "--resources", str(tmp_path / "r.res"), "--out-dir", str(tmp_path)]) == 0
        assert "peak_compute=288.77 GFLOP/s" in capsys.readouterr().out

    def test_bad_resource_file(self, tmp_path):
        (tmp_path / "r.res").write_text("warp_drive = 1\n")
        assert main(["roofline", "--resources", str(tmp_path / "r.res"), "--out-dir", str(tmp_path)]) == 2

    def test_impossible_stats_rejected(self, tmp_path):
        (tmp_path / "s.csv").write_text("image_tag,latency_us,flops,bytes\n0,0.001,1000000000,2000000000\n")
        argv = ["roofline", "--preset", "model1", "--stats", str(tmp_path / "s.csv"), "--out-dir", str(tmp_path)]
        assert main(argv) == 5


class TestExportAndBench:
    def test_fresh_receptive_field(self, tmp_path, capsys):
        assert main(["export-rf", "--preset", "model1", "--hc", "0", "--out-dir", str(tmp_path)]) == 0
        (pgm,) = tmp_path.glob("*.pgm")
        grid = read_pgm(pgm)
        assert grid.shape == (28, 28) and (grid > 0).sum() == 128

    def test_hypercolumn_out_of_range(self, tmp_path):
        assert main(["export-rf", "--preset", "model1", "--hc", "99", "--out-dir", str(tmp_path)]) == 2

    def test_bench_zero_images(self, workspace, capsys):
        argv = ["bench", "--config", str(workspace / "tiny.cfg"), "--images", "0", "--out-dir", str(workspace)]
        assert main(argv) == 0
        assert capsys.readouterr().out.count("\n") == 1

    def test_bench_sweep(self, workspace, capsys):
        argv = ["bench", "--config", str(workspace / "tiny.cfg"), "--images", "5", "--fifo-depths", "1,4",
                "--out-dir", str(workspace)]
        assert main(argv) == 0
        rows = capsys.readouterr().out.splitlines()[1:]
        assert [r.split(",")[1] for r in rows] == ["1", "4"]
