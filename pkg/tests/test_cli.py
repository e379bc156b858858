import json

import numpy as np
import pytest

from sevolve.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, RunConfig, _metrics, load_config_file, main
from sevolve.network import load_checkpoint


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A tiny generated dataset plus a short training run, shared by the
    read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "train.txt"
    assert run(["generate", "--out", str(data), "--samples", "6", "--grid-n", "4",
                "--labels", "2", "--feature-dim", "4", "--noise", "0.3",
                "--seed", "5"]) == EXIT_OK
    out = root / "run"
    assert run(["train", "--dataset", str(data), "--out-dir", str(out),
                "--layers", "2", "--epochs", "2", "--max-trials", "3",
                "--seed", "5"]) == EXIT_OK
    return {"root": root, "data": data, "out": out,
            "ckpt": out / "final.ckpt"}


class TestGenerate:
    def test_deterministic_bytes(self, tmp_path, capsys):
        args = ["generate", "--samples", "4", "--grid-n", "4", "--labels", "2",
                "--seed", "7"]
        p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
        assert run(args + ["--out", str(p1)]) == EXIT_OK
        out1 = capsys.readouterr().out
        assert run(args + ["--out", str(p2)]) == EXIT_OK
        out2 = capsys.readouterr().out
        assert p1.read_bytes() == p2.read_bytes()
        assert out1 == out2
        assert out1.startswith("samples=4 same_label_edge_fraction=")

    def test_invalid_label_count_exits_2(self, tmp_path, capsys):
        code = run(["generate", "--out", str(tmp_path / "x.txt"), "--labels", "1"])
        assert code == EXIT_CONFIG
        assert "labels" in capsys.readouterr().err

    def test_missing_out_exits_2(self):
        assert run(["generate", "--samples", "2"]) == EXIT_CONFIG


class TestTrain:
    def test_zero_lr_keeps_initial_weights(self, tmp_path):
        data = tmp_path / "d.txt"
        run(["generate", "--out", str(data), "--samples", "3", "--grid-n", "4",
             "--labels", "2", "--seed", "1"])
        out1 = tmp_path / "r1"
        out2 = tmp_path / "r2"
        base = ["train", "--dataset", str(data), "--layers", "1",
                "--max-trials", "2", "--seed", "3"]
        assert run(base + ["--out-dir", str(out1), "--epochs", "1", "--lr", "0"]) == EXIT_OK
        assert run(base + ["--out-dir", str(out2), "--epochs", "4", "--lr", "0"]) == EXIT_OK
        ck1, _ = load_checkpoint(out1 / "final.ckpt")
        ck2, _ = load_checkpoint(out2 / "final.ckpt")
        for (n1, t1), (n2, t2) in zip(ck1.tensors(), ck2.tensors()):
            assert np.array_equal(t1, t2), n1

    def test_repeat_run_identical_artifacts(self, tmp_path):
        data = tmp_path / "d.txt"
        run(["generate", "--out", str(data), "--samples", "4", "--grid-n", "4",
             "--labels", "2", "--seed", "2"])
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            assert run(["train", "--dataset", str(data), "--out-dir", str(out),
                        "--layers", "2", "--epochs", "2", "--max-trials", "3",
                        "--seed", "9"]) == EXIT_OK
            outs.append(out)
        assert (outs[0] / "train_log.tsv").read_bytes() == (outs[1] / "train_log.tsv").read_bytes()
        assert (outs[0] / "final.ckpt").read_bytes() == (outs[1] / "final.ckpt").read_bytes()

    def test_missing_dataset_file_exits_3(self, tmp_path):
        assert run(["train", "--dataset", str(tmp_path / "nope.txt"),
                    "--out-dir", str(tmp_path / "r")]) == EXIT_IO


class TestEval:
    def test_metrics_against_confusion_oracle(self):
        # all predictions one class on balanced 4-class labels:
        # accuracy 1/4; that class IoU 1/4, others 0; mean 0.0625
        conf = np.zeros((4, 4), dtype=np.int64)
        conf[:, 0] = 25
        acc, iou, mean_iou = _metrics(conf)
        assert acc == 0.25
        assert iou == [0.25, 0.0, 0.0, 0.0]
        assert mean_iou == 0.0625

    def test_perfect_predictions(self):
        conf = np.diag([10, 20, 30]).astype(np.int64)
        acc, iou, mean_iou = _metrics(conf)
        assert acc == 1.0
        assert iou == [1.0, 1.0, 1.0]
        assert mean_iou == 1.0

    def test_absent_class_excluded_from_mean(self):
        # class 2 appears in neither labels nor predictions
        conf = np.zeros((3, 3), dtype=np.int64)
        conf[0, 0] = 8
        conf[1, 1] = 4
        conf[0, 1] = 4
        acc, iou, mean_iou = _metrics(conf)
        assert iou[2] is None
        assert mean_iou == pytest.approx((8 / 12 + 4 / 8) / 2)

    def test_eval_emits_json_record(self, workdir, capsys):
        assert run(["eval", "--checkpoint", str(workdir["ckpt"]),
                    "--dataset", str(workdir["data"]), "--max-trials", "3",
                    "--seed", "1"]) == EXIT_OK
        out, err = capsys.readouterr()
        record = json.loads(out)
        assert record["samples"] == 6
        assert 0.0 <= record["accuracy"] <= 1.0
        assert len(record["per_class_iou"]) == 2
        assert "accuracy" in err

    def test_dim_mismatch_exits_2(self, workdir, tmp_path):
        other = tmp_path / "other.txt"
        run(["generate", "--out", str(other), "--samples", "2", "--grid-n", "4",
             "--labels", "2", "--feature-dim", "6", "--seed", "8"])
        assert run(["eval", "--checkpoint", str(workdir["ckpt"]),
                    "--dataset", str(other)]) == EXIT_CONFIG


class TestInspect:
    def test_writes_dots_and_trace(self, workdir, tmp_path, capsys):
        out = tmp_path / "ins"
        assert run(["inspect", "--checkpoint", str(workdir["ckpt"]),
                    "--dataset", str(workdir["data"]), "--out-dir", str(out),
                    "--sample-index", "0", "--max-trials", "3", "--seed", "2"]) == EXIT_OK
        sizes = capsys.readouterr().out.strip()
        assert sizes.startswith("level_sizes=")
        values = [int(v) for v in sizes.split("=")[1].split()]
        assert all(a >= b for a, b in zip(values, values[1:]))
        assert (out / "level0.dot").exists()
        assert (out / "level1.dot").exists()
        assert (out / "hierarchy.dot").exists()
        trace = (out / "trace.txt").read_text()
        assert "# transition 0 -> 1" in trace
        assert "trial=1" in trace

    def test_identical_dot_bytes_across_runs(self, workdir, tmp_path):
        blobs = []
        for name in ("i1", "i2"):
            out = tmp_path / name
            assert run(["inspect", "--checkpoint", str(workdir["ckpt"]),
                        "--dataset", str(workdir["data"]), "--out-dir", str(out),
                        "--sample-index", "1", "--max-trials", "3",
                        "--seed", "4"]) == EXIT_OK
            blobs.append((out / "hierarchy.dot").read_bytes()
                         + (out / "level0.dot").read_bytes())
        assert blobs[0] == blobs[1]

    def test_sample_index_out_of_range_exits_2(self, workdir, tmp_path):
        assert run(["inspect", "--checkpoint", str(workdir["ckpt"]),
                    "--dataset", str(workdir["data"]),
                    "--out-dir", str(tmp_path / "x"),
                    "--sample-index", "99"]) == EXIT_CONFIG


class TestConfigFile:
    def test_file_plus_cli_overrides(self, tmp_path):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text(
            "# toy settings\n"
            "layers = 3\n"
            "lr = 0.01\n"
            "threshold = none\n"
            "samples = 11\n")
        cfg = load_config_file(cfgfile, RunConfig())
        assert cfg.layers == 3
        assert cfg.lr == 0.01
        assert cfg.threshold is None
        assert cfg.samples == 11

    def test_unknown_key_rejected(self, tmp_path):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("learning = 0.1\n")
        with pytest.raises(ValueError, match="unknown config key"):
            load_config_file(cfgfile, RunConfig())

    def test_unknown_key_exits_2(self, tmp_path):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("whatever = 3\n")
        assert run(["generate", "--config", str(cfgfile),
                    "--out", str(tmp_path / "x.txt")]) == EXIT_CONFIG

    def test_missing_config_file_exits_3(self, tmp_path):
        assert run(["generate", "--config", str(tmp_path / "nope.cfg"),
                    "--out", str(tmp_path / "x.txt")]) == EXIT_IO

    def test_cli_flag_overrides_file(self, tmp_path, capsys):
        cfgfile = tmp_path / "run.cfg"
        cfgfile.write_text("samples = 3\nlabels = 2\ngrid_n = 4\nseed = 1\n")
        out = tmp_path / "d.txt"
        assert run(["generate", "--config", str(cfgfile), "--out", str(out),
                    "--samples", "5"]) == EXIT_OK
        assert capsys.readouterr().out.startswith("samples=5 ")
