import numpy as np
import pytest

from densepoint import checkpoint, cli
from densepoint import tensor as T
from densepoint.networks import Network

SMALL = ["--k", "8", "--points", "64", "--train-per-class", "2", "--test-per-class", "2", "--batch-size", "4"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def table(out):
    return [line.split("\t") for line in out.splitlines() if line and not line.startswith("#")]


class TestCount:
    def test_default_total(self, capsys, tmp_path):
        code, out, _ = run(capsys, "count", "--out-dir", tmp_path)
        assert code == 0
        rows = table(out)
        assert rows[0] == ["layer", "kind", "output_shape", "params", "flops"]
        total = rows[-1]
        assert abs(int(total[3]) / 1e6 - 0.67) <= 0.05 * 0.67
        assert sum(int(r[3]) for r in rows[1:-1]) == int(total[3])
        assert sum(int(r[4]) for r in rows[1:-1]) == int(total[4])
        assert (tmp_path / "count.tsv").read_text().strip() == "\n".join("\t".join(r) for r in rows)

    def test_group_sweep(self, capsys, tmp_path):
        code, out, _ = run(capsys, "count", "--sweep", "ng=1,2,4,6,12", "--out-dir", tmp_path)
        rows = table(out)
        assert code == 0 and rows[0] == ["ng", "params", "flops"]
        params = [int(r[1]) for r in rows[1:]]
        assert params == sorted(params, reverse=True)
        assert (tmp_path / "sweep_ng.tsv").is_file()

    def test_k_sweep(self, capsys, tmp_path):
        code, out, _ = run(capsys, "count", "--sweep", "k=12,24,36,48", "--out-dir", tmp_path)
        params = [int(r[1]) for r in table(out)[1:]]
        assert code == 0 and params == sorted(params)

    @pytest.mark.parametrize(
        "argv",
        [["--sweep", "depth=6"], ["--groups", "5"], ["--connectivity", "sparse"], ["--depth", "7"], ["--task", "x"]],
    )
    def test_invalid(self, capsys, tmp_path, argv):
        code, _, err = run(capsys, "count", "--out-dir", tmp_path, *argv)
        assert code == 1
        assert err.startswith("error: ") and len(err.strip().splitlines()) == 1


class TestConfig:
    def test_precedence(self, capsys, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[network]\nk = 12\ngroups = 4\n")
        code, out, _ = run(capsys, "count", "--config", cfg, "--groups", "2", "--out-dir", tmp_path)
        assert code == 0
        assert "# network.k = 12 (config)" in out
        assert "# network.groups = 2 (flag)" in out
        assert "# network.num_classes = 40 (default)" in out

    def test_unknown_key(self, capsys, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[network]\nwidth = 3\n")
        code, _, err = run(capsys, "count", "--config", cfg)
        assert code == 1 and "width" in err

    def test_unknown_section(self, capsys, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[model]\nk = 3\n")
        code, _, err = run(capsys, "count", "--config", cfg)
        assert code == 1 and "model" in err

    def test_bad_value(self, capsys, tmp_path):
        cfg = tmp_path / "run.ini"
        cfg.write_text("[network]\nk = many\n")
        code, _, err = run(capsys, "count", "--config", cfg)
        assert code == 1 and err.startswith("error:")

    def test_help_lists_every_flag(self, capsys):
        for name, (_, sections) in cli.COMMANDS.items():
            with pytest.raises(SystemExit):
                cli.main([name, "--help"])
            out = capsys.readouterr().out
            for section in sections:
                for key in cli.SCHEMA[section]:
                    assert "--" + key.replace("_", "-") in out, (name, key)
            assert "--config" in out


class TestTrainEval:
    def train(self, capsys, out_dir, *extra):
        return run(capsys, "train", *SMALL, "--epochs", "1", "--out-dir", out_dir, *extra)

    def test_same_seed_same_bytes(self, capsys, tmp_path):
        for sub in ("a", "b"):
            code, _, _ = self.train(capsys, tmp_path / sub, "--seed", "7")
            assert code == 0
        a = (tmp_path / "a" / "model.dptk").read_bytes()
        assert a == (tmp_path / "b" / "model.dptk").read_bytes()

    def test_log_written(self, capsys, tmp_path):
        self.train(capsys, tmp_path)
        lines = (tmp_path / "train_log.tsv").read_text().splitlines()
        assert lines[0] == "epoch\ttrain_loss\ttrain_acc\ttest_acc\twall_seconds"
        assert len(lines) == 2

    def test_zero_epochs_is_init(self, capsys, tmp_path):
        code, _, _ = run(capsys, "train", *SMALL, "--epochs", "0", "--out-dir", tmp_path, "--net-seed", "3")
        assert code == 0
        values = dict(cli.resolve(cli.build_parser().parse_args(["train", *SMALL, "--net-seed", "3"]))[0])
        net = Network(cli.network_config(values, num_classes=4, input_points=64))
        saved = checkpoint.load(tmp_path / "model.dptk")
        for k, v in net.state_dict().items():
            np.testing.assert_array_equal(saved[k], v.astype(np.float32))

    def test_eval_dump_cross_check(self, capsys, tmp_path):
        self.train(capsys, tmp_path)
        dump = tmp_path / "dump.tsv"
        code, out, _ = run(capsys, "eval", *SMALL, "--out-dir", tmp_path, "--votes", "3", "--dump", dump)
        assert code == 0
        metrics = dict(item.split("=") for item in out.strip().splitlines()[-1].split())
        rows = table(dump.read_text())
        assert rows[0] == ["id", "label", "pred", "max_prob"]
        hits = [r[1] == r[2] for r in rows[1:]]
        assert float(metrics["accuracy"]) == pytest.approx(np.mean(hits), abs=1e-4)
        for key in ("accuracy", "mean_class_accuracy"):
            assert 0.0 <= float(metrics[key]) <= 1.0
        assert all(0.25 <= float(r[3]) <= 1.0 for r in rows[1:])

    def test_single_vote_deterministic(self, capsys, tmp_path):
        self.train(capsys, tmp_path)
        dumps = []
        for name in ("d1.tsv", "d2.tsv"):
            run(capsys, "eval", *SMALL, "--out-dir", tmp_path, "--votes", "1", "--seed", "4", "--dump", tmp_path / name)
            dumps.append((tmp_path / name).read_text())
        assert dumps[0] == dumps[1]

    def test_eval_mismatch_names_parameter(self, capsys, tmp_path):
        self.train(capsys, tmp_path)
        args = [a if a != "8" else "12" for a in SMALL]
        code, _, err = run(capsys, "eval", *args, "--out-dir", tmp_path)
        assert code == 1 and err.startswith("error:")
        assert "stage1.ppool.pconv" in err or "epconv1" in err

    def test_missing_checkpoint(self, capsys, tmp_path):
        code, _, err = run(capsys, "eval", *SMALL, "--out-dir", tmp_path)
        assert code == 1 and "checkpoint" in err

    def test_missing_dataset(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--dataset", tmp_path / "nowhere", "--out-dir", tmp_path)
        assert code == 1 and err.startswith("error: dataset not found")

    def test_layer_connectivity(self, capsys, tmp_path):
        code, _, _ = self.train(capsys, tmp_path, "--connectivity", "layer")
        assert code == 0

    def test_synth_then_train_from_directory(self, capsys, tmp_path):
        data = tmp_path / "data"
        code, _, _ = run(capsys, "synth", "--points", 64, "--train-per-class", 2, "--test-per-class", 1, "--out-dir", data)
        assert code == 0 and (data / "manifest.tsv").is_file()
        code, _, _ = self.train(capsys, tmp_path / "run", "--dataset", data)
        assert code == 0


class TestGradcheck:
    def test_subset_passes(self, capsys):
        code, out, _ = run(capsys, "gradcheck", "--ops", "relu,matmul,epconv")
        rows = table(out)
        assert code == 0
        assert rows[0] == ["op", "max_rel_error", "entries", "status"]
        assert [r[0] for r in rows[1:]] == ["relu", "matmul", "epconv"]
        assert all(r[3] == "pass" for r in rows[1:])

    def test_corrupted_backward_fails(self, capsys, monkeypatch):
        def bad_relu(x):
            mask = x.data > 0
            return T._make(x.data * mask, (x,), lambda g: (0.5 * g * mask,), "relu")

        monkeypatch.setattr(T, "relu", bad_relu)
        code, out, err = run(capsys, "gradcheck", "--ops", "relu")
        assert code == 1
        assert "relu" in err
        assert table(out)[1][3] == "FAIL"

    def test_unknown_op(self, capsys):
        code, _, err = run(capsys, "gradcheck", "--ops", "softmax_of_doom")
        assert code == 1 and "softmax_of_doom" in err


class TestBench:
    def test_schema_and_ordering(self, capsys):
        code, out, _ = run(capsys, "bench", "--depths", "6,11", "--batch", 2, "--reps", 3, "--input-points", 256)
        assert code == 0
        rows = table(out)
        assert rows[0] == ["network", "phase", "batch", "median_s", "min_s", "max_s"]
        medians = {}
        for name, phase, batch, med, lo, hi in rows[1:]:
            assert int(batch) == 2
            assert float(lo) <= float(med) <= float(hi)
            medians[(name, phase)] = float(med)
        assert len(medians) == 4
        for phase in ("forward", "forward_backward"):
            assert medians[("L=6", phase)] < medians[("L=11", phase)]

    def test_bad_reps(self, capsys):
        code, _, err = run(capsys, "bench", "--reps", 0)
        assert code == 1 and err.startswith("error:")
