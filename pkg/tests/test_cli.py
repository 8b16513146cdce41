import hashlib
from pathlib import Path

import pytest

from rheovision import cli
from rheovision.evaluator import parse_csv

MINI_CONFIG = """\
[campaign]
preset = custom
n_concretes = 12
runs_per_concrete = 2
frames_per_run = 30
image_size = 26
recycled_fraction = 0.41667

[train]
epochs = 2
batch_size = 16

[data]
flow_levels = 2
flow_window = 9
flow_iterations = 2
"""


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "mini.cfg"
    path.write_text(MINI_CONFIG)
    return str(path)


@pytest.fixture(scope="module")
def generated(tmp_path_factory, config_path):
    out = tmp_path_factory.mktemp("gen") / "data"
    code = run(["generate", "-c", config_path, "-o", str(out), "--seed", "5"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, generated, config_path):
    out = tmp_path_factory.mktemp("train") / "run0"
    code = run(["train", str(generated), "-c", config_path, "-o", str(out),
                "--fold", "0", "--combination", "D+m+OF"])
    assert code == 0
    return out


class TestGenerate:
    def test_same_seed_identical_digest(self, tmp_path, config_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert run(["generate", "-c", config_path, "-o", str(a), "--seed", "7"]) == 0
        assert run(["generate", "-c", config_path, "-o", str(b), "--seed", "7"]) == 0
        da = hashlib.sha256((a / "manifest.txt").read_bytes()).hexdigest()
        db = hashlib.sha256((b / "manifest.txt").read_bytes()).hexdigest()
        assert da == db

    def test_missing_parent_is_io_error(self, config_path):
        assert run(["generate", "-c", config_path, "-o", "/nonexistent/deep/data"]) == 3

    def test_nonempty_without_force_is_io_error(self, tmp_path, config_path):
        out = tmp_path / "data"
        out.mkdir()
        (out / "junk").write_text("x")
        assert run(["generate", "-c", config_path, "-o", str(out)]) == 3

    def test_effective_config_echoed(self, generated):
        echoed = (generated / "effective_config.txt").read_text()
        assert "[campaign]" in echoed and "seed = 5" in echoed

    def test_dry_run_accepts_generated_layout(self, generated, config_path):
        assert run(["evaluate", str(generated), "-c", config_path, "--dry-run"]) == 0

    def test_unknown_config_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[train]\nbogus_key = 1\n")
        assert run(["generate", "-c", str(bad), "-o", str(tmp_path / "x")]) == 2


class TestTrain:
    def test_trains_and_writes_outputs(self, trained):
        assert (trained / "fold0_D+m+OF.rhc").exists()
        epochs = parse_csv((trained / "fold0_D+m+OF_epochs.csv").read_text())
        assert len(epochs) == 2
        assert (trained / "folds.txt").exists()

    def test_invalid_combination_lists_valid_names(self, generated, config_path, tmp_path,
                                                   capsys):
        code = run(["train", str(generated), "-c", config_path, "-o", str(tmp_path / "t"),
                    "--combination", "O+OF"])
        assert code == 2
        err = capsys.readouterr().err
        assert "O+D+m" in err and "D+m+OF" in err

    def test_fold_out_of_range(self, generated, config_path, tmp_path):
        assert run(["train", str(generated), "-c", config_path, "-o", str(tmp_path / "t"),
                    "--fold", "9"]) == 2

    def test_missing_dataset_is_io_error(self, config_path, tmp_path):
        assert run(["train", str(tmp_path / "nothing"), "-c", config_path,
                    "-o", str(tmp_path / "t")]) == 3


class TestEvaluate:
    def test_writes_metrics_and_averaging(self, generated, trained, config_path, tmp_path):
        out = tmp_path / "eval"
        code = run(["evaluate", str(generated), "-c", config_path, "-o", str(out),
                    "--checkpoint", str(trained / "fold0_D+m+OF.rhc"),
                    "--average", "per_run"])
        assert code == 0
        rows = parse_csv((out / "metrics.csv").read_text())
        assert {r["output"] for r in rows} == {"delta", "tau0", "mu"}
        assert all(r["combination"] == "D+m+OF" for r in rows)
        avg_rows = parse_csv((out / "averaging.csv").read_text())
        assert {r["grouping"] for r in avg_rows} == {"none", "per_run"}

    def test_all_runs_group_sizes_match_counting(self, generated, trained, config_path,
                                                 tmp_path):
        # 2 runs x 9 sets, 9 reference combinations: round-robin puts one set
        # per combination per run, so all_runs groups pool exactly 2
        out = tmp_path / "eval_all"
        code = run(["evaluate", str(generated), "-c", config_path, "-o", str(out),
                    "--checkpoint", str(trained / "fold0_D+m+OF.rhc"),
                    "--average", "all_runs"])
        assert code == 0
        avg_rows = parse_csv((out / "averaging.csv").read_text())
        sizes = {float(r["group_size_mean"]) for r in avg_rows if r["grouping"] == "all_runs"}
        assert sizes == {2.0}

    def test_malformed_checkpoint_is_io_error(self, generated, config_path, tmp_path):
        bad = tmp_path / "bad.rhc"
        bad.write_bytes(b"JUNKJUNKJUNK")
        assert run(["evaluate", str(generated), "-c", config_path,
                    "-o", str(tmp_path / "e"), "--checkpoint", str(bad)]) == 3

    def test_checkpoint_required_without_dry_run(self, generated, config_path, tmp_path):
        assert run(["evaluate", str(generated), "-c", config_path,
                    "-o", str(tmp_path / "e")]) == 2


class TestSweep:
    def test_writes_expected_row_count(self, generated, trained, config_path, tmp_path):
        out = tmp_path / "sweep.csv"
        code = run(["sweep", str(generated), "-c", config_path,
                    "--checkpoint", str(trained / "fold0_D+m+OF.rhc"), "-o", str(out),
                    "--concrete", "concrete_000", "--run", "run_01",
                    "--from", "0", "--to", "60"])
        assert code == 0
        rows = parse_csv(out.read_text())
        assert len(rows) == 61
        assert rows[0]["minute"] == "0.0"
        plot_rows = parse_csv((tmp_path / "sweep_plot.csv").read_text())
        assert list(plot_rows[0]) == ["x", "y", "err"]
        assert float(plot_rows[0]["err"]) == pytest.approx(2.46)

    def test_reversed_interval_is_usage_error(self, generated, trained, config_path, tmp_path):
        assert run(["sweep", str(generated), "-c", config_path,
                    "--checkpoint", str(trained / "fold0_D+m+OF.rhc"),
                    "-o", str(tmp_path / "s.csv"), "--concrete", "concrete_000",
                    "--run", "run_01", "--from", "30", "--to", "10"]) == 2

    def test_svg_emitted(self, generated, trained, config_path, tmp_path):
        out = tmp_path / "sweep.csv"
        svg = tmp_path / "sweep.svg"
        code = run(["sweep", str(generated), "-c", config_path,
                    "--checkpoint", str(trained / "fold0_D+m+OF.rhc"), "-o", str(out),
                    "--concrete", "concrete_001", "--run", "run_02",
                    "--from", "10", "--to", "20", "--svg", str(svg)])
        assert code == 0
        assert svg.read_text().startswith("<svg")


def test_usage_error_without_command():
    assert cli.main([]) == 2


def test_unknown_command():
    assert cli.main(["frobnicate"]) == 2
