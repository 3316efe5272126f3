"""
Tests for the command line interface and its exit codes
"""
import pandas as pd
import pytest

from classifier import build_classifier, save_classifier
from cli import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, cli
from data_ingest import synth_benchmark
from version import __version__

TINY_TOML = """
name = "cli"
seed = 0
output_dir = "run"
resolution = 16
channels = 1
regimes = ["baseline"]
cam_samples = 1

[data]
load_workers = 1

[data.synth]
image_size = 16
blob_sigma = 1.5
blob_margin = 3

[data.synth.counts.train]
0 = 6
1 = 2

[data.synth.counts.validation]
0 = 3
1 = 2

[gan]
residual_blocks = 1
generator_filters = 4
discriminator_filters = 4
discriminator_layers = 2
epochs = 1

[classifier]
stem = "compact"
growth_rate = 4
block_config = [2, 2]
num_init_features = 8
bn_size = 2
epochs = 1
batch_size = 8
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML, encoding="utf-8")
    return path


class TestUsage:
    """Test usage errors and help"""

    def test_no_command(self, capsys):
        assert cli([]) == EXIT_USAGE

    def test_help(self, capsys):
        assert cli(["--help"]) == EXIT_OK
        assert "train-gan" in capsys.readouterr().out

    def test_version(self, capsys):
        assert cli(["--version"]) == EXIT_OK
        assert __version__ in capsys.readouterr().out

    def test_unknown_command(self, capsys):
        assert cli(["explode"]) == EXIT_USAGE

    def test_bad_override_names_key(self, config_path, capsys):
        assert cli(["run", "--config", str(config_path), "--set", "gan.lambda_cyc=abc"]) == EXIT_USAGE
        assert "gan.lambda_cyc" in capsys.readouterr().err

    def test_unknown_config_key(self, config_path, capsys):
        assert cli(["ingest", "--config", str(config_path), "--set", "classifier.depth=3"]) == EXIT_USAGE
        assert "classifier.depth" in capsys.readouterr().err

    def test_missing_config_file(self, tmp_path, capsys):
        assert cli(["run", "--config", str(tmp_path / "none.toml")]) == EXIT_USAGE

    def test_eval_without_inputs(self, capsys):
        assert cli(["eval"]) == EXIT_USAGE


class TestCommands:
    """Test subcommands end to end"""

    def test_synth(self, tmp_path, capsys):
        out_dir = tmp_path / "bench"
        code = cli(["synth", "--out", str(out_dir), "--seed", "3",
                    "--set", "image_size=16", "--set", "blob_margin=3"])
        assert code == EXIT_OK
        frame = pd.read_csv(out_dir / "manifest.csv")
        assert len(frame) == 250
        assert (frame["label"] == 1).sum() == 25

    def test_synth_bad_override(self, tmp_path, capsys):
        assert cli(["synth", "--out", str(tmp_path), "--set", "image_size=2"]) == EXIT_USAGE

    def test_run_then_report(self, tmp_path, config_path, capsys):
        assert cli(["run", "--config", str(config_path)]) == EXIT_OK
        out = capsys.readouterr().out
        assert "classifier epoch=1/1" in out
        assert "baseline: roc_auc=" in out
        assert (tmp_path / "run" / "summary.json").is_file()

        assert cli(["report", "--dir", str(tmp_path / "run")]) == EXIT_OK
        assert "baseline" in capsys.readouterr().out

    def test_ingest_subcommand(self, tmp_path, config_path, capsys):
        assert cli(["ingest", "--config", str(config_path)]) == EXIT_OK
        assert (tmp_path / "run" / "manifests" / "train.csv").is_file()
        assert not (tmp_path / "run" / "checkpoints").exists()

    def test_report_without_summary(self, tmp_path, capsys):
        assert cli(["report", "--dir", str(tmp_path)]) == EXIT_FAILURE

    def test_report_with_failures(self, tmp_path, capsys):
        (tmp_path / "summary.json").write_text(
            '{"regimes": {}, "failures": [{"stage": "evaluate", "error_type": "RuntimeError", "message": "x"}]}')
        assert cli(["report", "--dir", str(tmp_path)]) == EXIT_FAILURE
        assert "FAILED evaluate" in capsys.readouterr().out

    def test_runtime_failure(self, tmp_path, config_path, mocker, capsys):
        mocker.patch("harness.train_classifier", side_effect=RuntimeError("out of memory"))
        assert cli(["run", "--config", str(config_path)]) == EXIT_FAILURE
        assert "classifier_baseline" in capsys.readouterr().err

    def test_eval_checkpoints(self, tmp_path, tiny_classifier_config, tiny_synth_config, capsys):
        manifest = synth_benchmark(tiny_synth_config, seed=5, out_dir=tmp_path / "bench")
        baseline = save_classifier(build_classifier(tiny_classifier_config, seed=0), tmp_path / "a.ckpt")
        augmented = save_classifier(build_classifier(tiny_classifier_config, seed=1), tmp_path / "b.ckpt")
        out_dir = tmp_path / "eval"
        code = cli(["eval", "--checkpoint", f"baseline={baseline}", "--checkpoint", f"aug_same_data={augmented}",
                    "--manifest", str(tmp_path / "bench" / "manifest.csv"), "--out", str(out_dir)])
        assert code == EXIT_OK
        assert (out_dir / "plots" / "roc_pr.png").is_file()
        assert (out_dir / "plots" / "roc_pr.svg").is_file()
        roc = pd.read_csv(out_dir / "metrics" / "roc_aug_same_data.csv")
        assert roc.iloc[0].tolist() == [0.0, 0.0]
        assert roc.iloc[-1].tolist() == [1.0, 1.0]
        table = pd.read_csv(out_dir / "metrics" / "comparison.csv")
        assert list(table["regime"]) == ["baseline", "aug_same_data"]
        assert manifest.filter("validation").n == 5

    def test_eval_bad_checkpoint_argument(self, tmp_path, capsys):
        code = cli(["eval", "--checkpoint", "baseline", "--manifest", str(tmp_path / "m.csv"),
                    "--out", str(tmp_path)])
        assert code == EXIT_USAGE
