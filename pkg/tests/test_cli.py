import json
import os

import numpy as np
import pytest

from synthzsd.cli import EXIT_CONFIG, EXIT_DIVERGED, EXIT_FAIL, EXIT_OK, config_from_dict, main, parse_config
from synthzsd.errors import ConfigError
from synthzsd.models import load_model

SMALL = """\
d = 4
D = 8
S = 4
U = 2
records_per_class = 40
background_records = 80
n_scenes = 6
hidden = 16
batch_size = 32
gan_epochs = 6
features_per_unseen_class = 50
"""


def write_config(tmp_path, text=SMALL, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run(*argv):
    return main([*argv, "-q"])


class TestParseConfig:
    def test_empty_file_gives_defaults(self, tmp_path):
        cfg = parse_config(write_config(tmp_path, ""))
        w = cfg.train.weights
        assert (w.alpha1, w.alpha2, w.alpha3, w.alpha4, w.gp_lambda, w.warmup_epochs) == (1.0, 0.1, 0.1, 1.0, 10.0, 5)
        assert (cfg.train.lr, cfg.train.beta1, cfg.train.beta2) == (1e-4, 0.5, 0.999)
        assert cfg.train.features_per_unseen_class == 300 and cfg.train.classifier_epochs == 30
        assert cfg.top_k == 100 and cfg.nms_threshold == 0.5 and cfg.mode == "gzsd"
        assert (cfg.world.fg_min, cfg.world.bg_max) == (0.7, 0.3)

    def test_negative_weight(self):
        with pytest.raises(ConfigError) as e:
            config_from_dict({"alpha4": -1})
        assert e.value.key == "alpha4"

    def test_unknown_key(self):
        with pytest.raises(ConfigError) as e:
            config_from_dict({"alpha5": 1.0})
        assert e.value.key == "alpha5" and "alpha5" in str(e.value)

    @pytest.mark.parametrize("raw,key", [
        ({"gan_epochs": 2.5}, "gan_epochs"),
        ({"lr": "fast"}, "lr"),
        ({"baseline": 1}, "baseline"),
        ({"mode": "both"}, "mode"),
        ({"policy": "loose"}, "policy"),
    ])
    def test_type_and_choice_errors(self, raw, key):
        with pytest.raises(ConfigError) as e:
            config_from_dict(raw)
        assert e.value.key == key

    def test_overrides(self):
        cfg = config_from_dict({"seed": 3, "mode": "gzsd"}, seed=7, out="x", mode="zsd")
        assert cfg.seed == 7 and cfg.train.seed == 7 and cfg.out == "x" and cfg.mode == "zsd"
        assert cfg.path("scenes") == os.path.join("x", "scenes.json")

    def test_policy_sets_thresholds(self):
        cfg = config_from_dict({"policy": "overlapping"})
        assert (cfg.world.fg_min, cfg.world.bg_max) == (0.5, 0.49)

    def test_tables_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(write_config(tmp_path, "[train]\nlr = 1.0\n"))

    def test_int_accepted_for_float(self):
        assert config_from_dict({"sigma": 1}).world.sigma == 1.0

    def test_bad_config_exit_code(self, tmp_path):
        assert run("gen-data", "--config", write_config(tmp_path, "alpha5 = 1\n")) == EXIT_CONFIG
        assert run("gen-data", "--config", str(tmp_path / "missing.toml")) == EXIT_CONFIG


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    config = write_config(tmp)
    out = str(tmp / "out")
    assert run("pipeline", "--config", config, "--out", out, "--seed", "1") == EXIT_OK
    return config, out


class TestCommands:
    def test_pipeline_outputs(self, pipeline_run):
        _, out = pipeline_run
        for rel in ("semantics.txt", "features.txt", "scenes.json", "synthetic.txt",
                    "checkpoints/generator.model", "checkpoints/critic.model", "checkpoints/head.model",
                    "checkpoints/head_seen.model", "checkpoints/semantic.model",
                    "reports/train_log.tsv", "reports/detections-gzsd.tsv", "reports/report-gzsd.json"):
            assert os.path.exists(os.path.join(out, rel)), rel
        report = json.loads(open(os.path.join(out, "reports/report-gzsd.json")).read())
        assert report["mode"] == "gzsd"
        assert 0.0 <= report["map"] <= 1.0
        assert load_model(os.path.join(out, "checkpoints/head.model")).initialized.all()

    def test_zsd_and_baseline(self, pipeline_run):
        config, out = pipeline_run
        for extra in ([], ["--baseline"]):
            assert run("detect", "--config", config, "--out", out, "--mode", "zsd", *extra) == EXIT_OK
            assert run("evaluate", "--config", config, "--out", out, "--mode", "zsd", *extra) == EXIT_OK
        assert os.path.exists(os.path.join(out, "reports/report-zsd-baseline.json"))

    def test_evaluate_empty_detections(self, pipeline_run, tmp_path):
        config, out = pipeline_run
        path = os.path.join(out, "reports/detections-gzsd.tsv")
        saved = open(path).read()
        try:
            open(path, "w").write("")
            assert run("evaluate", "--config", config, "--out", out) == EXIT_OK
            report = json.loads(open(os.path.join(out, "reports/report-gzsd.json")).read())
            assert report["map"] == 0.0 and report["recall_at_k"] == 0.0
        finally:
            open(path, "w").write(saved)

    def test_no_clobber(self, pipeline_run):
        config, out = pipeline_run
        before = open(os.path.join(out, "features.txt")).read()
        assert run("gen-data", "--config", config, "--out", out, "--no-clobber") == EXIT_FAIL
        assert open(os.path.join(out, "features.txt")).read() == before

    def test_missing_prerequisite(self, tmp_path):
        config = write_config(tmp_path)
        for cmd in ("train-gan", "synthesize", "train-classifier", "detect", "evaluate"):
            assert run(cmd, "--config", config, "--out", str(tmp_path / "empty")) == EXIT_CONFIG

    def test_divergence_keeps_last_good(self, tmp_path):
        config = write_config(tmp_path, SMALL.replace("gan_epochs = 6", "gan_epochs = 50") + "lr = 1e300\n")
        out = str(tmp_path / "out")
        assert run("gen-data", "--config", config, "--out", out) == EXIT_OK
        with np.errstate(all="ignore"):
            assert run("train-gan", "--config", config, "--out", out) == EXIT_DIVERGED
        g = load_model(os.path.join(out, "checkpoints/generator.model"))
        assert all(np.all(np.isfinite(v)) for v in g.params().values())

    def test_grad_check(self, tmp_path):
        config = write_config(tmp_path, "grad_points = 3\n")
        out = str(tmp_path / "out")
        assert run("grad-check", "--config", config, "--out", out) == EXIT_OK
        rows = open(os.path.join(out, "reports/gradcheck.tsv")).read().splitlines()
        assert len(rows) == 9 and all(r.endswith("yes") for r in rows[1:])
