import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from histogan import cli
from histogan.cli import (DEFAULT_CONFIG, apply_override, config_hash,
                          file_digest, load_config, main)
from histogan.errors import ConfigurationError

TINY = [
    "--set", "corpus.n_slides=4", "--set", "corpus.slide_size=128",
    "--set", "corpus.n_pairs_per_level=6",
    "--set", "snn.embedding_dim=16", "--set", "snn.base_channels=4",
    "--set", "snn.pretrain_epochs=0",
    "--set", 'snn.stage1={"trainable_tail":8,"epochs":1,"batch_size":8,'
             '"recon_lr":0.001,"sim_lr":0.0005,"resolution":64,"margin":1.0}',
    "--set", 'snn.stage2={"trainable_tail":3,"epochs":1,"batch_size":8,'
             '"recon_lr":0.001,"sim_lr":0.0005,"resolution":32,"margin":1.0}',
    "--set", "gan.epochs=1", "--set", "gan.feature_maps=8",
    "--set", "gan.latent_dim=16", "--set", "gan.batch_size=32",
    "--set", "metrics.n_real=24", "--set", "metrics.n_fake=8",
    "--set", "metrics.ppl_paths=2", "--set", "metrics.ppl_steps=2",
    "--set", "metrics.pr_k=2",
    "--set", "downstream.head_units=8", "--set", "downstream.epochs=1",
    "--set", "downstream.n_synth_per_class=8",
]


class TestConfig:
    def test_defaults_pass_schema(self):
        cfg = load_config(None, (), None, None)
        assert cfg == DEFAULT_CONFIG

    def test_dotted_override_types(self):
        cfg = {"gan": {"reward_weight": 0.3}}
        apply_override(cfg, "gan.reward_weight", "0")
        assert cfg["gan"]["reward_weight"] == 0
        apply_override(cfg, "serve.host", "localhost")
        assert cfg["serve"]["host"] == "localhost"

    def test_set_flag_reaches_nested_key(self):
        cfg = load_config(None, ("gan.epochs=3", "corpus.stride=16"), None, None)
        assert cfg["gan"]["epochs"] == 3
        assert cfg["corpus"]["stride"] == 16

    def test_config_file_merges_over_defaults(self, tmp_path):
        p = tmp_path / "cfg.json"
        p.write_text(json.dumps({"gan": {"epochs": 2}}))
        cfg = load_config(str(p), (), None, None)
        assert cfg["gan"]["epochs"] == 2
        assert cfg["gan"]["lr"] == DEFAULT_CONFIG["gan"]["lr"]

    def test_seed_flag_overrides_all_sections(self):
        cfg = load_config(None, (), None, 99)
        for section in ("corpus", "snn", "gan", "metrics", "downstream"):
            assert cfg[section]["seed"] == 99

    def test_malformed_override_rejected(self):
        with pytest.raises(ConfigurationError):
            load_config(None, ("no_equals_sign",), None, None)

    def test_schema_violation_rejected(self):
        with pytest.raises(ConfigurationError):
            load_config(None, ("gan.image_size=48",), None, None)

    def test_unreadable_config_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigurationError):
            load_config(str(bad), (), None, None)

    def test_config_hash_is_order_insensitive(self):
        a = {"x": 1, "y": {"a": 2, "b": 3}}
        b = {"y": {"b": 3, "a": 2}, "x": 1}
        assert config_hash(a) == config_hash(b)


class TestExitCodes:
    def test_missing_dependency_exits_3(self, tmp_path):
        runner = CliRunner()
        res = runner.invoke(main, ["pairs", "--out", str(tmp_path)])
        assert res.exit_code == 3
        assert "synth" in res.output

    def test_config_error_exits_2(self, tmp_path):
        runner = CliRunner()
        res = runner.invoke(main, ["synth", "--out", str(tmp_path),
                                   "--set", "gan.image_size=48"])
        assert res.exit_code == 2

    def test_eval_without_gan_exits_3_naming_producer(self, tmp_path):
        runner = CliRunner()
        out = str(tmp_path)
        assert runner.invoke(main, ["synth", "--out", out] + TINY).exit_code == 0
        res = runner.invoke(main, ["eval", "--out", out] + TINY)
        assert res.exit_code == 3
        assert "train-gan" in res.output

    def test_reward_weight_flag_reaches_manifest(self, tmp_path):
        runner = CliRunner()
        out = str(tmp_path)
        assert runner.invoke(main, ["synth", "--out", out] + TINY).exit_code == 0
        res = runner.invoke(main, ["train-gan", "--out", out,
                                   "--reward-weight", "0"] + TINY)
        assert res.exit_code == 0
        manifest = json.loads(
            (tmp_path / "manifests" / "train-gan.json").read_text())
        assert manifest["config"]["gan"]["reward_weight"] == 0

    def test_train_gan_without_scorer_exits_3(self, tmp_path):
        runner = CliRunner()
        out = str(tmp_path)
        assert runner.invoke(main, ["synth", "--out", out] + TINY).exit_code == 0
        res = runner.invoke(main, ["train-gan", "--out", out] + TINY)
        assert res.exit_code == 3
        assert "train-snn" in res.output


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("pipe"))
    runner = CliRunner()
    for cmd in (["synth"], ["pairs"], ["train-snn"],
                ["train-gan"], ["eval"], ["downstream"]):
        res = runner.invoke(main, cmd + ["--out", out] + TINY)
        assert res.exit_code == 0, f"{cmd}: {res.output}"
    return Path(out)


class TestPipeline:
    def test_corpus_artifacts(self, pipeline):
        assert (pipeline / "corpus" / "slides").is_dir()
        assert list((pipeline / "corpus" / "patches").rglob("*.png"))
        assert (pipeline / "corpus" / "pairs" / "manifest.jsonl").is_file()
        assert (pipeline / "corpus" / "wsi_pairs" / "pairs" /
                "manifest.jsonl").is_file()

    def test_snn_checkpoint_with_sidecar(self, pipeline):
        ckpt = pipeline / "snn" / "checkpoint.pt"
        assert ckpt.is_file()
        sidecar = json.loads((pipeline / "snn" / "checkpoint.pt.json").read_text())
        assert len(sidecar["stages"]) == 2
        for stage in sidecar["stages"]:
            pre_post = stage["frozen_param_digest"]
            assert pre_post["pre"] == pre_post["post"]

    def test_per_class_gans_and_traces(self, pipeline):
        classes = sorted(d.name for d in (pipeline / "gan").iterdir())
        assert classes == ["benign", "invasive"]
        for cls in classes:
            assert (pipeline / "gan" / cls / "gan_final.pt").is_file()
            trace = (pipeline / "runs" / f"gan_{cls}" / "reward_trace.csv")
            header = trace.read_text().splitlines()[0]
            assert header == "iter,epoch,l_d,reward,l_d_mod,l_g,mean_sim"

    def test_metric_report(self, pipeline):
        report = json.loads((pipeline / "metrics" / "report.json").read_text())
        assert set(report) == {"fid", "kid", "ppl", "precision", "recall", "f1",
                               "n_real", "n_fake", "extractor_digest", "seed"}
        assert (pipeline / "runs" / "gan_benign" / "tsne.csv").is_file()

    def test_downstream_reports(self, pipeline):
        synth = json.loads((pipeline / "downstream" /
                            "report_synthetic.json").read_text())
        real = json.loads((pipeline / "downstream" / "report_real.json").read_text())
        assert synth["train_source"] == "synthetic"
        assert real["train_source"] == "real"
        assert synth["test_digest"] == real["test_digest"]

    def test_manifests_record_artifact_digests(self, pipeline):
        for cmd in ("synth", "pairs", "train-snn", "train-gan", "eval",
                    "downstream"):
            manifest = json.loads((pipeline / "manifests" / f"{cmd}.json").read_text())
            assert manifest["command"] == cmd
            assert manifest["artifacts"], f"{cmd} manifest has no artifacts"
            for rel, digest in manifest["artifacts"].items():
                assert file_digest(pipeline / rel) == digest


class TestDeterminism:
    def test_synth_twice_gives_identical_digests(self, tmp_path):
        runner = CliRunner()
        digests = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            res = runner.invoke(main, ["synth", "--out", str(out)] + TINY)
            assert res.exit_code == 0
            manifest = json.loads((out / "manifests" / "synth.json").read_text())
            digests.append(manifest["artifacts"])
        assert digests[0] == digests[1]
