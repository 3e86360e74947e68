"""Config schema strictness, round trips, and the four CLI subcommands."""

import json

import pytest

from cyclevqg import cli
from cyclevqg.config import Config, ConfigError, from_toml_text, to_toml

SMALL_CONFIG = """
[model]
latent_dim = 16
image_embed = 12
category_embed = 6
fusion_hidden = 16
token_embed = 10
decoder_hidden = 16
classifier_embed = 10
classifier_hidden = 16
image_size = 16
max_len = 12

[train]
epochs = 2
batch_size = 16
seed = 1

[data]
toy_images = 10
toy_categories = 3
"""


class TestDefaults:
    def test_table_defaults(self):
        cfg = Config()
        assert cfg.loss.image_recon == 1.0
        assert cfg.loss.category_recon == 2.0
        assert cfg.loss.question == 3.0
        assert cfg.loss.consistency == 2.0
        assert cfg.loss.center == 3.0
        assert cfg.loss.hyperprior == 3.0
        assert cfg.loss.hyperprior_reg == 2.0
        assert cfg.model.latent_dim == 64
        assert cfg.train.learning_rate == 1e-3
        assert cfg.train.epochs == 15
        assert cfg.train.center_update_scale == 0.5

    def test_defaults_serialize_with_those_values(self):
        text = to_toml(Config())
        assert "question = 3.0" in text
        assert "latent_dim = 64" in text
        assert "learning_rate = 0.001" in text
        assert "epochs = 15" in text


class TestRoundTrip:
    def test_parse_serialize_parse_identity(self):
        cfg = from_toml_text(SMALL_CONFIG)
        again = from_toml_text(to_toml(cfg))
        assert again == cfg

    def test_default_round_trip(self):
        assert from_toml_text(to_toml(Config())) == Config()


class TestStrictSchema:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown key"):
            from_toml_text("[train]\nlearningrate = 0.1\n")

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError, match="unknown config section"):
            from_toml_text("[optimizer]\nlr = 0.1\n")

    def test_type_mismatch_rejected(self):
        with pytest.raises(ConfigError, match="expected int"):
            from_toml_text("[train]\nepochs = 2.5\n")

    def test_invalid_value_rejected(self):
        with pytest.raises(ConfigError):
            from_toml_text("[train]\nbatch_size = 0\n")

    def test_invalid_toml_rejected(self):
        with pytest.raises(ConfigError, match="invalid TOML"):
            from_toml_text("not toml ][")


@pytest.fixture
def workspace(tmp_path):
    config_path = tmp_path / "small.toml"
    config_path.write_text(SMALL_CONFIG, encoding="utf-8")
    return tmp_path, str(config_path)


def run_cli(argv, capsys):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestTrainCli:
    def test_toy_training_is_deterministic_across_runs(self, workspace, capsys):
        tmp_path, config_path = workspace
        finals = []
        for name in ("a.ckpt", "b.ckpt"):
            code, out, err = run_cli(
                ["train", "--config", config_path, "--toy", "--seed", "1",
                 "--out", str(tmp_path / name)],
                capsys,
            )
            assert code == 0, err
            finals.append([l for l in out.splitlines() if l.startswith("final loss")])
        assert finals[0] == finals[1]

    def test_seed_flag_overrides_config(self, workspace, capsys):
        tmp_path, config_path = workspace
        outs = []
        for seed, name in (("1", "s1.ckpt"), ("2", "s2.ckpt")):
            code, out, _ = run_cli(
                ["train", "--config", config_path, "--toy", "--seed", seed,
                 "--out", str(tmp_path / name)],
                capsys,
            )
            assert code == 0
            outs.append([l for l in out.splitlines() if l.startswith("final loss")])
        assert outs[0] != outs[1]

    def test_missing_dataset_flag_fails_with_diagnostic(self, workspace, capsys):
        tmp_path, config_path = workspace
        code, _, err = run_cli(
            ["train", "--config", config_path, "--out", str(tmp_path / "x.ckpt")],
            capsys,
        )
        assert code != 0
        assert "toy" in err or "data-dir" in err


class TestGenerateEvaluateCli:
    def test_full_pipeline(self, workspace, capsys):
        tmp_path, config_path = workspace
        ckpt = str(tmp_path / "model.ckpt")
        code, _, err = run_cli(
            ["train", "--config", config_path, "--toy", "--out", ckpt], capsys
        )
        assert code == 0, err

        gens = str(tmp_path / "gens.jsonl")
        code, out, err = run_cli(
            ["generate", "--checkpoint", ckpt, "--toy", "--out", gens], capsys
        )
        assert code == 0, err
        assert "generation records" in out

        report = str(tmp_path / "report")
        code, out, err = run_cli(
            ["evaluate", gens, "--config", config_path, "--toy", "--out", report],
            capsys,
        )
        assert code == 0, err
        assert any(line.startswith("BLEU-1") for line in out.splitlines())
        scores = json.load(open(report + ".json"))
        assert set(scores["bleu"]) == {"1", "2", "3", "4"}
        table = open(report + ".txt").read()
        assert table.splitlines()[-1].startswith("overall")

    def test_perfect_generations_score_hundred(self, workspace, capsys):
        """Candidates equal to references: BLEU-1 reported as 100.0."""
        tmp_path, config_path = workspace
        gens = tmp_path / "perfect.jsonl"
        rows = [
            {"image_id": "i1", "category": 0, "question": "what color is the cat",
             "references": ["what color is the cat"]},
            {"image_id": "i2", "category": 1, "question": "how many red squares are there",
             "references": ["how many red squares are there"]},
        ]
        gens.write_text("\n".join(json.dumps(r) for r in rows), encoding="utf-8")
        report = str(tmp_path / "report")
        code, out, _ = run_cli(["evaluate", str(gens), "--out", report], capsys)
        assert code == 0
        assert "BLEU-1 100.00" in out
        scores = json.load(open(report + ".json"))
        assert scores["bleu"]["1"] == pytest.approx(100.0)
        assert scores["rouge_l"] == pytest.approx(100.0)

    def test_corrupt_checkpoint_fails_cleanly(self, workspace, capsys):
        tmp_path, config_path = workspace
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"nonsense bytes that are not a checkpoint at all....")
        code, _, err = run_cli(
            ["generate", "--checkpoint", str(bad), "--toy",
             "--out", str(tmp_path / "g.jsonl")],
            capsys,
        )
        assert code != 0 and "error:" in err


class TestPrepareCli:
    def test_prepare_then_train_from_cache(self, workspace, capsys):
        tmp_path, config_path = workspace
        data_dir = tmp_path / "vqa"
        data_dir.mkdir()
        questions = [
            {"question_id": i, "image_id": f"img{i % 3}",
             "question": f"what color is thing {i}"}
            for i in range(12)
        ]
        annotations = [
            {"question_id": i, "answers": [{"answer": "red" if i % 2 else "two"}] * 10}
            for i in range(12)
        ]
        (data_dir / "questions.json").write_text(
            json.dumps({"questions": questions}), encoding="utf-8"
        )
        (data_dir / "annotations.json").write_text(
            json.dumps({"annotations": annotations}), encoding="utf-8"
        )
        categories = tmp_path / "cats.tsv"
        categories.write_text("red\tcolor\ntwo\tcount\n", encoding="utf-8")

        cache = str(tmp_path / "cache.rec")
        code, out, err = run_cli(
            ["prepare", "--data-dir", str(data_dir), "--categories", str(categories),
             "--out", cache, "--config", config_path],
            capsys,
        )
        assert code == 0, err
        assert "samples kept       12" in out

        from cyclevqg.data import load_records

        bundle = load_records(cache)
        assert len(bundle.samples) == 12
        assert bundle.category_names == ["color", "count"]
