import json
from pathlib import Path

import numpy as np
import pytest

from cli import EXIT_OK, EXIT_PIPELINE_ERROR, main
from src.config import Config
from src.services.checkpoint import load_checkpoint, save_checkpoint
from src.services.dsp import FeatureStandardizer
from src.services.nn import ConvNet

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"

SMALL_SETTINGS = (
    "CANONICAL_DURATION=1.0\nFEATURE_FRAMES=16\nFEATURE_BINS=16\nMFCC_COEFFS=12\n"
    "MODEL_CONV_FILTERS=4,4,4,4,4,4\nMODEL_DENSE_UNITS=8,8\nMODEL_POOL=2\n"
    "TRAIN_EPOCHS=2\nTRAIN_BATCH_SIZE=8\n"
)


def write_settings(tmp_path, text=SMALL_SETTINGS, name="small.env"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


def last_json_line(text):
    return json.loads([line for line in text.splitlines() if line.startswith("{")][-1])


def test_version(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["--version"])
    assert excinfo.value.code == 0
    assert "cache v1, checkpoint v1" in capsys.readouterr().out


def test_missing_manifest_is_reported_as_json(tmp_path, capsys):
    code = main(["train", "--manifest", str(tmp_path / "absent.csv"), "--cache", str(tmp_path / "cache"),
                 "--out", str(tmp_path / "model.ckpt")])
    assert code == EXIT_PIPELINE_ERROR
    error = last_json_line(capsys.readouterr().err)
    assert error["error"] == "io_error"
    assert "absent.csv" in error["message"]


def test_invalid_configuration(tmp_path, capsys):
    settings = tmp_path / "bad.env"
    settings.write_text("TRAIN_EPOCHS=0\n", encoding="utf-8")
    code = main(["synth", "--config", str(settings), "--out", str(tmp_path / "corpus")])
    assert code == EXIT_PIPELINE_ERROR
    assert last_json_line(capsys.readouterr().err)["error"] == "invalid_argument"


def test_eval_requires_checkpoint_or_cv(tmp_path, capsys):
    code = main(["eval", "--manifest", "m.csv", "--cache", str(tmp_path), "--out", str(tmp_path / "out")])
    assert code == EXIT_PIPELINE_ERROR
    assert last_json_line(capsys.readouterr().err)["error"] == "invalid_argument"


def test_synth_and_augment(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    assert main(["synth", "--out", str(corpus), "--clips", "10"]) == EXIT_OK
    summary = last_json_line(capsys.readouterr().out)
    assert summary["clips"] == 50

    split = tmp_path / "split"
    assert main(["augment", "--config", str(CONFIG_DIR / "desk.env"),
                 "--manifest", summary["manifest"], "--out", str(split)]) == EXIT_OK
    table = json.loads((split / "dataset.json").read_text(encoding="utf-8"))
    assert table["crash"] == {"originals": 10, "train_originals": 8, "train_total": 56, "test": 2}
    assert (split / "train.csv").exists()
    assert (split / "test.csv").exists()
    assert len(list((split / "wav").glob("*.wav"))) == 4 * 8 * 6


def test_diverged_training_keeps_last_good_checkpoint(small_corpus, tmp_path, capsys):
    settings = write_settings(tmp_path, SMALL_SETTINGS + "TRAIN_LR=1e30\nTRAIN_DTYPE=float32\n")
    manifest, cache = str(small_corpus.manifest_path), str(tmp_path / "cache")
    assert main(["features", "--config", settings, "--manifest", manifest, "--cache", cache]) == EXIT_OK

    checkpoint = tmp_path / "model.ckpt"
    code = main(["train", "--config", settings, "--manifest", manifest, "--cache", cache,
                 "--out", str(checkpoint)])
    assert code == EXIT_PIPELINE_ERROR
    assert last_json_line(capsys.readouterr().err)["error"] == "training_diverged"
    restored = load_checkpoint(checkpoint)
    assert all(np.all(np.isfinite(value)) for value in restored.model.named_parameters().values())


def test_predict_rejects_checkpoint_from_other_settings(small_corpus, tmp_path, capsys):
    settings = write_settings(tmp_path)
    config = Config(settings, environ={}).pipeline_config()
    model = ConvNet(config.model.to_spec(5), config.features.shape)
    standardizer = FeatureStandardizer(np.zeros(3), np.ones(3))
    checkpoint = save_checkpoint(tmp_path / "model.ckpt", model, standardizer, config.features,
                                 config.feature_hash())
    wav = str(small_corpus.entries[0].path)

    assert main(["predict", "--config", settings, "--checkpoint", str(checkpoint), wav]) == EXIT_OK
    capsys.readouterr()

    shorter = write_settings(tmp_path, SMALL_SETTINGS.replace("CANONICAL_DURATION=1.0", "CANONICAL_DURATION=0.5"),
                             name="shorter.env")
    code = main(["predict", "--config", shorter, "--checkpoint", str(checkpoint), wav])
    assert code == EXIT_PIPELINE_ERROR
    assert last_json_line(capsys.readouterr().err)["error"] == "stale_cache"
