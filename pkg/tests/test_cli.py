import json

import numpy as np
import pytest

from cli import main
from services.datasets import save_embeddings
from services.sae import SaeModel, load_sae, save_sae

INTERFERENCE = """
experiment = "interference"
seed = 0
trials = 5
resamples = 50
format = "csv"

[world]
d1 = 16

[axes]
d2 = [4, 16]
"""

SAE_TRAIN = """
experiment = "sae-train"
seed = 0
trials = 1
n_train = 64
format = "csv"

[world]
d1 = 8
d2 = 4
s = 1

[sae]
d1 = 8
s = 1
k0 = 1
ramp_steps = 0
warmup_steps = 1
horizon = 5
batch_size = 16
"""


@pytest.fixture
def interference_config(tmp_path):
    path = tmp_path / "interference.toml"
    path.write_text(INTERFERENCE, encoding="utf-8")
    return path


def test_simulate_writes_csv(tmp_path, interference_config, capsys):
    out = tmp_path / "results"
    assert main(["simulate", "--config", str(interference_config), "--out", str(out)]) == 0
    assert (out / "interference.csv").exists()
    assert (out / "interference.provenance.json").exists()
    assert "global_error" in capsys.readouterr().out


def test_simulate_rejects_other_kinds(tmp_path):
    path = tmp_path / "sae.toml"
    path.write_text(SAE_TRAIN, encoding="utf-8")
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path)]) == 2


def test_missing_config_exit_code(tmp_path):
    assert main(["classify", "--config", str(tmp_path / "nope.toml")]) == 2


def test_seed_override_changes_output(tmp_path, interference_config):
    main(["simulate", "--config", str(interference_config), "--out", str(tmp_path / "a")])
    main(["simulate", "--config", str(interference_config), "--out", str(tmp_path / "b"),
          "--seed", "5"])
    a = (tmp_path / "a" / "interference.csv").read_text(encoding="utf-8")
    b = (tmp_path / "b" / "interference.csv").read_text(encoding="utf-8")
    assert a != b


def test_report_plots_existing_csv(tmp_path, interference_config):
    main(["simulate", "--config", str(interference_config), "--out", str(tmp_path)])
    csv = tmp_path / "interference.csv"
    assert main(["report", "--input", str(csv), "--kind", "line",
                 "--metric", "global_error", "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "interference.svg").exists()
    assert main(["report", "--input", str(csv), "--metric", "no_such_metric"]) == 2


def test_sae_train_with_checkpoint(tmp_path):
    path = tmp_path / "sae.toml"
    path.write_text(SAE_TRAIN, encoding="utf-8")
    checkpoint = tmp_path / "model.sae"
    assert main(["sae", "train", "--config", str(path), "--out", str(tmp_path),
                 "--checkpoint", str(checkpoint)]) == 0
    model = load_sae(checkpoint)
    assert (model.d1, model.d2, model.s) == (8, 4, 1)


def test_sae_mask_rejects_other_kinds(tmp_path, interference_config):
    assert main(["sae", "mask", "--config", str(interference_config),
                 "--out", str(tmp_path)]) == 2


def test_sae_eval(tmp_path, capsys):
    model = SaeModel(encoder=np.eye(3), decoder=np.eye(3), bias=np.zeros(3), s=3)
    save_sae(model, tmp_path / "id.sae")
    save_embeddings(tmp_path / "x.csv", np.array([[1.0, 2.0, 3.0], [0.5, 0.0, 1.0]]))
    assert main(["sae", "eval", "--checkpoint", str(tmp_path / "id.sae"),
                 "--data", str(tmp_path / "x.csv")]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["reconstruction"] == pytest.approx(0.0)
    assert summary["n"] == 2


def test_sae_eval_dimension_mismatch(tmp_path):
    save_sae(SaeModel(encoder=np.eye(3), decoder=np.eye(3), bias=np.zeros(3), s=1),
             tmp_path / "id.sae")
    save_embeddings(tmp_path / "x.csv", np.ones((2, 4)))
    assert main(["sae", "eval", "--checkpoint", str(tmp_path / "id.sae"),
                 "--data", str(tmp_path / "x.csv")]) == 2


def test_sae_eval_bad_checkpoint(tmp_path):
    (tmp_path / "broken.sae").write_bytes(b"SAE1\x01")
    save_embeddings(tmp_path / "x.csv", np.ones((2, 3)))
    assert main(["sae", "eval", "--checkpoint", str(tmp_path / "broken.sae"),
                 "--data", str(tmp_path / "x.csv")]) == 3
