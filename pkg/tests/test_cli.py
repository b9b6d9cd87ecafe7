import json

import pytest

from cccae import cli
from cccae.config import RunConfig


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = RunConfig(cccae_epochs=2, cccae_batch=256, pretrain_epochs=1, regressor_epochs=1,
                    regressor_hidden1=16, regressor_hidden2=8, postfilter_epochs=2)
    (root / "run.cfg").write_text(cfg.dumps())
    assert cli.main(["synth-data", "--out", str(root / "data"), "--duration", "60", "--utterances", "5"]) == 0
    return root


def run(ws, *args):
    return cli.main([args[0], "--config", str(ws / "run.cfg"), *args[1:]])


def test_flow(workspace):
    ws = workspace
    man = str(ws / "data" / "manifest.csv")
    assert run(ws, "train", "--manifest", man, "--out", str(ws / "models")) == 0
    assert run(ws, "predict", "--manifest", man, "--models", str(ws / "models"), "--out", str(ws / "pred")) == 0
    assert run(ws, "embed", "--manifest", man, "--models", str(ws / "models"), "--out", str(ws / "emb")) == 0
    assert run(ws, "features", "--manifest", man, "--feature", "fbank27", "--out", str(ws / "fb")) == 0
    preds = sorted((ws / "pred").iterdir())
    assert run(ws, "smooth", "--models", str(ws / "models"), "--out", str(ws / "sm"), *map(str, preds)) == 0
    assert run(ws, "evaluate", "--manifest", man, "--predictions", f"raw={ws / 'pred'}",
               "--predictions", str(ws / "sm"), "--out", str(ws / "eval")) == 0
    assert sorted(p.name for p in (ws / "eval").iterdir()) == ["raw", "sm", "summary.txt"]
    assert len(list((ws / "emb").iterdir())) == 5 and len(list((ws / "fb").iterdir())) == 5


def test_gradcheck(tmp_path, capsys):
    assert cli.main(["gradcheck", "--out", str(tmp_path / "g.json"), "--frames", "300"]) == 0
    rep = json.loads((tmp_path / "g.json").read_text())
    assert set(rep) == {"cca_loss", "objective_alpha1", "objective_alpha0"}
    assert max(rep.values()) < 1e-4


def test_usage_error_exit_code(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--out", str(tmp_path)])  # no --manifest
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--manifest", "m.csv", "--out", str(tmp_path), "--feature", "mel"])
    assert exc.value.code == 2


def test_data_error_exit_code(tmp_path, capsys):
    assert cli.main(["train", "--manifest", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 3
    (tmp_path / "bad.cfg").write_text("alpha = -2\n")
    assert cli.main(["gradcheck", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "g")]) == 3


def test_embed_features_need_models(workspace, tmp_path):
    man = str(workspace / "data" / "manifest.csv")
    assert cli.main(["features", "--manifest", man, "--feature", "embed", "--out", str(tmp_path)]) == 3


def test_missing_prediction_exit_code(workspace, tmp_path, capsys):
    man = str(workspace / "data" / "manifest.csv")
    assert cli.main(["evaluate", "--manifest", man, "--predictions", str(tmp_path), "--out", str(tmp_path / "e")]) == 3
    assert "missing prediction" in capsys.readouterr().err


def test_numerical_failure_exit_code(monkeypatch, tmp_path):
    monkeypatch.setattr(cli, "gradcheck_report", lambda seed, frames: {"cca_loss": 0.5})
    assert cli.main(["gradcheck", "--out", str(tmp_path / "g.json")]) == 4


def test_flags_override_config(tmp_path):
    (tmp_path / "c.cfg").write_text("alpha = 0.5\nseed = 3\n")
    args = cli.build_parser().parse_args(
        ["train", "--config", str(tmp_path / "c.cfg"), "--manifest", "m", "--out", "o", "--alpha", "0", "--no-mask"])
    cfg = cli._config(args)
    assert cfg.alpha == 0.0 and cfg.seed == 3 and cfg.use_mask is False
