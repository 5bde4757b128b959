import json

import pytest

from homognet import cli


def run_cli(*args, expect=0, capsys=None):
    code = cli.main([str(a) for a in args])
    assert code == expect, f"exit {code} != {expect} for {args}"
    if capsys is not None:
        out = capsys.readouterr().out.strip().splitlines()
        return json.loads(out[-1]) if out else {}
    return {}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli-corpus")
    code = cli.main(["generate", "--out", str(out), "--seed", "7",
                     "--sizes", "14,6,6,6", "--resolution", "32",
                     "--contrasts", "5", "--jobs", "1"])
    assert code == 0
    code = cli.main(["fit-pca", "--manifest", str(out / "manifest.json"), "--k", "5"])
    assert code == 0
    code = cli.main(["features", "--manifest", str(out / "manifest.json")])
    assert code == 0
    return out


def test_generate_is_deterministic(tmp_path, capsys):
    a = run_cli("generate", "--out", tmp_path / "a", "--seed", "3",
                "--sizes", "3,1,1,1", "--resolution", "32", capsys=capsys)
    b = run_cli("generate", "--out", tmp_path / "b", "--seed", "3",
                "--sizes", "3,1,1,1", "--resolution", "32", capsys=capsys)
    assert a["hashes"] == b["hashes"]


def test_generate_requires_seed(capsys):
    with pytest.raises(SystemExit) as err:
        cli.main(["generate", "--out", "/tmp/nowhere"])
    assert err.value.code == 2


def test_train_and_eval_report_schema(corpus, capsys):
    man = corpus / "manifest.json"
    summary = run_cli("train", "--manifest", man, "--model", "vol", "--out", corpus,
                      "--seed", "1", "--max-epochs", "25", "--patience", "8", capsys=capsys)
    assert "val_loss" in summary and summary["model"] == "vol"
    report = run_cli("eval", "--manifest", man, "--checkpoint", corpus / "model-vol.ckpt",
                     "--split", "val", "--out", corpus, capsys=capsys)
    assert "rel_rmse_pct" in report["report"]
    assert report["provenance"]["manifest"]
    assert (corpus / "eval-val-vol.csv").exists()
    assert (corpus / "r2-val-vol.svg").exists()


def test_train_bnn_then_mine(corpus, capsys):
    man = corpus / "manifest.json"
    run_cli("train", "--manifest", man, "--model", "bnn", "--out", corpus,
            "--seed", "2", "--max-epochs", "25", "--patience", "8", capsys=capsys)
    summary = run_cli("mine", "--manifest", man, "--checkpoint", corpus / "model-bnn.ckpt",
                      "--split", "test", "--out", corpus,
                      "--error-quantile", "0.5", "--sigma-quantile", "0.5", capsys=capsys)
    assert summary["n_selected"] >= 0
    assert (corpus / "mining_records.csv").exists()


def test_solve_single_index(corpus, capsys):
    man = corpus / "manifest.json"
    summary = run_cli("solve", "--manifest", man, "--index", "2", capsys=capsys)
    assert len(summary["kappa"]) == 3
    assert 0.0 < summary["volume_fraction"] < 1.0
    assert cli.main(["solve", "--manifest", str(man), "--index", "9999"]) == 2
    capsys.readouterr()


def test_select_writes_rankings(corpus, capsys):
    man = corpus / "manifest.json"
    summary = run_cli("select", "--manifest", man, "--out", corpus, capsys=capsys)
    assert set(summary["methods"]) == {"pearson", "anova", "rfe"}
    assert (corpus / "rankings.csv").exists()


def test_select_sweep_emits_curve(corpus, tmp_path, capsys):
    man = corpus / "manifest.json"
    summary = run_cli("select", "--manifest", man, "--out", tmp_path, "--seed", "3",
                      "--methods", "pearson", "--sweep", "--sizes", "4,8",
                      "--repeats", "1", "--max-epochs", "4", "--patience", "3",
                      capsys=capsys)
    assert summary["sweep"]["pearson"]["sizes"] == [4, 8]
    assert (tmp_path / "sweep.csv").exists()
    assert (tmp_path / "sweep.svg").exists()


def test_physics_check_and_report(corpus, capsys):
    man = corpus / "manifest.json"
    summary = run_cli("physics-check", "--manifest", man,
                      "--checkpoint", corpus / "model-vol.ckpt",
                      "--split", "benchmark", "--out", corpus,
                      "--n-shifts", "6", "--n-samples", "2", capsys=capsys)
    assert len(summary["translation"]["median_cov"]) == 3
    report = run_cli("report", "--out", corpus, capsys=capsys)
    assert report["artifacts"]


def test_exit_codes_by_category(corpus, tmp_path, capsys):
    man = corpus / "manifest.json"
    # config: variable-contrast training on a single-contrast manifest
    assert cli.main(["train", "--manifest", str(man), "--model", "hybrid-variable",
                     "--out", str(tmp_path), "--seed", "1"]) == 2
    # data: corrupted manifest content
    bad = tmp_path / "manifest.json"
    bad.write_text("{not json")
    assert cli.main(["solve", "--manifest", str(bad), "--index", "0"]) == 3
    capsys.readouterr()


def test_summary_is_machine_readable_json(corpus, capsys):
    man = corpus / "manifest.json"
    run_cli("solve", "--manifest", man, "--index", "0", capsys=None)
    out = capsys.readouterr().out.strip()
    parsed = json.loads(out.splitlines()[-1])
    assert parsed["command"] == "solve"


def test_config_file_and_flag_precedence(corpus, tmp_path, capsys):
    man = corpus / "manifest.json"
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dense-max-epochs": 2, "dense-patience": 2}))
    summary = run_cli("train", "--manifest", man, "--model", "vol", "--out", tmp_path,
                      "--seed", "5", "--config", cfg, capsys=capsys)
    assert summary["val_loss"] > 0  # trained with the tiny config budget
    meta = json.loads((tmp_path / "model-vol.ckpt").read_bytes().split(b"\n", 1)[0])
    assert meta["meta"]["config"]["max_epochs"] == 2
    # explicit flag beats the config file
    summary = run_cli("train", "--manifest", man, "--model", "vol", "--out", tmp_path,
                      "--seed", "5", "--config", cfg, "--dense-max-epochs", "3", capsys=capsys)
    meta = json.loads((tmp_path / "model-vol.ckpt").read_bytes().split(b"\n", 1)[0])
    assert meta["meta"]["config"]["max_epochs"] == 3


def test_env_var_output_root(corpus, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("HOMOGNET_OUT", str(tmp_path / "envout"))
    summary = run_cli("report", capsys=capsys)
    assert "envout" in summary["directory"]
