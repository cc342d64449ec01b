import json

import numpy as np
import pytest

from tsen.analysis import read_embeddings
from tsen.cli import EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_IO, main
from tsen.config import ConfigError, config_from_dict, parse_config

TINY_MODEL = {"hidden_dim": 8, "num_heads": 2, "mlp_hidden": 8}
TINY_TRAIN = {"base_lr": 0.01, "warmup_steps": 5, "batch_size": 8, "epochs": 2, "repetitions": 2}


def write_config(tmp_path, name="cfg.json", **sections):
    cfg = {"dataset": {"source": "synthetic", "n_graphs": 20, "n_nodes": 8, "signal": 0.8},
           "model": TINY_MODEL, "train": TINY_TRAIN, "output": {"dir": str(tmp_path / "out")}, "seed": 3}
    cfg.update(sections)
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


# --- config -----------------------------------------------------------------------------------


def test_minimal_config_gets_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"dataset": {"source": "synthetic"}}')
    cfg = parse_config(path, env={})
    assert cfg.model.variant == "TSEN" and cfg.model.hidden_dim == 64
    assert cfg.train.epochs == 300 and cfg.train.base_lr == 1.0 and cfg.seed == 0
    assert cfg.dataset.n_graphs == 400 and cfg.dataset.threshold == 0.3


@pytest.mark.parametrize("raw, key", [
    ({"dataset": {"threshold": 1.5}}, "dataset.threshold"),
    ({"dataset": {"colour": 1}}, "dataset.colour"),
    ({"dataset": {}, "model": {"hidden_dim": 6}}, "model.hidden_dim"),
    ({"dataset": {}, "model": {"dropout_mlp": 1.0}}, "model.dropout_mlp"),
    ({"dataset": {}, "train": {"base_lr": -1}}, "train.base_lr"),
    ({"dataset": {}, "train": {"epochs": "ten"}}, "train.epochs"),
    ({"dataset": {}, "train": {"seed": 4}}, "train.seed"),
    ({"dataset": {"source": "manifest"}}, "dataset.path"),
    ({"dataset": {"source": "ftp"}}, "dataset.source"),
    ({"model": {}}, "dataset"),
    ({"dataset": {}, "extras": {}}, "extras"),
    ({"dataset": {}, "seed": -2}, "seed"),
])
def test_config_errors_name_key_path(raw, key):
    with pytest.raises(ConfigError) as err:
        config_from_dict(raw, env={})
    assert str(err.value).startswith(key)


def test_config_echo_round_trip(tmp_path):
    cfg = parse_config(write_config(tmp_path), env={})
    echoed = cfg.echo(tmp_path / "echo")
    assert parse_config(echoed, env={}) == cfg
    assert echoed.read_text() == cfg.to_json()


def test_seed_env_override(tmp_path):
    path = write_config(tmp_path)
    assert parse_config(path, env={"TSEN_SEED": "11"}).seed == 11
    assert parse_config(path, env={"TSEN_SEED": "11"}).train_config().seed == 11
    with pytest.raises(ConfigError, match="TSEN_SEED"):
        parse_config(path, env={"TSEN_SEED": "x"})


def test_bad_json_and_missing_file(tmp_path):
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(tmp_path / "bad.json")
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "absent.json")


# --- subcommands -----------------------------------------------------------------------------


@pytest.fixture(autouse=True)
def no_env_seed(monkeypatch):
    monkeypatch.delenv("TSEN_SEED", raising=False)


def test_gen_data_writes_manifest(tmp_path, capsys):
    assert main(["gen-data", "--out", str(tmp_path / "d"), "--graphs", "10", "--nodes", "6", "--signal", "0.5",
                 "--seed", "1"]) == 0
    manifest = tmp_path / "d" / "manifest.csv"
    assert manifest.exists() and len(manifest.read_text().splitlines()) == 11
    assert len(list((tmp_path / "d" / "matrices").iterdir())) == 10


def test_train_outputs_and_byte_identical_rerun(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg), "--variant", "GCN"]) == 0
    out = tmp_path / "out"
    summary = (out / "summary.csv").read_text()
    header, row = summary.splitlines()
    assert header == "variant,dataset,acc_mean,acc_std,f1_mean,f1_std"
    assert row.startswith("GCN,synthetic,")
    assert sorted(p.name for p in (out / "reports").iterdir()) == ["GCN_run0.json", "GCN_run1.json"]
    assert (out / "checkpoints" / "GCN_run1.npz").exists()
    assert json.loads((out / "config.json").read_text())["model"]["variant"] == "GCN"
    reports = [(out / "reports" / f"GCN_run{r}.json").read_bytes() for r in range(2)]
    assert main(["train", "--config", str(cfg), "--variant", "GCN"]) == 0
    assert (out / "summary.csv").read_text() == summary
    assert [(out / "reports" / f"GCN_run{r}.json").read_bytes() for r in range(2)] == reports


def test_train_from_manifest(tmp_path):
    main(["gen-data", "--out", str(tmp_path / "d"), "--graphs", "12", "--nodes", "6", "--seed", "2"])
    cfg = write_config(tmp_path, dataset={"source": "manifest", "path": str(tmp_path / "d" / "manifest.csv"),
                                          "threshold": 0.2})
    assert main(["train", "--config", str(cfg), "--variant", "SBGCN"]) == 0
    assert (tmp_path / "out" / "summary.csv").read_text().splitlines()[1].startswith("SBGCN,d,")


def test_ablate_table(tmp_path):
    cfg = write_config(tmp_path, train={**TINY_TRAIN, "epochs": 1})
    assert main(["ablate", "--config", str(cfg)]) == 0
    rows = (tmp_path / "out" / "ablation.csv").read_text().splitlines()
    assert rows[0] == "variant,accuracy,f1"
    assert [r.split(",")[0] for r in rows[1:]] == ["GCN", "SBGCN", "SBGCN_FFN", "SBGCN_SA", "GCN_Trans", "TSEN"]
    assert len((tmp_path / "out" / "summary.csv").read_text().splitlines()) == 7


def test_cka_and_export(tmp_path):
    cfg = write_config(tmp_path, train={**TINY_TRAIN, "epochs": 1, "repetitions": 1})
    for v in ("TSEN", "GCN"):
        assert main(["train", "--config", str(cfg), "--variant", v]) == 0
    ck = tmp_path / "out" / "checkpoints"
    assert main(["cka", "--config", str(cfg), "--checkpoints", str(ck / "TSEN_run0.npz"), str(ck / "GCN_run0.npz"),
                 "--layers", "1", "2", "--include-self"]) == 0
    rows = (tmp_path / "out" / "cka.csv").read_text().splitlines()
    assert rows[0] == "pair,layer_1,layer_2"
    assert rows[1] == "TSEN vs TSEN,1.0000,1.0000"
    assert rows[3].startswith("TSEN vs GCN,")
    first = (tmp_path / "out" / "cka.csv").read_bytes()
    main(["cka", "--config", str(cfg), "--checkpoints", str(ck / "TSEN_run0.npz"), str(ck / "GCN_run0.npz"),
          "--layers", "1", "2", "--include-self"])
    assert (tmp_path / "out" / "cka.csv").read_bytes() == first
    emb = tmp_path / "emb.csv"
    assert main(["export-emb", "--config", str(cfg), "--checkpoint", str(ck / "TSEN_run0.npz"),
                 "--out", str(emb)]) == 0
    ids, labels, matrix = read_embeddings(emb)
    assert matrix.shape == (20, 8 + 8 + 8) and ids[0] == "sub0000"
    assert set(labels.tolist()) == {0, 1}


def test_sweep_table(tmp_path):
    cfg = write_config(tmp_path, model={**TINY_MODEL, "variant": "GCN"}, train={**TINY_TRAIN, "epochs": 1})
    assert main(["sweep", "--config", str(cfg), "--thresholds", "0,0.2,0.4"]) == 0
    rows = (tmp_path / "out" / "sweep.csv").read_text().splitlines()
    assert rows[0] == "threshold,accuracy,f1,mean_edges" and len(rows) == 4
    edges = [float(r.split(",")[-1]) for r in rows[1:]]
    assert edges == sorted(edges, reverse=True)
    first = (tmp_path / "out" / "sweep.csv").read_bytes()
    main(["sweep", "--config", str(cfg), "--thresholds", "0,0.2,0.4"])
    assert (tmp_path / "out" / "sweep.csv").read_bytes() == first


# --- exit codes ------------------------------------------------------------------------------


def test_exit_codes_are_distinct(tmp_path, capsys):
    bad = write_config(tmp_path, "bad.json", dataset={"threshold": 1.5})
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG
    assert "dataset.threshold" in capsys.readouterr().err

    missing = write_config(tmp_path, "missing.json", dataset={"source": "manifest", "path": str(tmp_path / "no.csv")})
    assert main(["train", "--config", str(missing)]) == EXIT_DATA

    diverge = write_config(tmp_path, "div.json", train={**TINY_TRAIN, "base_lr": 1e300, "warmup_steps": 1})
    with np.errstate(all="ignore"):
        assert main(["train", "--config", str(diverge)]) == EXIT_DIVERGED

    blocker = tmp_path / "file"
    blocker.write_text("")
    unwritable = write_config(tmp_path, "io.json", output={"dir": str(blocker / "sub")})
    assert main(["train", "--config", str(unwritable)]) == EXIT_IO
    assert len({EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_IO, 0}) == 5
