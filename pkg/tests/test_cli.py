import json

import pytest
from fastapi.testclient import TestClient

from eventflow import cli
from eventflow.sequences import load_dataset, read_jsonl
from eventflow.service import app

SMALL = {"net": {"size": "small"}, "steps": 3, "cycle": 3, "batch_size": 8, "n_evals": 1}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.json").write_text(json.dumps(SMALL))
    assert cli.main(["gen-data", "--kind", "hawkes1", "--n", "30", "--t-max", "24", "--delta-t", "4",
                     "--out", str(root / "data")]) == 0
    return root


def test_gen_data(workspace):
    sp = load_dataset(workspace / "data")
    assert sp.support_end == 24.0 and sp.meta["delta_t"] == 4.0
    assert len(sp.train) + len(sp.val) + len(sp.test) == 30


def test_gen_data_params_and_seed_after_subcommand(tmp_path):
    argv = ["gen-data", "--kind", "homogeneous_poisson", "--n", "10", "--params", '{"rate": 0.5}',
            "--out", str(tmp_path / "a"), "--seed", "3"]
    assert cli.main(argv) == 0
    assert cli.main(["--seed", "3"] + argv[:-2] + ["--out", str(tmp_path / "b")]) == 0
    assert list(load_dataset(tmp_path / "a").train) == list(load_dataset(tmp_path / "b").train)
    assert load_dataset(tmp_path / "a").meta["params"]["rate"] == 0.5


def test_unconditional_pipeline(workspace, capsys):
    run = workspace / "uncond"
    assert cli.main(["--config", str(workspace / "small.json"), "train", "--data", str(workspace / "data"),
                     "--out", str(run)]) == 0
    assert cli.main(["sample", "--ckpt", str(run), "--n", "7", "--nfe", "2", "--out", str(workspace / "s.jsonl"),
                     "--seed", "1"]) == 0
    seqs = read_jsonl(workspace / "s.jsonl")
    assert len(seqs) == 7
    capsys.readouterr()
    assert cli.main(["evaluate", "--metric", "mmd", "--a", str(workspace / "s.jsonl"),
                     "--b", str(workspace / "data" / "test.jsonl"), "--out", str(workspace / "m.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["metric"] == "mmd" and report["value"] >= 0
    assert json.loads((workspace / "m.json").read_text()) == report


def test_forecast_pipeline(workspace, capsys):
    run = workspace / "fc"
    assert cli.main(["train", "--config", str(workspace / "small.json"), "--task", "forecast",
                     "--data", str(workspace / "data"), "--out", str(run)]) == 0
    outs = []
    for seed in ("0", "1"):
        out = workspace / f"f{seed}.jsonl"
        assert cli.main(["forecast", "--ckpt", str(run), "--data", str(workspace / "data"), "--nfe", "2",
                         "--windows", "3", "--out", str(out), "--seed", seed]) == 0
        outs.append(str(out))
    capsys.readouterr()
    assert cli.main(["evaluate", "--metric", "distance", "--forecasts", *outs]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["n_pairs"] == 2 * 3 * 6 and "std_over_seeds" in report


def test_evaluate_requires_inputs():
    with pytest.raises(SystemExit):
        cli.main(["evaluate", "--metric", "mmd"])
    with pytest.raises(SystemExit):
        cli.main(["evaluate", "--metric", "mare"])


def test_experiment_command(tmp_path, capsys):
    spec = {
        "dataset": str(tmp_path / "data" / "homogeneous_poisson"),
        "seeds": [0],
        "nfes": [1],
        "out_dir": str(tmp_path / "out"),
        "train": SMALL,
        "n_samples": 10,
        "n_sequences": 20,
    }
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert cli.main(["experiment", "--spec", str(tmp_path / "spec.json"), "--plot"]) == 0
    assert "| eventflow | 1 | mmd |" in capsys.readouterr().out
    assert (tmp_path / "out" / "report.csv").exists()
    assert (tmp_path / "out" / "plots" / "homogeneous_poisson.png").exists()


def test_server_mode_is_thin_client(workspace, monkeypatch, capsys):
    client = TestClient(app)
    calls = []

    def post(server, route, payload):
        calls.append(route)
        r = client.post(route, json=payload)
        r.raise_for_status()
        return r.json()

    monkeypatch.setattr(cli, "_post", post)
    run = workspace / "uncond"
    if not run.exists():
        cli.main(["train", "--config", str(workspace / "small.json"), "--data", str(workspace / "data"),
                  "--out", str(run)])
    out = workspace / "remote.jsonl"
    assert cli.main(["--server", "http://svc", "sample", "--ckpt", str(run), "--n", "3", "--nfe", "2",
                     "--out", str(out)]) == 0
    assert len(read_jsonl(out)) == 3
    capsys.readouterr()
    assert cli.main(["evaluate", "--server", "http://svc", "--metric", "mmd", "--a", str(out),
                     "--b", str(workspace / "data" / "test.jsonl")]) == 0
    assert json.loads(capsys.readouterr().out)["metric"] == "mmd"
    assert calls == ["/sample", "/mmd"]
