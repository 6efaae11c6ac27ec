import json
import os

import numpy as np
import pytest

from hopfe import cli, data, model
from hopfe.cli import RunConfig


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert cli.run(["generate", "--n", "100", "--avg-degree", "10", "--seed", "7", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = cli.run(["train", "--data", str(dataset), "--dim", "10", "--steps", "500",
                    "--batch", "64", "--neg", "8", "--eval-max", "20", "--out", str(out)])
    assert code == 0
    return out


class TestPipeline:
    def test_generate_files(self, dataset):
        names = set(os.listdir(dataset))
        assert {"train.txt", "valid.txt", "test.txt", "entities.dict", "relations.dict"} <= names
        assert data.load_dataset(dataset).num_entities == 100

    def test_train_outputs(self, trained):
        assert (trained / "checkpoint.bin").exists()
        recs = [json.loads(line) for line in (trained / "train_log.jsonl").read_text().splitlines()]
        assert recs[-1]["step"] == 500
        cfg = json.loads((trained / "config.json").read_text())
        assert cfg["dim"] == 10

    def test_eval(self, trained, dataset, capsys):
        code = cli.run(["eval", "--checkpoint", str(trained / "checkpoint.bin"), "--data", str(dataset),
                        "--split", "valid", "--out", str(trained)])
        assert code == 0
        rep = json.loads((trained / "eval_valid.json").read_text())
        assert rep["query_count"] == 2 * len(data.load_dataset(dataset).split("valid"))
        assert "MRR" in capsys.readouterr().out

    def test_analyze(self, trained, dataset):
        code = cli.run(["analyze", "--checkpoint", str(trained / "checkpoint.bin"), "--data", str(dataset),
                        "--inverse", "r0,r0", "--composition", "0,0,0", "--bins", "16",
                        "--out", str(trained)])
        assert code == 0
        head = (trained / "angle_histograms.csv").read_text().splitlines()[0]
        assert head == "relation_set,dim_agg,bin_left,bin_right,count"

    def test_project(self, trained, dataset):
        code = cli.run(["project", "--checkpoint", str(trained / "checkpoint.bin"), "--data", str(dataset),
                        "--entities", "e3", "5", "--samples", "8", "--out", str(trained)])
        assert code == 0
        lines = (trained / "fiber_e3.csv").read_text().splitlines()
        assert lines[0] == "dim,t,x,y,z"
        assert (trained / "fiber_5.csv").exists()

    def test_stats(self, dataset, tmp_path):
        assert cli.run(["stats", "--data", str(dataset), "--out", str(tmp_path)]) == 0
        stats = json.loads((tmp_path / "relation_stats.json").read_text())
        assert sum(stats["fractions"].values()) == pytest.approx(1.0)

    def test_data_dir_untouched(self, dataset, trained):
        before = {n: (dataset / n).read_bytes() for n in os.listdir(dataset)}
        cli.run(["stats", "--data", str(dataset), "--out", str(trained)])
        assert {n: (dataset / n).read_bytes() for n in os.listdir(dataset)} == before

    def test_seed_reproducible(self, dataset, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            cli.run(["train", "--data", str(dataset), "--dim", "4", "--heads", "2", "--steps", "20",
                     "--batch", "32", "--neg", "4", "--seed", "3", "--out", str(out)])
            outs.append(out)
        assert (outs[0] / "checkpoint.bin").read_bytes() == (outs[1] / "checkpoint.bin").read_bytes()
        assert (outs[0] / "train_log.jsonl").read_text() == (outs[1] / "train_log.jsonl").read_text()


class TestRandomModelEval:
    def test_mrr_near_uniform_expectation(self, dataset, tmp_path):
        store = data.load_dataset(dataset)
        params = model.init_model(store.num_entities, store.num_relations, model.ModelConfig(dim=10), seed=1)
        ckpt = tmp_path / "c.bin"
        model.save_checkpoint(ckpt, params)
        assert cli.run(["eval", "--checkpoint", str(ckpt), "--data", str(dataset), "--split", "test",
                        "--out", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "eval_test.json").read_text())
        # candidates left after filtering, per query; uniform rank on 1..N gives E[1/r] = H_N / N
        fi = store.filter_index
        means, variances = [], []
        for h, r, t in store.split("test").tolist():
            for known in (fi.tails(h, r), fi.heads(r, t)):
                n = store.num_entities - len(known) + 1
                inv = 1.0 / np.arange(1, n + 1)
                means.append(inv.mean())
                variances.append((inv ** 2).mean() - inv.mean() ** 2)
        expect = np.mean(means)
        se = np.sqrt(np.sum(variances)) / len(means)
        assert abs(rep["mrr"] - expect) < 3 * se


class TestGradcheck:
    def test_passes(self, capsys):
        assert cli.run(["gradcheck", "--seed", "1"]) == 0
        out = capsys.readouterr().out
        err = float(out.split("max relative error ")[1].split()[0])
        assert err < 1e-4

    def test_failure_exit(self):
        assert cli.run(["gradcheck", "--seed", "1", "--tolerance", "1e-30"]) == 1


class TestConfig:
    def test_defaults(self):
        cfg = cli.parse_config(None)
        assert cfg == RunConfig()
        assert (cfg.dim, cfg.heads, cfg.batch, cfg.neg, cfg.alpha, cfg.gamma, cfg.lr, cfg.decay) == \
            (100, 1, 512, 64, 1.0, 12.0, 0.1, 0.1)
        assert (cfg.matching, cfg.variant) == ("min", "hopfe")

    def test_flag_beats_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"gamma": 6, "dim": 20}))
        args = cli.build_parser().parse_args(["train", "--data", ".", "--gamma", "24", "--config", str(path)])
        cfg = cli.parse_config(args)
        assert cfg.gamma == 24
        assert cfg.dim == 20

    def test_profile_below_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"dim": 8}))
        args = cli.build_parser().parse_args(["train", "--data", ".", "--profile", "paper",
                                              "--config", str(path)])
        cfg = cli.parse_config(args)
        assert cfg.dim == 8
        assert cfg.neg == cli.PAPER_PROFILE["neg"]

    def test_unknown_file_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"gama": 6}))
        with pytest.raises(cli.ConfigError) as exc:
            cli.parse_config(None, str(path))
        assert exc.value.flag == "--config"

    def test_no_hopf_heads_rejected(self, dataset, capsys):
        code = cli.run(["train", "--data", str(dataset), "--variant", "no-hopf", "--heads", "5"])
        assert code == 2
        assert "--heads" in capsys.readouterr().err

    @pytest.mark.parametrize("argv,flag", [
        (["--dim", "0"], "--dim"), (["--decay", "2"], "--decay"), (["--lr", "-1"], "--lr"),
        (["--semantics", "x.txt"], "--vectors")])
    def test_bad_values(self, dataset, capsys, argv, flag):
        assert cli.run(["train", "--data", str(dataset)] + argv) == 2
        assert flag in capsys.readouterr().err

    def test_missing_data_dir(self, tmp_path, capsys):
        assert cli.run(["stats", "--data", str(tmp_path / "nope")]) == 2
        assert "--data" in capsys.readouterr().err

    def test_generate_bad_degree(self, tmp_path):
        assert cli.run(["generate", "--n", "10", "--avg-degree", "10", "--out", str(tmp_path)]) == 2

    def test_unknown_subcommand(self):
        assert cli.run(["fly"]) == 2

    def test_bad_log_level(self, monkeypatch, capsys):
        monkeypatch.setenv("HOPFE_LOG", "loud")
        assert cli.run(["gradcheck"]) == 2
        assert "HOPFE_LOG" in capsys.readouterr().err

    def test_runtime_failure_exit(self, tmp_path, dataset):
        bad = tmp_path / "c.bin"
        bad.write_bytes(b"garbage")
        assert cli.run(["eval", "--checkpoint", str(bad), "--data", str(dataset)]) == 1

    def test_mismatched_checkpoint(self, tmp_path, dataset):
        ckpt = tmp_path / "c.bin"
        model.save_checkpoint(ckpt, model.init_model(3, 1, model.ModelConfig(dim=2)))
        assert cli.run(["eval", "--checkpoint", str(ckpt), "--data", str(dataset)]) == 2
