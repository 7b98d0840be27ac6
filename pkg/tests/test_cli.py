import json

import jsonschema
import numpy as np
import pytest

from linfuse.cli import METRICS_SCHEMA, main, parse_config_text
from linfuse.graph_store import make_dataset, write_dataset
from synth import csbm

TRAIN_FLAGS = ["--n-batches", "20", "--batch-size", "16", "--lr", "0.01", "--n-layers", "2",
               "--hidden-dims", "8", "--entropy", "1"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_dataset(csbm(n=200, c=3, d=10, train_per_class=20, seed=2, name="a"), root / "a")
    g = csbm(n=120, c=5, d=6, train_per_class=6, val=0, seed=3, name="b")
    write_dataset(g, root / "b")
    return root


@pytest.fixture(scope="module")
def model(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("model") / "m.gany"
    assert main(["train", "--dataset", str(data / "a"), "--out", str(out), *TRAIN_FLAGS]) == 0
    return out


class TestPreprocess:
    def test_cache_files_and_hits(self, data, tmp_path, capsys):
        args = ["preprocess", "--dataset", str(data / "a"), "--channels", "linear,sgc1,sgc2,hgc1,hgc2",
                "--cache-dir", str(tmp_path)]
        assert main(args) == 0
        first = capsys.readouterr().out.splitlines()
        assert [ln.split("\t")[1] for ln in first] == ["computed"] * 5
        assert len(list(tmp_path.rglob("*.f32"))) == 5
        assert main(args) == 0
        second = capsys.readouterr().out.splitlines()
        assert [ln.split("\t")[1] for ln in second] == ["cache hit"] * 5

    def test_unknown_channel(self, data, capsys):
        assert main(["preprocess", "--dataset", str(data / "a"), "--channels", "linear,gat3"]) == 2
        assert "gat3" in capsys.readouterr().err

    def test_malformed_dataset(self, tmp_path, capsys):
        (tmp_path / "meta.json").write_text("{")
        assert main(["preprocess", "--dataset", str(tmp_path)]) == 2


class TestTrain:
    def test_missing_key(self, data, tmp_path, capsys):
        code = main(["train", "--dataset", str(data / "a"), "--out", str(tmp_path / "m"),
                     "--n-batches", "5", "--lr", "0.01", "--n-layers", "1"])
        assert code == 2
        assert "entropy" in capsys.readouterr().err

    def test_missing_hidden_dims(self, data, tmp_path, capsys):
        flags = [f for f in TRAIN_FLAGS]
        i = flags.index("--hidden-dims")
        del flags[i:i + 2]
        assert main(["train", "--dataset", str(data / "a"), "--out", str(tmp_path / "m"), *flags]) == 2
        assert "hidden_dims" in capsys.readouterr().err

    def test_unknown_config_key(self, data, tmp_path):
        cfg = tmp_path / "x.cfg"
        cfg.write_text("n_batches = 5\nmomentum = 0.9\n")
        assert main(["train", "--config", str(cfg), "--dataset", str(data / "a"), "--out", str(tmp_path / "m")]) == 2

    def test_same_seed_identical(self, data, tmp_path, model):
        out = tmp_path / "again.gany"
        assert main(["train", "--dataset", str(data / "a"), "--out", str(out), *TRAIN_FLAGS]) == 0
        assert out.read_bytes() == model.read_bytes()

    def test_config_file_and_override(self, data, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            f"dataset = {data / 'a'}\n# comment\nn_batches = 20\nbatch_size = 16\nlr = 0.01\n"
            "n_layers = 2\nhidden_dims = 8\nentropy = 1\nseed = 7\n"
        )
        out = tmp_path / "m.gany"
        assert main(["train", "--config", str(cfg), "--seed", "0", "--out", str(out)]) == 0
        doc = json.loads((tmp_path / "m.gany.metrics.json").read_text())
        assert doc["seed"] == 0 and doc["config"]["n_batches"] == 20

    def test_metrics_schema(self, model):
        doc = json.loads(model.with_name(model.name + ".metrics.json").read_text())
        jsonschema.validate(doc, METRICS_SCHEMA)
        assert set(doc["mean_attention"]) == {"linear", "sgc1", "sgc2", "hgc1", "hgc2"}
        assert len(doc["loss_trace"]) == 20

    def test_config_parser(self):
        cfg = parse_config_text("lr = 0.5  # half\nmask_hgc = false\nhidden_dims = 32, 16\n")
        assert cfg == {"lr": 0.5, "mask_hgc": False, "hidden_dims": (32, 16)}


class TestInfer:
    def test_predictions(self, data, model, tmp_path, capsys):
        pred = tmp_path / "p.tsv"
        assert main(["infer", "--model", str(model), "--dataset", str(data / "b"),
                     "--predictions", str(pred)]) == 0
        rows = [ln.split("\t") for ln in pred.read_text().splitlines()]
        meta = json.loads((data / "b" / "meta.json").read_text())
        test_ids = (data / "b" / "splits" / "test.txt").read_text().split()
        assert len(rows) == len(test_ids)
        assert all(0 <= int(k) < meta["num_classes"] and 0 < float(p) <= 1 for _, k, p in rows)
        doc = json.loads((tmp_path / "p.tsv.metrics.json").read_text())
        jsonschema.validate(doc, METRICS_SCHEMA)
        assert doc["accuracy"]["val"] is None

    def test_empty_val(self, data, model, tmp_path):
        code = main(["infer", "--model", str(model), "--dataset", str(data / "b"), "--split", "val",
                     "--predictions", str(tmp_path / "p.tsv")])
        assert code == 2

    def test_channel_mismatch(self, data, model, tmp_path):
        code = main(["infer", "--model", str(model), "--dataset", str(data / "b"),
                     "--channels", "linear,sgc1,sgc2,hgc1", "--predictions", str(tmp_path / "p.tsv")])
        assert code == 5

    def test_corrupt_model(self, data, model, tmp_path):
        bad = tmp_path / "bad.gany"
        blob = bytearray(model.read_bytes())
        blob[20] ^= 0xFF
        bad.write_bytes(bytes(blob))
        assert main(["eval", "--model", str(bad), "--dataset", str(data / "b")]) == 3

    def test_missing_model(self, data, tmp_path):
        assert main(["eval", "--model", str(tmp_path / "nope"), "--dataset", str(data / "b")]) == 3

    def test_eval_output(self, data, model, capsys):
        assert main(["eval", "--model", str(model), "--dataset", str(data / "b")]) == 0
        out = dict(ln.split("\t") for ln in capsys.readouterr().out.splitlines())
        assert out["attention_hgc1"] == "0.0000"
        assert 0 <= float(out["test_accuracy"]) <= 100


class TestBaseline:
    def test_gcn_rejected(self, data, capsys):
        assert main(["baseline", "--method", "gcn", "--dataset", str(data / "a")]) == 2
        assert "gcn" in capsys.readouterr().err

    @pytest.mark.parametrize("method", ["labelprop", "linear", "sgc2", "hgc1", "meanagg"])
    def test_runs(self, data, method, tmp_path, capsys):
        metrics = tmp_path / "m.json"
        assert main(["baseline", "--method", method, "--dataset", str(data / "a"), "--metrics", str(metrics)]) == 0
        out = dict(ln.split("\t") for ln in capsys.readouterr().out.splitlines())
        assert out["method"] == method
        if method == "labelprop":
            assert float(out["alpha"]) in (0.1, 0.3, 0.5, 0.7, 0.9) and int(out["hops"]) in (1, 2, 3)
        jsonschema.validate(json.loads(metrics.read_text()), METRICS_SCHEMA)

    def test_deterministic(self, data, capsys):
        main(["baseline", "--method", "sgc1", "--dataset", str(data / "a")])
        a = capsys.readouterr().out
        main(["baseline", "--method", "sgc1", "--dataset", str(data / "a")])
        assert capsys.readouterr().out == a


class TestExportFeatures:
    def test_histograms(self, data, tmp_path):
        out = tmp_path / "h.tsv"
        assert main(["export-features", "--dataset", str(data / "a"), "--bins", "10", "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "dim\tbin_lo\tbin_hi\tcount"
        counts = np.array([int(ln.split("\t")[3]) for ln in lines[1:]]).reshape(20, 10)
        np.testing.assert_array_equal(counts.sum(1), 200)

    def test_bad_bins(self, data, tmp_path):
        assert main(["export-features", "--dataset", str(data / "a"), "--bins", "1", "--out", str(tmp_path / "h")]) == 2


def test_empty_split_dataset_roundtrip(tmp_path):
    g = csbm(n=50, c=2, d=3, train_per_class=3, val=0, seed=0)
    g2 = make_dataset(g.adjacency, g.features, g.labels, g.splits, num_classes=2, directed=False)
    write_dataset(g2, tmp_path / "d")
    assert (tmp_path / "d" / "splits" / "val.txt").exists()
