import json

import pytest

from airvote import bounds, cli
from airvote.cli import config_echo, experiment_from_dict, main, validate_config

SMALL = {
    "K": 10, "T": 20, "A": 8, "seed": 3,
    "dataset": {"kind": "synthetic", "classes": 2, "per_class": 200, "test_per_class": 50, "features": 5},
}


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


class TestTrain:
    def test_minimal(self, tmp_path):
        out = tmp_path / "out"
        assert main(["train", write(tmp_path, SMALL), "--out", str(out)]) == 0
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "round,train_loss,test_accuracy,sign_error_rate,rho,min_channel_gain,wall_time_s"
        assert len(lines) == 21
        summary = json.loads((out / "run.json").read_text())
        assert summary["config"]["K"] == 10 and summary["power_violations"] == 0
        assert summary["operation_counts"]["aircomp_aggregations"] == 20
        assert len(summary["run_id"]) == 12

    def test_rerun_byte_identical(self, tmp_path):
        cfg = write(tmp_path, {**SMALL, "c": 0.2, "attack": "label_flip"})
        main(["train", cfg, "--out", str(tmp_path / "a")])
        main(["train", cfg, "--out", str(tmp_path / "b")])
        for f in ("metrics.csv", "run.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_threads_do_not_change_outputs(self, tmp_path):
        main(["train", write(tmp_path, {**SMALL, "threads": 1}, "one.json"), "--out", str(tmp_path / "a")])
        main(["train", write(tmp_path, {**SMALL, "threads": 4}, "four.json"), "--out", str(tmp_path / "b")])
        for f in ("metrics.csv", "run.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_wall_time_opt_in(self, tmp_path):
        main(["train", write(tmp_path, {**SMALL, "T": 2, "record_wall_time": True}), "--out", str(tmp_path / "o")])
        row = (tmp_path / "o" / "metrics.csv").read_text().splitlines()[1]
        assert float(row.split(",")[-1]) > 0

    def test_stride_rows(self, tmp_path):
        main(["train", write(tmp_path, {**SMALL, "metrics_stride": 5}), "--out", str(tmp_path / "o")])
        rows = (tmp_path / "o" / "metrics.csv").read_text().splitlines()[1:]
        assert [int(r.split(",")[0]) for r in rows] == [0, 5, 10, 15, 19]

    @pytest.mark.parametrize("bad", [
        {**SMALL, "bogus": 1},
        {**SMALL, "K": 0},
        {**SMALL, "attack": "gaussian"},
        {**SMALL, "c": 0.3},
        {**SMALL, "dataset": {"kind": "synthetic", "color": "red"}},
        {**SMALL, "A": 500},
    ])
    def test_invalid_config_creates_nothing(self, tmp_path, bad):
        out = tmp_path / "never"
        assert main(["train", write(tmp_path, bad), "--out", str(out)]) == 2
        assert not out.exists()

    def test_unreadable_config(self, tmp_path):
        (tmp_path / "x.json").write_text("{not json")
        assert main(["train", str(tmp_path / "x.json")]) == 2
        assert main(["train", str(tmp_path / "missing.json")]) == 2

    def test_missing_dataset_is_runtime_error(self, tmp_path):
        doc = {**SMALL, "dataset": {"kind": "mnist", "train_images": "nope", "train_labels": "nope",
                                    "test_images": "nope", "test_labels": "nope"}}
        assert main(["train", write(tmp_path, doc), "--out", str(tmp_path / "o")]) == 1

    def test_output_dir_priority(self, tmp_path, monkeypatch):
        cfg = write(tmp_path, {**SMALL, "T": 1, "output_dir": str(tmp_path / "from_cfg")})
        assert main(["train", cfg]) == 0 and (tmp_path / "from_cfg" / "metrics.csv").exists()
        monkeypatch.setenv("AIRVOTE_OUT", str(tmp_path / "from_env"))
        main(["train", cfg])
        assert (tmp_path / "from_env" / "metrics.csv").exists()
        main(["train", cfg, "--out", str(tmp_path / "from_flag")])
        assert (tmp_path / "from_flag" / "metrics.csv").exists()


class TestConfigRoundTrip:
    @pytest.mark.parametrize("doc", [
        SMALL,
        {**SMALL, "c": 0.4, "attack": {"variant": "mimic", "target": 1}, "snr_db": "inf", "h_min": 0.1},
        {**SMALL, "scheme": "digital_gm", "model_kind": "mlp", "hidden": 4, "snr_db": None},
    ])
    def test_parse_echo_parse(self, doc):
        validate_config(doc)
        first = experiment_from_dict(doc)
        echo = config_echo(first)
        validate_config(echo)
        assert experiment_from_dict(json.loads(json.dumps(echo))) == first


class TestValidateBounds:
    GRID = {"bounds": {"grid": {"prop1": {"J": [1.0, 2.0], "s": [1, 3]},
                                "thm1": {"K": [50], "p": [0.01, 0.1], "J": [2]}}, "trials": 20000}}

    def test_pass_and_csv(self, tmp_path):
        out = tmp_path / "b"
        assert main(["validate-bounds", write(tmp_path, self.GRID), "--out", str(out)]) == 0
        lines = (out / "bounds.csv").read_text().splitlines()
        assert lines[0].startswith("bound_name,J,s,g_sign,K,p,empirical,ci_low,ci_high,bound,valid,pass")
        assert len(lines) == 7
        assert sum(",false,true," in l for l in lines) == 1

    def test_corrupted_bound_exits_3(self, tmp_path, monkeypatch):
        real = bounds.prop1_bound
        monkeypatch.setattr(bounds, "prop1_bound", lambda J, s: real(10 * J, s))
        assert main(["validate-bounds", write(tmp_path, self.GRID), "--out", str(tmp_path / "b")]) == 3

    def test_empty_grid(self, tmp_path):
        assert main(["validate-bounds", write(tmp_path, {"bounds": {"grid": {}}}), "--out", str(tmp_path / "b")]) == 2
        doc = {"bounds": {"grid": {"prop1": {"J": [], "s": [1]}}}}
        assert main(["validate-bounds", write(tmp_path, doc), "--out", str(tmp_path / "b")]) == 2
        assert not (tmp_path / "b").exists()


class TestCounts:
    def test_examples(self, capsys):
        assert main(["counts", "--scheme", "hierarchical", "--K", "50", "--p", "0.1"]) == 0
        assert capsys.readouterr().out.splitlines()[0] == "local_sgd=250 aircomp=1"
        main(["counts", "--scheme", "rotaf", "--K", "50", "--G", "10"])
        assert "gm=1 aircomp=10" in capsys.readouterr().out
        main(["counts", "--scheme", "aircomp_gm", "--U", "200"])
        assert "aircomp=200" in capsys.readouterr().out

    def test_unknown_scheme(self):
        assert main(["counts", "--scheme", "fedavg"]) == 2

    def test_bad_arguments(self):
        assert main(["counts", "--K", "many"]) == 2
        assert main([]) == 2
