import json
from pathlib import Path

import pytest

from maxoutlab import cli
from maxoutlab.order_stats import compute_constants

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SMALL = {"architecture": {"n0": 3, "widths": [4, 4], "nL": 2, "K": 3},
         "scheme": {"c": 0.64461}}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def summary(out):
    return json.loads(open(str(out).rsplit(".", 1)[0] + ".summary.json").read())


class TestConstants:
    def test_table(self, tmp_path):
        out = tmp_path / "c.csv"
        assert cli.run(["constants", "--out", str(out)]) == cli.EXIT_OK
        rows, meta = cli.read_csv(out)
        assert [r["K"] for r in rows] == list(range(2, 11))
        for r in rows:
            c = compute_constants(r["K"])
            assert (r["S"], r["L"], r["M"]) == (c.S, c.L, c.M)
        assert meta["command"] == "constants" and len(meta["config_hash"]) == 64

    def test_bad_range(self, capsys):
        assert cli.run(["constants", "--k-min", "1"]) == cli.EXIT_CONFIG

    def test_stdout(self, capsys):
        assert cli.run(["constants", "--k-max", "3"]) == cli.EXIT_OK
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "K,S,L,M,recommended_c" and len(lines) == 3


class TestConfigErrors:
    def test_malformed_json(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        out = tmp_path / "o.csv"
        assert cli.run(["bounds", "--config", str(p), "--out", str(out)]) == cli.EXIT_CONFIG
        assert not out.exists()

    def test_unknown_key(self, tmp_path):
        cfg = {**SMALL, "architecture": {**SMALL["architecture"], "depth": 3}}
        out = tmp_path / "o.csv"
        assert cli.run(["bounds", "--config", write_cfg(tmp_path, cfg), "--out", str(out)]) == 2
        assert not out.exists()

    def test_missing_config(self):
        assert cli.run(["bounds"]) == cli.EXIT_CONFIG

    def test_missing_file(self, tmp_path):
        assert cli.run(["bounds", "--config", str(tmp_path / "nope.json")]) == cli.EXIT_CONFIG

    def test_unknown_command(self):
        assert cli.run(["fly"]) == cli.EXIT_CONFIG

    def test_missing_dataset(self, tmp_path):
        cfg = {**SMALL, "training": {"dataset": str(tmp_path / "none.csv")}}
        assert cli.run(["train", "--config", write_cfg(tmp_path, cfg)]) == cli.EXIT_CONFIG

    def test_ntk_precondition(self, tmp_path):
        # nL = 2 violates the kernel bound's preconditions
        assert cli.run(["ntk", "--config", write_cfg(tmp_path, SMALL)]) == cli.EXIT_CONFIG


class TestSubcommands:
    def test_bounds_json(self, tmp_path):
        out = tmp_path / "b.json"
        assert cli.run(["bounds", "--config", write_cfg(tmp_path, SMALL), "--out", str(out)]) == 0
        body = json.loads(out.read_text())
        assert body["config"] == SMALL and len(body["config_hash"]) == 64
        assert body["records"][0]["quantity"]

    def test_verify_jacobian(self, tmp_path):
        cfg = json.load(open(CONFIGS / "jacobian_wide.json"))
        cfg["estimator"]["n_samples"] = 300
        out = tmp_path / "j.csv"
        assert cli.run(["verify-jacobian", "--config", write_cfg(tmp_path, cfg),
                        "--out", str(out)]) == cli.EXIT_OK
        s = summary(out)
        assert s["in_bounds"] and s["passed"] and s["master_seed"] == 2024

    def test_seed_override_changes_result(self, tmp_path):
        cfg = {**SMALL, "estimator": {"n_samples": 100, "x": "random", "u": "random"}}
        path = write_cfg(tmp_path, cfg)
        res = []
        for seed in ("1", "1", "2"):
            out = tmp_path / f"j{len(res)}.csv"
            cli.run(["verify-jacobian", "--config", path, "--out", str(out), "--seed", seed])
            res.append(cli.read_csv(out)[0][0]["mean"])
        assert res[0] == res[1] != res[2]

    def test_ntk_fails_literal_bound(self, tmp_path):
        cfg = json.load(open(CONFIGS / "ntk.json"))
        cfg["estimator"]["n_samples"] = 2000
        out = tmp_path / "n.csv"
        assert cli.run(["ntk", "--config", write_cfg(tmp_path, cfg), "--out", str(out)]) == 1
        assert summary(out)["lower"] == pytest.approx(5.0)

    def test_ntk_without_augmentation_passes(self, tmp_path):
        cfg = json.load(open(CONFIGS / "ntk.json"))
        cfg["estimator"].update(n_samples=2000, augment=False)
        out = tmp_path / "n.csv"
        assert cli.run(["ntk", "--config", write_cfg(tmp_path, cfg), "--out", str(out)]) == 0

    @pytest.mark.parametrize("command,estimator", [
        ("verify-order", {"n_samples": 10_000}),
        ("verify-eqdist", {"n_samples": 500, "x": [0.7, -1.2, 0.1]}),
        ("cosine", {"n_samples": 20}),
        ("verify-actlen", {"n_samples": 200}),
        ("curve", {"n_samples": 30, "n_points": 50}),
        ("regions", {"n_nets": 2, "resolution": 200, "oracle_factor": 10}),
    ])
    def test_runs(self, tmp_path, command, estimator):
        cfg = {**SMALL, "estimator": {"seed": 3, **estimator}}
        out = tmp_path / "r.csv"
        code = cli.run([command, "--config", write_cfg(tmp_path, cfg), "--out", str(out)])
        assert code in (cli.EXIT_OK, cli.EXIT_CHECK_FAILED)
        rows, meta = cli.read_csv(out)
        assert rows and meta["master_seed"] == 3
        assert summary(out)["passed"] == (code == cli.EXIT_OK)

    def test_train_and_compare(self, tmp_path):
        blobs = {"kind": "blobs", "n_samples": 90, "centers": [[-3, 0], [3, 0]], "scales": 0.5}
        cfg = {"architecture": {"n0": 2, "widths": [5], "nL": 2, "K": 3},
               "scheme": {"c": "recommended"},
               "training": {"dataset": blobs, "epochs": 3, "n_runs": 2,
                            "schemes": [{"name": "a", "c": "recommended"},
                                        {"name": "b", "c": 0.1}]}}
        path = write_cfg(tmp_path, cfg)
        out = tmp_path / "t.json"
        assert cli.run(["train", "--config", path, "--out", str(out)]) == 0
        rec = json.loads(out.read_text())["records"][0]
        assert len(rec["train_loss"]) == 3
        out = tmp_path / "cmp.csv"
        assert cli.run(["compare", "--config", path, "--out", str(out)]) == 0
        rows, _ = cli.read_csv(out)
        assert [r["scheme"] for r in rows] == ["a", "b"]


class TestReport:
    def test_empty_records_header_only(self, tmp_path):
        p = tmp_path / "e.csv"
        cli.write_report([], p, columns=["a", "b"], meta={"k": 1})
        assert p.read_text() == "# k=1\na,b\n"
        assert cli.read_csv(p) == ([], {"k": 1})

    def test_round_trip_bitwise(self, tmp_path):
        recs = [{"x": 0.1 + 0.2, "n": 3, "ok": True, "v": [1.5, 2.0]},
                {"x": 1e-300, "n": -1, "ok": False, "v": []}]
        p = tmp_path / "r.csv"
        cli.write_report(recs, p, meta={"seed": 9})
        back, meta = cli.read_csv(p)
        assert back == recs and meta == {"seed": 9}
        assert back[0]["x"].hex() == (0.1 + 0.2).hex()

    def test_heterogeneous_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            cli.write_report([{"a": 1}, {"b": 2}], tmp_path / "h.csv")

    def test_unwritable(self, tmp_path):
        (tmp_path / "f").write_text("")
        with pytest.raises(OSError):
            cli.write_report([{"a": 1}], tmp_path / "f" / "x.csv")

    def test_config_hash_stable(self):
        assert cli.config_hash({"a": 1, "b": 2}) == cli.config_hash({"b": 2, "a": 1})
