import csv
import json
from importlib import resources

import pytest

from raprank.cli import main

DATA = resources.files("raprank") / "data"
SCHEMA = str(DATA / "schema.json")
SAMPLE = str(DATA / "sample.csv")
TABLES = str(DATA / "workload_tables.json")
MARGINALS = str(DATA / "workload_marginals.json")


def run(*argv):
    return main([str(a) for a in argv])


def attack_args(out, *extra):
    return ["attack", "--data", SAMPLE, "--schema", SCHEMA, "--workload", MARGINALS, "--runs", 3,
            "--rows", 30, "--epochs", 60, "--seed", 7, "--out", out, *extra]


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestAttack:
    def test_outputs_and_manifest(self, tmp_path):
        assert run(*attack_args(tmp_path / "r")) == 0
        names = sorted(p.name for p in (tmp_path / "r").iterdir())
        assert names == ["answers.csv", "manifest.json", "ranking.csv"]
        manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
        assert manifest["flags"]["runs"] == 3 and manifest["flags"]["init"] == "uniform"
        assert manifest["attack_config"]["optimizer"]["lr"] == 0.1
        assert set(manifest["outputs"]) == {"answers.csv", "ranking.csv"}
        header = read_csv(tmp_path / "r" / "ranking.csv")[0]
        assert header == ["rank", "frequency", "county", "tract", "sex", "age"]

    def test_identical_invocations_identical_ranking(self, tmp_path):
        run(*attack_args(tmp_path / "a"))
        run(*attack_args(tmp_path / "b"))
        assert (tmp_path / "a" / "ranking.csv").read_bytes() == (tmp_path / "b" / "ranking.csv").read_bytes()

    def test_answers_file_path(self, tmp_path):
        run(*attack_args(tmp_path / "a"))
        args = ["attack", "--answers", tmp_path / "a" / "answers.csv", "--schema", SCHEMA, "--workload", MARGINALS,
                "--runs", 3, "--rows", 30, "--epochs", 60, "--seed", 7, "--out", tmp_path / "b"]
        assert run(*args) == 0
        assert (tmp_path / "a" / "ranking.csv").read_bytes() == (tmp_path / "b" / "ranking.csv").read_bytes()

    def test_answer_length_mismatch_exit_2(self, tmp_path, capsys):
        bad = tmp_path / "a.csv"
        bad.write_text("query_id,value\n0,0.5\n1,0.5\n")
        args = ["attack", "--answers", bad, "--schema", SCHEMA, "--workload", MARGINALS, "--out", tmp_path / "o"]
        assert run(*args) == 2
        assert "2 answers" in capsys.readouterr().err
        assert not (tmp_path / "o" / "ranking.csv").exists()

    def test_table_cell_workload(self, tmp_path):
        args = attack_args(tmp_path / "r")
        args[args.index("--workload") + 1] = TABLES
        assert run(*args) == 0
        assert len(read_csv(tmp_path / "r" / "answers.csv")) - 1 == 49

    def test_published_counts(self, tmp_path):
        cells = json.loads(open(TABLES).read())["cells"]
        for cell, count in zip(cells, [240] + [10] * (len(cells) - 1)):
            cell["count"] = count
        wl = tmp_path / "w.json"
        wl.write_text(json.dumps({"cells": cells}))
        args = ["attack", "--schema", SCHEMA, "--workload", wl, "--runs", 2, "--rows", 10, "--epochs", 20,
                "--out", tmp_path / "r"]
        assert run(*args) == 0
        assert json.loads((tmp_path / "r" / "manifest.json").read_text())["answers_source"] == "published counts"
        assert read_csv(tmp_path / "r" / "answers.csv")[2] == ["1", "0.041666666666666664"]

    def test_no_answers_source_exit_2(self, tmp_path, capsys):
        args = ["attack", "--schema", SCHEMA, "--workload", TABLES, "--out", tmp_path / "r"]
        assert run(*args) == 2
        assert "--answers" in capsys.readouterr().err

    def test_dataset_init(self, tmp_path):
        assert run(*attack_args(tmp_path / "r", "--init", f"dataset:{SAMPLE}")) == 0
        manifest = json.loads((tmp_path / "r" / "manifest.json").read_text())
        assert manifest["attack_config"]["init"] == "dataset"

    @pytest.mark.parametrize("extra", [["--init", "zeros"], ["--init", "dataset:/nonexistent.csv"]])
    def test_bad_init_exit_2(self, tmp_path, extra):
        assert run(*attack_args(tmp_path / "r", *extra)) == 2

    def test_missing_schema_exit_2(self, tmp_path, capsys):
        args = attack_args(tmp_path / "r")
        args[args.index("--schema") + 1] = tmp_path / "none.json"
        assert run(*args) == 2
        assert "--schema" in capsys.readouterr().err

    def test_optimizer_abort_exit_3(self, tmp_path):
        run(*attack_args(tmp_path / "a"))
        answers = tmp_path / "a" / "answers.csv"
        rows = read_csv(answers)
        rows[1][1] = "nan"
        with open(answers, "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
        args = ["attack", "--answers", answers, "--schema", SCHEMA, "--workload", MARGINALS, "--runs", 2,
                "--rows", 5, "--out", tmp_path / "b"]
        assert run(*args) == 3

    def test_jobs_flag_matches_serial(self, tmp_path, monkeypatch):
        import raprank.attack as attack
        monkeypatch.setattr(attack, "CHUNK_ELEMENTS", 1)
        run(*attack_args(tmp_path / "a", "--jobs", 1))
        monkeypatch.setenv("RECON_JOBS", "2")
        run(*attack_args(tmp_path / "b"))
        assert json.loads((tmp_path / "b" / "manifest.json").read_text())["jobs"] == 2
        assert (tmp_path / "a" / "ranking.csv").read_bytes() == (tmp_path / "b" / "ranking.csv").read_bytes()


class TestBaseline:
    def test_holdout(self, tmp_path):
        assert run("baseline", "--data", SAMPLE, "--schema", SCHEMA, "--mode", "holdout", "--out", tmp_path) == 0
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["holdout.csv", "manifest.json", "ranking_holdout.csv", "target.csv"]
        assert len(read_csv(tmp_path / "target.csv")) - 1 == 120

    def test_hierarchy_three_levels(self, tmp_path):
        assert run("baseline", "--data", SAMPLE, "--schema", SCHEMA, "--mode", "hierarchy",
                   "--levels", "national,county,tract", "--target", "tract=T3", "--out", tmp_path) == 0
        assert sorted(p.name for p in tmp_path.glob("ranking_*.csv")) == [
            "ranking_county.csv", "ranking_national.csv", "ranking_tract.csv"]

    @pytest.mark.parametrize("extra", [["--levels", "national,block", "--target", "tract=T1"],
                                       ["--target", "tract=T9"], ["--target", "block=B1"], []])
    def test_hierarchy_errors(self, tmp_path, extra):
        assert run("baseline", "--data", SAMPLE, "--schema", SCHEMA, "--mode", "hierarchy", *extra,
                   "--out", tmp_path) == 2

    def test_augment_needs_attr(self, tmp_path, capsys):
        assert run("baseline", "--data", SAMPLE, "--schema", SCHEMA, "--mode", "augment", "--out", tmp_path) == 2
        assert "--attr" in capsys.readouterr().err

    def test_augment_unknown_attr(self, tmp_path):
        assert run("baseline", "--data", SAMPLE, "--schema", SCHEMA, "--mode", "augment", "--attr", "block",
                   "--out", tmp_path) == 2

    def test_augment(self, tmp_path):
        assert run("baseline", "--data", SAMPLE, "--schema", SCHEMA, "--mode", "augment", "--attr", "tract",
                   "--out", tmp_path) == 0
        assert (tmp_path / "ranking_augmented.csv").exists()


class TestEvaluate:
    def prepare(self, tmp_path):
        run("baseline", "--data", SAMPLE, "--schema", SCHEMA, "--mode", "holdout", "--seed", 3, "--out", tmp_path / "b")
        return tmp_path / "b"

    def test_one_curve(self, tmp_path):
        b = self.prepare(tmp_path)
        assert run("evaluate", "--schema", SCHEMA, "--ranking", f"holdout={b / 'ranking_holdout.csv'}",
                   "--target", b / "target.csv", "--out", tmp_path / "e") == 0
        names = sorted(p.name for p in (tmp_path / "e").iterdir())
        assert names == ["curve_holdout_target.csv", "curves.csv", "manifest.json", "match_rate.svg"]

    def test_holdout_u_rule(self, tmp_path):
        b = self.prepare(tmp_path)
        common = ["evaluate", "--schema", SCHEMA, "--ranking", f"holdout={b / 'ranking_holdout.csv'}",
                  "--target", b / "target.csv"]
        run(*common, "--out", tmp_path / "plain")
        run(*common, "--holdout", b / "holdout.csv", "--u-rule", "holdout", "--out", tmp_path / "hat")
        plain = read_csv(tmp_path / "plain" / "curve_holdout_target.csv")
        hat = read_csv(tmp_path / "hat" / "curve_holdout_target.csv")
        assert len(hat) <= len(plain)

    def test_u_rule_without_holdout_exit_2(self, tmp_path):
        b = self.prepare(tmp_path)
        assert run("evaluate", "--schema", SCHEMA, "--ranking", f"h={b / 'ranking_holdout.csv'}",
                   "--target", b / "target.csv", "--u-rule", "holdout", "--out", tmp_path / "e") == 2

    def test_average_over_targets(self, tmp_path):
        args = ["evaluate", "--schema", SCHEMA, "--average", "--out", tmp_path / "e"]
        for s in range(5):
            out = tmp_path / f"b{s}"
            run("baseline", "--data", SAMPLE, "--schema", SCHEMA, "--mode", "holdout", "--seed", s, "--out", out)
            args += ["--target", f"t{s}={out / 'target.csv'}", "--ranking", f"holdout@t{s}={out / 'ranking_holdout.csv'}"]
        assert run(*args) == 0
        assert [p.name for p in (tmp_path / "e").glob("curve_*.csv")] == ["curve_holdout_average.csv"]
        assert len(read_csv(tmp_path / "e" / "curve_holdout_average.csv")) == 101

    def test_domain_mismatch_exit_2(self, tmp_path, capsys):
        b = self.prepare(tmp_path)
        other = tmp_path / "s.json"
        other.write_text(json.dumps({"attributes": [{"name": "x", "cardinality": 2}]}))
        bad = tmp_path / "r.csv"
        bad.write_text("rank,frequency,x\n1,1,0\n")
        assert run("evaluate", "--schema", SCHEMA, "--ranking", f"r={bad}", "--target", b / "target.csv",
                   "--out", tmp_path / "e") == 2
        assert "schema" in capsys.readouterr().err


class TestOracle:
    def test_default_instance(self, tmp_path, capsys):
        assert run("oracle", "--out", tmp_path) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["gap"] < 1e-12
        assert json.loads((tmp_path / "oracle.json").read_text()) == report

    def test_chi_row(self, capsys):
        assert run("oracle", "--dims", "2,3", "--chi", "row=1,2", "--k", 2, "--runs", 3) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["instance"]["chi"]["both_contain_row"] == [1, 2]
        assert report["comparison"]["identifiable"] is True

    @pytest.mark.parametrize("extra", [["--dims", "4,4", "--n", 6], ["--chi", "row=9,9"], ["--chi", "col=1"],
                                       ["--dims", "a,b"]])
    def test_config_errors(self, extra):
        assert run("oracle", *extra) == 2


def test_unknown_subcommand_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_sample_data_ingests():
    from raprank.domain import build_domain, ingest_csv
    data = ingest_csv(SAMPLE, build_domain(SCHEMA))
    assert data.n == 240
    # tracts nest in counties
    assert set(map(tuple, data.rows[:, :2].tolist())) <= {(0, 0), (0, 1), (1, 2), (1, 3)}
