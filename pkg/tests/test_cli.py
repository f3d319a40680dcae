from __future__ import annotations

import json
import subprocess
import sys

import pytest

from objretrieval.cli import EXIT_CONFIG, EXIT_FORMAT, EXIT_MISSING, RunConfig, build_parser, main


def run(capsys, *argv: str) -> tuple[int, str, str]:
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    corpus, probe, cache = d / "c.jsonl", d / "p.json", d / "c.bin"
    assert main(["gen", "--corpus", str(corpus), "--images", "40", "--seed", "5"]) == 0
    assert main(["train-probe", "--corpus", str(corpus), "--probe", str(probe), "--epochs", "150", "--train-images", "15"]) == 0
    assert main(["build-cache", "--corpus", str(corpus), "--probe", str(probe), "--cache", str(cache)]) == 0
    return {"dir": d, "corpus": corpus, "probe": probe, "cache": cache}


class TestGen:
    def test_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen", "--corpus", str(tmp_path / f"{name}.jsonl"), "--images", "6", "--seed", "3"]) == 0
        for suffix in ("", ".meta.json"):
            assert (tmp_path / f"a.jsonl{suffix}").read_bytes() == (tmp_path / f"b.jsonl{suffix}").read_bytes()

    def test_manifest(self, tmp_path):
        assert main(["gen", "--corpus", str(tmp_path / "a.jsonl"), "--images", "2", "--seed", "8"]) == 0
        m = json.loads((tmp_path / "a.jsonl.manifest.json").read_text())
        assert m["command"] == "gen" and m["seed"] == 8 and m["config"]["images"] == 2
        assert m["wall_time"] >= 0

    def test_rec_tasks_written(self, tmp_path):
        assert main(["gen", "--rec", "--corpus", str(tmp_path / "r.jsonl"), "--images", "3", "--dim", "32"]) == 0
        lines = (tmp_path / "r.jsonl.tasks.jsonl").read_text().splitlines()
        assert lines and all("query_terms" in json.loads(x) for x in lines)


class TestPipeline:
    def test_recall(self, pipeline, capsys):
        code, out, _ = run(capsys, "eval-recall", "--corpus", pipeline["corpus"], "--cache", pipeline["cache"])
        assert code == 0
        rep = json.loads(out)
        assert rep["ar"]["100"]["ar50"] >= 0.99
        assert rep["ar"]["300"]["ar50"] >= rep["ar"]["100"]["ar50"]

    def test_query_above_one(self, pipeline, capsys):
        code, out, _ = run(capsys, "query", "--corpus", pipeline["corpus"], "--cache", pipeline["cache"], "--queries", "cat,dog", "--threshold", "1.5")
        assert code == 0
        rep = json.loads(out)
        assert all(r["images"] == [] for r in rep["results"].values())

    def test_query_to_report(self, pipeline, capsys):
        report = pipeline["dir"] / "q.json"
        code, out, _ = run(capsys, "query", "--corpus", pipeline["corpus"], "--cache", pipeline["cache"], "--queries", "cat", "--report", report)
        assert code == 0 and out == ""
        assert json.loads(report.read_text())["results"]["cat"]["images"]
        assert (pipeline["dir"] / "q.json.manifest.json").exists()

    def test_retrieval_report(self, pipeline, capsys):
        code, out, _ = run(capsys, "eval-retrieval", "--corpus", pipeline["corpus"], "--cache", pipeline["cache"])
        assert code == 0 and json.loads(out)["macro"]["f1"] == 1.0

    def test_federated_recall_only(self, pipeline, capsys):
        code, out, _ = run(capsys, "eval-retrieval", "--federated", "--corpus", pipeline["corpus"], "--cache", pipeline["cache"])
        rep = json.loads(out)
        assert code == 0 and set(rep["macro"]) == {"r"}
        assert all(set(v) == {"r"} for v in rep["per_class"].values())

    def test_detect(self, pipeline, capsys):
        code, out, _ = run(capsys, "eval-detect", "--corpus", pipeline["corpus"], "--cache", pipeline["cache"])
        rep = json.loads(out)
        assert code == 0 and 0.0 <= rep["ap"]["coco"] <= rep["ap"]["mean"] <= 1.0

    def test_bench_zero_queries(self, pipeline, capsys):
        code, out, _ = run(capsys, "bench", "--corpus", pipeline["corpus"], "--cache", pipeline["cache"], "--n-queries", "0")
        assert code == 0 and json.loads(out)["rows"] == []

    def test_rebuild_identical(self, pipeline):
        again = pipeline["dir"] / "again.bin"
        assert main(["build-cache", "--corpus", str(pipeline["corpus"]), "--probe", str(pipeline["probe"]), "--cache", str(again)]) == 0
        assert again.read_bytes() == pipeline["cache"].read_bytes()


class TestErrors:
    def test_missing_corpus(self, tmp_path, capsys):
        code, _, err = run(capsys, "eval-recall", "--corpus", tmp_path / "nope.jsonl", "--cache", tmp_path / "x.bin")
        assert code == EXIT_MISSING and json.loads(err)["error"] == "missing_input"

    def test_missing_flag(self, capsys):
        code, _, err = run(capsys, "gen")
        assert code == EXIT_CONFIG and json.loads(err)["error"] == "config"

    def test_bad_cache(self, pipeline, tmp_path, capsys):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"NOPE" + pipeline["cache"].read_bytes()[4:])
        code, _, err = run(capsys, "eval-recall", "--corpus", pipeline["corpus"], "--cache", bad)
        assert code == EXIT_FORMAT and "magic" in json.loads(err)["message"]

    def test_unknown_query_term(self, pipeline, capsys):
        code, _, _ = run(capsys, "query", "--corpus", pipeline["corpus"], "--cache", pipeline["cache"], "--queries", "unicorn")
        assert code == EXIT_CONFIG

    def test_usage(self):
        with pytest.raises(SystemExit) as err:
            build_parser().parse_args(["frobnicate"])
        assert err.value.code == 2


class TestEntryPoint:
    def test_module_runs(self):
        out = subprocess.run([sys.executable, "-m", "objretrieval", "--help"], capture_output=True, text=True, check=True)
        assert "build-cache" in out.stdout

    def test_run_config(self):
        args = build_parser().parse_args(["eval-recall", "--seed", "4", "--k", "7"])
        cfg = RunConfig.from_args(args)
        assert cfg.command == "eval-recall" and cfg.seed == 4 and cfg.options["k"] == 7
