"""Command-line surface: subcommands, exit codes, output formats."""

from __future__ import annotations

import math

import pytest

from phirtn.cli import main
from phirtn.grammar import serialize_entities, serialize_templates

from conftest import media_grammar


@pytest.fixture()
def grammar_files(tmp_path):
    g = media_grammar()
    templates = tmp_path / "templates.tsv"
    entities = tmp_path / "entities.tsv"
    templates.write_text(serialize_templates(g), encoding="utf-8")
    entities.write_text(serialize_entities(g), encoding="utf-8")
    return templates, entities


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestExpandAndSample:
    def test_expand_tsv(self, grammar_files, capsys, tmp_path):
        t, e = grammar_files
        out_file = tmp_path / "expansion.tsv"
        code, _, _ = run(
            capsys, "expand", "--templates", t, "--entities", e, "-o", out_file
        )
        assert code == 0
        lines = out_file.read_text().splitlines()
        assert len(lines) == 36
        fields = lines[0].split("\t")
        assert len(fields) == 3
        float(fields[1])
        assert fields[2] in {"head", "torso", "tail"}

    def test_stratify_summary(self, grammar_files, capsys):
        t, e = grammar_files
        code, out, _ = run(capsys, "stratify", "--templates", t, "--entities", e)
        assert code == 0
        rows = dict(
            (line.split("\t")[0], int(line.split("\t")[1]))
            for line in out.splitlines()[1:]
        )
        assert rows["head"] == math.ceil(0.1 * 36)
        assert sum(rows.values()) == 36

    def test_sample_deterministic_via_seed(self, grammar_files, capsys):
        t, e = grammar_files
        args = ["sample", "--templates", t, "--entities", e, "--stratum", "tail", "-k", "3"]
        code, out1, _ = run(capsys, *args, "--seed", "9")
        code, out2, _ = run(capsys, *args, "--seed", "9")
        code, out3, _ = run(capsys, *args, "--seed", "10")
        assert out1 == out2 != out3

    def test_seed_env_var(self, grammar_files, capsys, monkeypatch):
        t, e = grammar_files
        args = ["sample", "--templates", t, "--entities", e, "--stratum", "tail", "-k", "3"]
        monkeypatch.setenv("PHIRTN_SEED", "77")
        _, out_env, _ = run(capsys, *args)
        monkeypatch.delenv("PHIRTN_SEED")
        _, out_77, _ = run(capsys, *args, "--seed", "77")
        assert out_env == out_77


class TestBuildScorePerplexity:
    def test_build_score_trace_consistency(self, grammar_files, capsys, tmp_path):
        t, e = grammar_files
        model = tmp_path / "m.bin"
        code, _, err = run(
            capsys, "build", "phi-rtn", "--templates", t, "--entities", e,
            "--n", "2", "-o", model,
        )
        assert code == 0 and "wrote" in err

        code, out, _ = run(capsys, "score", "--model", model, "play", "Adele")
        assert code == 0
        total = float(out.strip())

        code, out, _ = run(
            capsys, "score", "--model", model, "--trace", "play", "Adele"
        )
        lines = [line.split("\t") for line in out.splitlines()]
        assert [f[0] for f in lines] == ["play", "Adele", "</s>", "total"]
        parts = [float(f[1]) for f in lines[:-1]]
        assert float(lines[-1][1]) == pytest.approx(sum(parts), abs=1e-12)
        assert float(lines[-1][1]) == pytest.approx(total, abs=1e-12)

    def test_perplexity_matches_trace_total(self, grammar_files, capsys, tmp_path):
        t, e = grammar_files
        model = tmp_path / "m.bin"
        run(capsys, "build", "phi-rtn", "--templates", t, "--entities", e, "-o", model)
        queries = tmp_path / "queries.tsv"
        queries.write_text("play Adele\n", encoding="utf-8")
        code, out, _ = run(capsys, "perplexity", "--model", model, "--input", queries)
        assert code == 0
        ppl = float(out.strip())
        code, out, _ = run(capsys, "score", "--model", model, "play", "Adele")
        lp = float(out.strip())
        assert ppl == pytest.approx(math.exp(-lp / 3), rel=1e-12)

    def test_build_ngram_with_arpa(self, grammar_files, capsys, tmp_path):
        t, e = grammar_files
        model = tmp_path / "wb.bin"
        arpa = tmp_path / "wb.arpa"
        code, _, _ = run(
            capsys, "build", "ngram", "--templates", t, "--entities", e,
            "--n", "2", "-o", model, "--arpa", arpa,
        )
        assert code == 0
        assert arpa.read_text().startswith("\\data\\")
        code, out, _ = run(capsys, "score", "--model", arpa, "play", "Adele")
        assert code == 0 and math.isfinite(float(out.strip()))

    def test_prune_shrinks_model(self, grammar_files, capsys, tmp_path):
        t, e = grammar_files
        model = tmp_path / "wb.bin"
        pruned = tmp_path / "pruned.bin"
        run(capsys, "build", "ngram", "--templates", t, "--entities", e, "-o", model)
        code, _, err = run(
            capsys, "prune", "--model", model, "--theta", "0.01", "-o", pruned
        )
        assert code == 0 and "pruned" in err
        assert pruned.stat().st_size < model.stat().st_size


class TestSweepInterpolateCoverage:
    def test_sweep_writes_csv(self, grammar_files, capsys, tmp_path):
        t, e = grammar_files
        out_csv = tmp_path / "sweep.csv"
        code, _, err = run(
            capsys, "sweep", "--templates", t, "--entities", e,
            "--samples", "3", "--seed", "1", "--out", out_csv,
        )
        assert code == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "model,params,bytes,ppl_head,ppl_torso,ppl_tail"
        assert len(lines) == 1 + 3 + 3 * 17

    def test_grammar_dir_layout(self, grammar_files, capsys, tmp_path):
        t, e = grammar_files
        gdir = tmp_path / "grammar"
        gdir.mkdir()
        (gdir / "templates.tsv").write_text(t.read_text(), encoding="utf-8")
        (gdir / "entities.tsv").write_text(e.read_text(), encoding="utf-8")
        out_csv = tmp_path / "sweep2.csv"
        code, _, _ = run(
            capsys, "sweep", "--grammar-dir", gdir, "--samples", "2", "--out", out_csv
        )
        assert code == 0 and out_csv.exists()

    def test_interpolate(self, grammar_files, capsys, tmp_path):
        t, e = grammar_files
        phi = tmp_path / "phi.bin"
        wb = tmp_path / "wb.bin"
        run(capsys, "build", "phi-rtn", "--templates", t, "--entities", e, "-o", phi)
        run(capsys, "build", "ngram", "--templates", t, "--entities", e, "-o", wb)
        dev = tmp_path / "dev.tsv"
        dev.write_text("play Adele\nshow me Drake\n", encoding="utf-8")
        code, out, _ = run(
            capsys, "interpolate", "--models", wb, phi,
            "--weights", "0.95,0.05", "--input", dev,
        )
        assert code == 0 and float(out.strip()) > 1.0
        code, out, err = run(
            capsys, "interpolate", "--models", wb, phi,
            "--fit-budget", "0.05", "--input", dev,
        )
        assert code == 0 and "fitted weights" in err

    def test_coverage(self, grammar_files, capsys):
        t, e = grammar_files
        code, out, _ = run(
            capsys, "coverage", "--templates", t, "--entities", e, "--n", "2"
        )
        assert code == 0
        rows = dict(line.split("\t") for line in out.splitlines())
        assert int(rows["uncovered"]) == 2
        assert 0.99 < float(rows["weighted"]) < 1.0

    def test_check(self, grammar_files, capsys):
        t, e = grammar_files
        code, out, _ = run(capsys, "check", "--templates", t, "--entities", e, "--n", "2")
        assert code == 0
        rows = dict(line.split("\t") for line in out.splitlines())
        assert rows["status"] == "ok"
        assert float(rows["max_logprob_deviation"]) <= 1e-9


class TestErrors:
    def test_usage_error_exit_one(self, capsys):
        code, _, err = run(capsys, "expand")  # missing required files
        assert code == 1
        assert err.startswith("error:")

    def test_unknown_flag_rejected(self, grammar_files, capsys):
        t, e = grammar_files
        code, _, err = run(
            capsys, "expand", "--templates", t, "--entities", e, "--bogus"
        )
        assert code == 1 and err.startswith("error:")

    def test_data_error_exit_two(self, capsys, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("no tab here\n", encoding="utf-8")
        ok = tmp_path / "ok.tsv"
        ok.write_text("x\t1.0\n", encoding="utf-8")
        code, _, err = run(
            capsys, "expand", "--templates", bad, "--entities", ok
        )
        assert code == 2
        assert err.startswith("error:")

    def test_missing_file_exit_two(self, capsys, tmp_path):
        code, _, err = run(
            capsys, "expand", "--templates", tmp_path / "nope.tsv",
            "--entities", tmp_path / "nope2.tsv",
        )
        assert code == 2 and err.startswith("error:")
