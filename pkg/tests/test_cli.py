"""Command-line behavior: determinism, formats, exit codes, end-to-end smoke."""

import json
import subprocess
import sys

import numpy as np
import pytest

from textent.cli import main
from textent.encoder import load_checkpoint
from textent.text import read_corpus, read_queries

GEN_ARGS = ["--entities", "10", "--attribute-vocab", "30",
            "--attributes-per-entity", "4", "--sentences-per-entity", "8",
            "--words-per-sentence", "6", "--noise-ratio", "0.2", "--clusters", "2"]

TRAIN_ARGS = ["--layers", "1", "--heads", "2", "--hidden", "16",
              "--ffn-hidden", "32", "--entity-dim", "16", "--batch-size", "8",
              "--log-every", "0"]


def _generate(path, seed="7"):
    assert main(["generate", "--seed", seed, "--out-dir", str(path)] + GEN_ARGS) == 0


def _pretrain(data, out, steps, seed="3", variant="dual"):
    assert main(["pretrain", "--corpus", str(data / "corpus.jsonl"),
                 "--vocab", str(data / "vocab.tsv"), "--variant", variant,
                 "--seed", seed, "--steps", str(steps), "--out-dir", str(out)]
                + TRAIN_ARGS) == 0


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    _generate(root / "data")
    _pretrain(root / "data", root / "ckpt", steps=200)
    return root


class TestGenerate:
    def test_same_seed_byte_identical(self, tmp_path):
        _generate(tmp_path / "a")
        _generate(tmp_path / "b")
        for name in ("corpus.jsonl", "vocab.tsv", "votes.jsonl", "queries.jsonl",
                     "attributes.jsonl"):
            assert (tmp_path / "a" / name).read_bytes() == \
                (tmp_path / "b" / name).read_bytes()

    def test_different_seed_differs(self, tmp_path):
        _generate(tmp_path / "a", seed="7")
        _generate(tmp_path / "b", seed="8")
        assert (tmp_path / "a" / "corpus.jsonl").read_bytes() != \
            (tmp_path / "b" / "corpus.jsonl").read_bytes()

    def test_seed_required(self, tmp_path, capsys):
        assert main(["generate", "--out-dir", str(tmp_path / "x")] + GEN_ARGS) == 1
        assert "--seed" in capsys.readouterr().err


class TestExitCodes:
    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["generate", "--definitely-not-a-flag", "1"])
        assert exc.value.code == 1

    def test_missing_subcommand(self):
        assert main([]) == 1

    def test_missing_input_file_is_data_error(self, tmp_path):
        code = main(["pretrain", "--corpus", str(tmp_path / "nope.jsonl"),
                     "--vocab", str(tmp_path / "nope.tsv"), "--variant", "dual",
                     "--seed", "1", "--out-dir", str(tmp_path / "out")])
        assert code == 2

    def test_bad_data_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text("{not json\n")
        code = main(["preprocess", "--input", str(bad),
                     "--out-dir", str(tmp_path / "out")])
        assert code == 2


class TestConfigFile:
    def test_config_supplies_values_flags_win(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("entities = 6\nattribute-vocab = 30\n"
                       "attributes-per-entity = 4\nsentences-per-entity = 8\n"
                       "words-per-sentence = 6\nclusters = 2\n# comment\n")
        assert main(["generate", "--seed", "1", "--config", str(cfg),
                     "--out-dir", str(tmp_path / "a"), "--entities", "9"]) == 0
        corpus = read_corpus(tmp_path / "a" / "corpus.jsonl")
        assert len({ex.entity_id for ex in corpus}) == 9  # flag beat the file

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("no-such-option = 1\n")
        assert main(["generate", "--seed", "1", "--config", str(cfg),
                     "--out-dir", str(tmp_path / "a")]) == 2


class TestPretrain:
    def test_deterministic_checkpoints(self, tmp_path, workdir):
        _pretrain(workdir / "data", tmp_path / "r1", steps=20, seed="5")
        _pretrain(workdir / "data", tmp_path / "r2", steps=20, seed="5")
        a = load_checkpoint(tmp_path / "r1")
        b = load_checkpoint(tmp_path / "r2")
        for name in a.tensors:
            np.testing.assert_array_equal(a.tensors[name], b.tensors[name])

    def test_metrics_log_schema(self, workdir):
        rows = [json.loads(line) for line in
                (workdir / "ckpt" / "metrics.jsonl").read_text().splitlines()]
        assert len(rows) == 200
        assert set(rows[0]) == {"step", "loss", "loss_entity", "loss_mlm"}

    def test_inputs_not_mutated(self, tmp_path):
        _generate(tmp_path / "data")
        before = (tmp_path / "data" / "corpus.jsonl").read_bytes()
        _pretrain(tmp_path / "data", tmp_path / "out", steps=2)
        assert (tmp_path / "data" / "corpus.jsonl").read_bytes() == before


class TestRetrieve:
    def test_tsv_format(self, workdir, capsys):
        query = read_queries(workdir / "data" / "queries.jsonl")[0]
        assert main(["retrieve", "--checkpoint", str(workdir / "ckpt"),
                     "--query", query.text, "--k", "5"]) == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert lines[0] == "rank\tentity_id\tscore"
        assert len(lines) == 6
        first = lines[1].split("\t")
        assert first[0] == "1" and first[1].startswith("e")
        float(first[2])


class TestExport:
    def test_row_count_header_and_round_trip(self, workdir, tmp_path, capsys):
        out = tmp_path / "emb.tsv"
        assert main(["export", "--checkpoint", str(workdir / "ckpt"),
                     "--out", str(out)]) == 0
        lines = out.read_text().strip().split("\n")
        header, rows = lines[0], lines[1:]
        assert header.startswith("#") and "dim=16" in header and "variant=dual" in header
        assert len(rows) == 10

        params = load_checkpoint(workdir / "ckpt")
        table = {}
        for row in rows:
            parts = row.split("\t")
            table[parts[0]] = np.array([float(x) for x in parts[1:]],
                                       dtype=np.float64)
        from textent.text import Vocabulary, tokenize
        from textent.encoder import sentence_row, encode
        vocab = Vocabulary.load(workdir / "ckpt" / "vocab.tsv")
        query = read_queries(workdir / "data" / "queries.jsonl")[0]
        tokens = tokenize(query.text, vocab)
        row_ids, segs = sentence_row(tokens, params.config)
        cls = encode(row_ids, segs, params).cls_vector.astype(np.float64)
        from textent.encoder import compatibility
        for i, eid in enumerate(vocab.entity_ids[:4]):
            direct = compatibility(i, tokens, params)
            re_imported = float(table[eid] @ cls /
                                (np.linalg.norm(table[eid]) * np.linalg.norm(cls)))
            assert abs(direct - re_imported) < 1e-6


class TestEndToEnd:
    def test_trained_model_beats_its_random_init_on_mrr(self, workdir, tmp_path,
                                                        capsys):
        # paired run: same seed, 0 steps vs 200 steps
        _pretrain(workdir / "data", tmp_path / "init", steps=0, seed="3")

        def mrr_of(ckpt):
            assert main(["evaluate", "--task", "retrieval",
                         "--checkpoint", str(ckpt),
                         "--queries", str(workdir / "data" / "queries.jsonl")]) == 0
            rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
            return next(r["value"] for r in rows if r["metric"] == "mrr")

        trained = mrr_of(workdir / "ckpt")
        untrained = mrr_of(tmp_path / "init")
        assert trained > untrained

    def test_console_script_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "textent.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "generate" in proc.stdout and "retrieve" in proc.stdout
