"""CLI subcommands: artifacts, manifests, exit codes, determinism."""

import json
from pathlib import Path

import pytest

from siarank.cli import main

TRAIN_FLAGS = ["--epochs", "1", "--max-len", "24", "--max-pos", "24",
               "--layers", "1", "--hidden", "8", "--heads", "2", "--ff-dim", "12"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth-data", "--out", str(data), "--queries", "8",
                 "--docs-per-query", "12", "--vocab-size", "100", "--seed", "3"]) == 0
    tok = root / "tok"
    assert main(["tokenizer-train", "--out", str(tok),
                 "--data", str(data / "train.tsv"), "--max-size", "400"]) == 0
    return {
        "root": root,
        "train": str(data / "train.tsv"),
        "dev": str(data / "dev.tsv"),
        "test": str(data / "test.tsv"),
        "vocab": str(tok / "vocab.txt"),
    }


def test_synth_data_outputs_and_manifest(workspace):
    data_dir = Path(workspace["train"]).parent
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["subcommand"] == "synth-data"
    assert manifest["config"]["queries"] == 8
    for name in ("train", "dev", "test"):
        entry = manifest["outputs"][name]
        assert Path(entry["path"]).exists()
        assert entry["sha256"]


def test_evaluate_is_deterministic(workspace, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    args = ["evaluate", "--data", workspace["test"], "--ranking", "random",
            "--runs", "20", "--seed", "7"]
    assert main(args + ["--out", str(out_a)]) == 0
    assert main(args + ["--out", str(out_b)]) == 0
    assert (out_a / "report.tsv").read_bytes() == (out_b / "report.tsv").read_bytes()
    assert (out_a / "per_query.tsv").read_bytes() == (out_b / "per_query.tsv").read_bytes()
    assert (out_a / "per_query_p10.png").exists()


def test_evaluate_rerun_is_idempotent(workspace, tmp_path):
    out = tmp_path / "same"
    args = ["evaluate", "--data", workspace["test"], "--ranking", "oracle",
            "--out", str(out)]
    assert main(args) == 0
    first = (out / "report.tsv").read_bytes()
    assert main(args) == 0
    assert (out / "report.tsv").read_bytes() == first


def test_unknown_flag_is_usage_error(workspace, tmp_path, capsys):
    code = main(["evaluate", "--data", workspace["test"], "--nonsense"])
    assert code == 1
    assert "usage error" in capsys.readouterr().err


def test_missing_input_is_data_error(tmp_path, capsys):
    code = main(["tokenizer-train", "--out", str(tmp_path / "x"),
                 "--data", str(tmp_path / "absent.tsv")])
    assert code == 2
    assert "data error" in capsys.readouterr().err


def test_quantize_before_precompute_fails(tmp_path, capsys):
    code = main(["quantize", "--store", str(tmp_path / "missing.bin"),
                 "--out", str(tmp_path / "q")])
    assert code == 2
    assert "precompute required" in capsys.readouterr().err


def test_full_pipeline_via_cli(workspace, tmp_path):
    root = workspace["root"]
    siam = root / "siam"
    assert main(["train-siamese", "--train", workspace["train"],
                 "--dev", workspace["dev"], "--vocab", workspace["vocab"],
                 "--out", str(siam), *TRAIN_FLAGS]) == 0
    model = str(siam / "siamese.srwt")
    assert (siam / "siamese_history.tsv").exists()
    assert (siam / "siamese_history.png").exists()

    emb = root / "emb"
    assert main(["precompute", "--model", model, "--vocab", workspace["vocab"],
                 "--docs", workspace["train"], workspace["dev"], workspace["test"],
                 "--out", str(emb), "--workers", "4"]) == 0
    store = str(emb / "embeddings.bin")

    embq = root / "embq"
    assert main(["quantize", "--store", store, "--out", str(embq)]) == 0
    assert (embq / "embeddings_u8.bin").exists()

    g1 = root / "gbrt1"
    assert main(["train-gbrt", "--train", workspace["train"], "--dev", workspace["dev"],
                 "--out", str(g1), "--trees", "20", "--early-stop", "20"]) == 0
    g2 = root / "gbrt2"
    assert main(["train-gbrt", "--train", workspace["train"], "--dev", workspace["dev"],
                 "--vocab", workspace["vocab"], "--model", model,
                 "--embeddings", store, "--out", str(g2),
                 "--trees", "20", "--early-stop", "20"]) == 0

    rank_out = root / "rank"
    assert main(["rank", "--data", workspace["test"],
                 "--stage1", str(g1 / "gbrt.txt"), "--stage2", str(g2 / "gbrt.txt"),
                 "--model", model, "--vocab", workspace["vocab"],
                 "--embeddings", store, "--out", str(rank_out)]) == 0
    rankings = (rank_out / "rankings.tsv").read_text().splitlines()
    assert rankings[0] == "query_id\trank\tkey\tscore\tlabel"
    assert len(rankings) > 1
    manifest = json.loads((rank_out / "manifest.json").read_text())
    assert manifest["outputs"]["report"]["sha256"]

    # siamese stage-2 without a store is a contract violation
    code = main(["rank", "--data", workspace["test"],
                 "--stage1", str(g1 / "gbrt.txt"), "--stage2", str(g2 / "gbrt.txt"),
                 "--model", model, "--vocab", workspace["vocab"],
                 "--out", str(root / "rank2")])
    assert code == 2


def test_distill_requires_teacher(workspace, tmp_path):
    code = main(["distill", "--train", workspace["train"], "--dev", workspace["dev"],
                 "--vocab", workspace["vocab"], "--out", str(tmp_path / "d"),
                 *TRAIN_FLAGS])
    assert code == 1


def test_teacher_then_distill(workspace):
    root = workspace["root"]
    teacher_dir = root / "teacher"
    assert main(["train-teacher", "--train", workspace["train"],
                 "--dev", workspace["dev"], "--vocab", workspace["vocab"],
                 "--out", str(teacher_dir), *TRAIN_FLAGS]) == 0
    distilled = root / "distilled"
    assert main(["distill", "--train", workspace["train"], "--dev", workspace["dev"],
                 "--vocab", workspace["vocab"],
                 "--teacher", str(teacher_dir / "teacher.srwt"),
                 "--init-from-teacher", "--out", str(distilled), *TRAIN_FLAGS]) == 0
    assert (distilled / "siamese.srwt").exists()


def test_config_file_overrides_defaults(workspace, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("runs=17\nseed=5\n", encoding="utf-8")
    out = tmp_path / "out"
    assert main(["evaluate", "--config", str(cfg), "--data", workspace["test"],
                 "--ranking", "random", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["runs"] == 17
    assert manifest["seed"] == 5


def test_config_file_unknown_key(workspace, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("bogus=1\n", encoding="utf-8")
    code = main(["evaluate", "--config", str(cfg), "--data", workspace["test"],
                 "--out", str(tmp_path / "o")])
    assert code == 1


def test_bench_writes_table_and_figure(tmp_path):
    out = tmp_path / "bench"
    assert main(["bench", "--out", str(out), "--trials", "3"]) == 0
    table = (out / "bench.tsv").read_text().splitlines()
    assert table[0].startswith("label\thidden")
    assert len(table) == 2
    assert (out / "bench.png").exists()


def test_ablate_interaction_table_shape(workspace, tmp_path):
    out = tmp_path / "ablate"
    assert main(["ablate-interaction", "--train", workspace["train"],
                 "--dev", workspace["dev"], "--test", workspace["test"],
                 "--vocab", workspace["vocab"], "--seeds", "2",
                 "--out", str(out), *TRAIN_FLAGS]) == 0
    lines = (out / "interaction.tsv").read_text().splitlines()
    assert lines[0] == "variant\tstandalone_mean\tstandalone_std\tseeds"
    assert len(lines) == 6  # five variants
    assert all(line.split("\t")[3] == "2" for line in lines[1:])
    assert (out / "interaction.png").exists()
