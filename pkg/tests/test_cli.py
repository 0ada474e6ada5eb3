import csv
import json
import random
import subprocess
import sys

import pytest

from egt.cli import load_config, main
from egt.compress import load_compressed

from conftest import random_corpus

SMALL_INI = """
[run]
seed = 3
output_dir = out

[model]
d_model = 32
d_ff = 64
max_positions = 32

[compress]
g_fine = 16
g_coarse = 32

[trie]
k = 4
c = 4

[decode]
beam_size = 5
n_queries = 4
alpha = 0.01

[bench]
shapes = 16x32
reps = 30
"""

PIPELINE = ["init-model", "compress", "build-trie", "decode", "eval-recall"]


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "corpus.txt").write_text("\n".join(random_corpus(random.Random(0), 60)) + "\n")
    (tmp_path / "run.ini").write_text(SMALL_INI + "\n[paths]\ncorpus = corpus.txt\n")
    return tmp_path


def run(workdir, command, *extra):
    return main([command, "--config", str(workdir / "run.ini"), *extra])


def artifact_hashes(outdir):
    hashes = {}
    for manifest in sorted(outdir.glob("*.manifest.json")):
        doc = json.loads(manifest.read_text())
        for name, art in doc["artifacts"].items():
            if doc["command"] not in doc["wall_clock_artifacts"] and name not in doc["wall_clock_artifacts"]:
                hashes[(doc["command"], name)] = art["sha256"]
    return hashes


def test_pipeline_reproducible(workdir, tmp_path_factory):
    other = tmp_path_factory.mktemp("second")
    (other / "corpus.txt").write_text((workdir / "corpus.txt").read_text())
    (other / "run.ini").write_text((workdir / "run.ini").read_text())
    for d in (workdir, other):
        for cmd in PIPELINE:
            assert run(d, cmd) == 0, cmd
    first, second = artifact_hashes(workdir / "out"), artifact_hashes(other / "out")
    assert len(first) >= 10
    assert first == second


def test_self_recall_is_one(workdir):
    for cmd in ("init-model", "build-trie"):
        assert run(workdir, cmd) == 0
    assert run(workdir, "eval-recall", "--recall_candidate", "baseline") == 0
    assert "recall_at_k = 1.000000" in (workdir / "out" / "recall_summary.txt").read_text()
    assert run(workdir, "eval-recall", "--candidate_model", str(workdir / "out" / "model.egtm")) == 0
    assert "recall_at_k = 1.000000" in (workdir / "out" / "recall_summary.txt").read_text()


def test_quant_only_recall_is_valid_fraction(workdir):
    for cmd in ("init-model", "build-trie"):
        assert run(workdir, cmd) == 0
    values = []
    for _ in range(2):
        assert run(workdir, "compress", "--sparsity", "dense") == 0
        assert run(workdir, "eval-recall") == 0
        text = (workdir / "out" / "recall_summary.txt").read_text()
        values.append(float(text.split("recall_at_k = ")[1]))
    assert 0.0 <= values[0] <= 1.0 and values[0] == values[1]


def test_dense_mode_keeps_all(workdir):
    assert run(workdir, "init-model") == 0
    assert run(workdir, "compress", "--sparsity=dense") == 0
    cm = load_compressed(workdir / "out" / "model.egtq")
    assert all(layer.mask is None and layer.quant is not None for layer in cm.layers.values())
    with open(workdir / "out" / "compress_layers.csv") as fh:
        assert {row["kept_fraction"] for row in csv.DictReader(fh)} == {"1.0000"}


def test_bench_writes_csv_and_flags_wall_clock(workdir):
    assert run(workdir, "bench") == 0
    header = (workdir / "out" / "bench.csv").read_text().splitlines()[0]
    assert header == "variant,rows,cols,pattern,median_ns,p95_ns,bytes"
    doc = json.loads((workdir / "out" / "bench.manifest.json").read_text())
    assert doc["wall_clock_artifacts"] == ["bench"]


def test_decode_records(workdir):
    for cmd in ("init-model", "build-trie", "decode"):
        assert run(workdir, cmd) == 0
    text = (workdir / "out" / "decode.txt").read_text()
    assert text.count("[query ") == 4
    assert "trigger_step = " in text and "b_score=" in text
    assert "nan" not in text.lower().replace("nanoseconds", "")


def test_env_seed_and_cli_precedence(workdir):
    cfg = load_config(workdir / "run.ini", {}, {"EGT_SEED": "99"})
    assert cfg.seed == 99
    cfg = load_config(workdir / "run.ini", {"seed": "5"}, {"EGT_SEED": "99"})
    assert cfg.seed == 5
    assert str(cfg.output_dir).startswith(str(workdir))


def test_usage_errors(workdir, capsys):
    assert main(["bogus"]) == 1
    assert run(workdir, "decode", "--beam_size", "0") == 1
    assert run(workdir, "compress", "--rho_q", "1.5") == 1
    assert run(workdir, "compress", "--no_such_key", "1") == 1
    assert main(["init-model", "--config", str(workdir / "missing.ini")]) == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(err)["exit"] == 1


def test_data_errors(workdir, capsys):
    assert run(workdir, "decode") == 2  # no model yet
    assert run(workdir, "init-model") == 0
    (workdir / "out" / "model.egtm").write_bytes(b"JUNK" + bytes(40))
    assert run(workdir, "compress") == 2
    doc = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert doc["error"] == "BadMagicError" and doc["exit"] == 2


def test_console_script_entry(workdir):
    proc = subprocess.run([sys.executable, "-m", "egt.cli", "init-model", "--config", str(workdir / "run.ini")],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.strip().endswith("init-model.manifest.json")
