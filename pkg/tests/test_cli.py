import csv
import json

import pytest

from hisam import config
from hisam.cli import main
from hisam.pipeline import MANIFEST, PipelineError, RunManifest, run_pipeline


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--profile", "test", "--out", str(out)]) == 0
    return out


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_run_writes_verified_manifest(run_dir):
    manifest = RunManifest.read(run_dir)
    assert manifest.verify(run_dir) == []
    assert set(manifest.stages) == {"synth", "align", "tokenize", "pretrain", "sft", "eval"}
    assert all(v == "ok" for v in manifest.stages.values())
    names = {a.path for a in manifest.artifacts}
    assert {"config.json", "align_heads.ckpt", "codebooks.cb", "codes.tsv", "pretrain.ckpt", "sft.ckpt",
            "metrics.csv", "data/embeddings.emb"} <= names
    metrics = dict(read_csv(run_dir / "metrics.csv")[1:])
    assert 0.0 <= float(metrics["auc"]) <= 1.0


def test_run_is_reproducible(run_dir, tmp_path):
    assert main(["run", "--profile", "test", "--out", str(tmp_path)]) == 0
    assert (tmp_path / MANIFEST).read_text() == (run_dir / MANIFEST).read_text()


def test_tampered_artifact_is_detected(run_dir, tmp_path):
    copy = tmp_path / "codes.tsv"
    copy.write_bytes((run_dir / "codes.tsv").read_bytes() + b"x")
    manifest = RunManifest.read(run_dir)
    assert manifest.verify(tmp_path) != []


def test_staged_commands_match_the_run(run_dir, tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--profile", "test", "--out", str(data)]) == 0
    assert (data / "embeddings.emb").read_bytes() == (run_dir / "data" / "embeddings.emb").read_bytes()
    assert main(["align", "--profile", "test", "--embeddings", str(data / "embeddings.emb"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "align_heads.ckpt").read_bytes() == (run_dir / "align_heads.ckpt").read_bytes()
    assert main(["tokenize", "--profile", "test", "--embeddings", str(data / "embeddings.emb"),
                 "--heads", str(tmp_path / "align_heads.ckpt"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "codes.tsv").read_text() == (run_dir / "codes.tsv").read_text()
    seq = ["--interactions", str(data / "interactions.tsv"), "--actions", str(data / "actions.txt"),
           "--codebooks", str(tmp_path / "codebooks.cb"), "--codes", str(tmp_path / "codes.tsv")]
    assert main(["pretrain", "--profile", "test", *seq, "--out", str(tmp_path)]) == 0
    assert main(["sft", "--profile", "test", *seq, "--init", str(tmp_path / "pretrain.ckpt"),
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "sft.ckpt").read_bytes() == (run_dir / "sft.ckpt").read_bytes()
    capsys.readouterr()
    assert main(["eval", "--profile", "test", *seq, "--model", str(tmp_path / "sft.ckpt"),
                 "--out", str(tmp_path)]) == 0
    assert capsys.readouterr().out.splitlines()[0].startswith("auc,")
    assert (tmp_path / "metrics.csv").read_text() == (run_dir / "metrics.csv").read_text()


def test_untrained_eval_is_near_chance(run_dir, tmp_path, capsys):
    data = run_dir / "data"
    seq = ["--interactions", str(data / "interactions.tsv"), "--actions", str(data / "actions.txt"),
           "--codebooks", str(run_dir / "codebooks.cb"), "--codes", str(run_dir / "codes.tsv")]
    capsys.readouterr()
    assert main(["eval", "--profile", "test", *seq, "--out", str(tmp_path)]) == 0
    metrics = dict(line.split(",") for line in capsys.readouterr().out.splitlines())
    assert abs(float(metrics["auc"]) - 0.5) <= 0.05


def test_score_ranks_candidates(run_dir, tmp_path, capsys):
    lines = (run_dir / "data" / "interactions.tsv").read_text().splitlines()
    user = lines[0].split("\t")[0]
    (tmp_path / "h.tsv").write_text("\n".join(ln for ln in lines if ln.split("\t")[0] == user) + "\n")
    (tmp_path / "c.txt").write_text("i000\ni001\ni002\n")
    capsys.readouterr()
    args = ["score", "--model", str(run_dir / "sft.ckpt"), "--codes", str(run_dir / "codes.tsv"),
            "--history", str(tmp_path / "h.tsv"), "--candidates", str(tmp_path / "c.txt"),
            "--actions", str(run_dir / "data" / "actions.txt")]
    assert main(args) == 0
    rows = [ln.split("\t") for ln in capsys.readouterr().out.splitlines()]
    assert sorted(r[0] for r in rows) == ["i000", "i001", "i002"]
    scores = [float(r[1]) for r in rows]
    assert scores == sorted(scores, reverse=True) and all(0 < s < 1 for s in scores)
    (tmp_path / "c.txt").write_text("nope\n")
    assert main(args) == 1


def test_bench_csv(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench", "--workloads", "0:2:2,5:2:3", "--repeats", "1", "--out", str(out)]) == 0
    rows = read_csv(out)
    head = rows[0]
    assert len(rows) == 3
    for r in rows[1:]:
        d = dict(zip(head, r))
        assert d["ma_pairs_counted"] == d["ma_pairs_formula"]
    assert main(["bench", "--workloads", "5:x:3"]) == 1


def test_config_and_validate(tmp_path, capsys):
    assert main(["config", "--profile", "test"]) == 0
    text = capsys.readouterr().out
    assert json.loads(text)["model"]["width"] == 64
    (tmp_path / "c.json").write_text(text)
    assert main(["validate", "--config", str(tmp_path / "c.json")]) == 0
    assert capsys.readouterr().out.strip() == "ok"
    bad = json.loads(text)
    bad["dmrq"]["beta"] = -1
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    assert main(["validate", "--config", str(tmp_path / "bad.json")]) == 1
    assert "dmrq.beta must be >= 0" in capsys.readouterr().out
    assert main(["run", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "r")]) == 1
    (tmp_path / "typo.json").write_text('{"modle": {}}')
    assert main(["validate", "--config", str(tmp_path / "typo.json")]) == 1


def test_missing_input_files(tmp_path):
    assert main(["align", "--embeddings", str(tmp_path / "none.emb"), "--out", str(tmp_path)]) == 1


def test_stage_failure_is_recorded(tmp_path):
    cfg = config.test_profile()
    cfg.ingest.embeddings = str(tmp_path / "missing.emb")
    cfg.ingest.interactions = str(tmp_path / "missing.tsv")
    with pytest.raises(PipelineError) as err:
        run_pipeline(cfg, tmp_path / "r")
    assert err.value.stage == "align"
    assert RunManifest.read(tmp_path / "r").stages["align"].startswith("failed")
