import json

import numpy as np
import pytest

from cmat import checkpoint, data
from cmat.cli import main, sha256
from cmat.data import WorldSpec
from cmat.model import ModelParameters
from cmat.training import TrainConfig

TINY = {"hidden": 6, "feat": 16, "embed": 4, "rel": 4, "steps": 2, "batch_size": 4, "shard_size": 2,
        "pretrain_iters": 6, "rl_iters": 3}


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--scenes", "40", "--classes", "5", "--predicates", "3", "--seed", "2"]) == 0
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["pretrain", "--config", str(root / "tiny.json"), "--data", str(root / "data"), "--out", str(root / "pre")]) == 0
    return root


def files(directory, names=("checkpoint.bin", "metrics.jsonl")):
    return [(directory / n).read_bytes() for n in names]


def test_gen_data_is_loadable_and_reproducible(tmp_path, corpus):
    out = corpus / "data"
    vocab = data.load_vocab(out / "vocab.json")
    total = sum(len(data.load(out / f"{s}.jsonl", vocab)) for s in ("train", "val", "test"))
    assert total == 40
    assert main(["gen-data", "--out", str(tmp_path / "again"), "--scenes", "40", "--classes", "5", "--predicates", "3", "--seed", "2"]) == 0
    for name in ("train.jsonl", "val.jsonl", "test.jsonl", "vocab.json"):
        assert sha256(tmp_path / "again" / name) == sha256(out / name)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "complete" and set(manifest["outputs"]) >= {"train.jsonl", "vocab.json"}


def test_usage_errors(tmp_path, corpus):
    assert main(["gen-data", "--out", str(tmp_path / "z"), "--scenes", "0"]) == 2
    assert main(["gen-data", "--out", str(corpus / "data"), "--scenes", "40"]) == 2  # exists, no --force
    assert main(["train-rl", "--data", str(corpus / "data"), "--out", str(tmp_path / "r")]) == 2  # no --init
    bad = ["train-rl", "--data", str(corpus / "data"), "--init", str(corpus / "pre" / "checkpoint.bin"), "--out", str(tmp_path / "r")]
    assert main(bad + ["--reward", "recall"]) == 2
    assert main(bad + ["--baseline", "critic"]) == 2
    assert main(bad + ["--set", "nonsense=1"]) == 2
    assert main(["frobnicate"]) == 2


def test_validation_errors(tmp_path, corpus):
    args = ["train-rl", "--data", str(corpus / "data"), "--out", str(tmp_path / "r")]
    assert main(args + ["--init", str(tmp_path / "missing.bin")]) == 3
    assert main(["pretrain", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "p")]) == 3
    wrong = ModelParameters.init(TrainConfig(**TINY).dims(7, 3), 0)
    checkpoint.save(wrong, tmp_path / "wrong.bin", 2)
    assert main(args + ["--init", str(tmp_path / "wrong.bin")]) == 3


def test_tampered_checkpoint_is_detected(tmp_path, corpus):
    pre = tmp_path / "pre"
    pre.mkdir()
    for name in ("checkpoint.bin", "manifest.json"):
        (pre / name).write_bytes((corpus / "pre" / name).read_bytes())
    raw = bytearray((pre / "checkpoint.bin").read_bytes())
    raw[-1] ^= 1
    (pre / "checkpoint.bin").write_bytes(bytes(raw))
    cmd = ["train-rl", "--config", str(corpus / "tiny.json"), "--data", str(corpus / "data"), "--init", str(pre / "checkpoint.bin"), "--out", str(tmp_path / "r")]
    assert main(cmd) == 3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(tmp_path, corpus):
    params, _ = checkpoint.load(corpus / "pre" / "checkpoint.bin")
    params["W_h"].value[:] = np.nan
    checkpoint.save(params, tmp_path / "nan.bin", 2)
    out = tmp_path / "r"
    code = main(["train-rl", "--config", str(corpus / "tiny.json"), "--data", str(corpus / "data"), "--init", str(tmp_path / "nan.bin"), "--out", str(out)])
    assert code == 4
    assert json.loads((out / "manifest.json").read_text())["status"] == "running"
    assert "non_finite" in json.loads((out / "numerical_dump.json").read_text())


def test_train_rl_is_byte_identical(tmp_path, corpus):
    def run(name, *extra):
        out = tmp_path / name
        cmd = ["train-rl", "--config", str(corpus / "tiny.json"), "--data", str(corpus / "data"),
               "--init", str(corpus / "pre" / "checkpoint.bin"), "--out", str(out), "--baseline", "cf", *extra]
        assert main(cmd) == 0
        return files(out)

    first = run("a")
    assert first == run("b")
    assert first == run("c", "--threads", "2")
    assert first != run("d", "--seed", "1")


def test_baseline_none_and_budget_paths(tmp_path, corpus):
    base = ["train-rl", "--config", str(corpus / "tiny.json"), "--data", str(corpus / "data"), "--init", str(corpus / "pre" / "checkpoint.bin")]
    assert main(base + ["--out", str(tmp_path / "n"), "--baseline", "none"]) == 0
    records = [json.loads(l) for l in (tmp_path / "n" / "metrics.jsonl").read_text().splitlines()]
    assert all(r["baseline"] == "none" and r["baseline_mean"] == 0.0 for r in records)
    assert main(base + ["--out", str(tmp_path / "t"), "--cb-budget", "2", "--reward", "spice@20"]) == 0
    timing = (tmp_path / "t" / "timing.jsonl").read_text().splitlines()
    assert len(timing) == TINY["rl_iters"] and "wall_time" in json.loads(timing[0])


def test_eval_report_is_stable(tmp_path, corpus, capsys):
    cmd = ["eval", "--ckpt", str(corpus / "pre" / "checkpoint.bin"), "--data", str(corpus / "data"), "--split", "val",
           "--metric", "recall@20", "--metric", "spice@20"]
    assert main(cmd + ["--out", str(tmp_path / "a.jsonl")]) == 0
    assert main(cmd + ["--out", str(tmp_path / "b.jsonl")]) == 0
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    rows = [json.loads(l) for l in (tmp_path / "a.jsonl").read_text().splitlines()]
    assert [r["metric"] for r in rows] == ["recall@20", "spice@20"]
    assert "recall@20" in capsys.readouterr().out
    assert main(cmd + ["--task", "sgdet"]) == 2
    assert main(cmd + ["--metric", "precision@3"]) == 2


def test_perfect_knowledge_predcls_scores_one(tmp_path):
    world = WorldSpec(num_objects=5, num_predicates=3, feat_dim=4, max_objects=4, predicate_peak=1.0,
                      noise=0.0, pair_noise=0.0, corruption=0.0, seed=3)
    out = tmp_path / "clean"
    out.mkdir()
    data.save(data.generate(world, 30), out / "test.jsonl")
    data.save_vocab(world.vocab, out / "vocab.json")
    params = ModelParameters.init(TrainConfig(**{**TINY, "feat": 4}).dims(5, 3), 0)
    for name in ("W_o", "W_z", "W_r", "W_fx", "W_fy", "W_cls"):
        params[name].value[:] = 0.0
    # bias every category pair towards its only possible predicate
    params["freq_bias"].value[:] = 50.0 * (world.predicate_table == 1.0)
    checkpoint.save(params, tmp_path / "oracle.bin", 2)
    assert main(["eval", "--ckpt", str(tmp_path / "oracle.bin"), "--data", str(out), "--task", "predcls", "--out", str(tmp_path / "r.jsonl")]) == 0
    assert json.loads((tmp_path / "r.jsonl").read_text())["value"] == 1.0


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--set", "hidden=4", "--set", "feat=3", "--set", "embed=3", "--set", "rel=3"]) == 0
    out = capsys.readouterr().out
    assert "relative error" in out and "lemma" in out
    assert main(["gradcheck", "--set", "hidden=4", "--set", "feat=3", "--set", "embed=3", "--set", "rel=3",
                 "--agents", "7", "--cap", "300"]) == 0
    assert "exceed the cap" in capsys.readouterr().out


def test_ablate_writes_summary(tmp_path, corpus, capsys):
    out = tmp_path / "abl"
    cmd = ["ablate", "--config", str(corpus / "tiny.json"), "--data", str(corpus / "data"), "--axis", "baseline", "--seeds", "2", "--out", str(out)]
    assert main(cmd) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert [c["column"] for c in summary["cells"]] == ["xe", "ma", "sc", "cf", "none"]
    assert all(len(c["scores"]) == 2 for c in summary["cells"])
    assert len((out / "cells.jsonl").read_text().splitlines()) == 10
    assert main(cmd) == 2
