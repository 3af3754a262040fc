import os
import json

import numpy as np
import numpy.testing as npt
import pytest

import fusemerge.utils.dist_utils as dist_utils
import fusemerge.tensor_store as tensor_store
from fusemerge import constants
from fusemerge.fusemerge import main, parse_args, exit_code
from fusemerge.tensor_store import Checkpoint
from fusemerge.exceptions import NonFiniteLossError, IncompatibleCheckpointsError, MissingTeacherFileError, \
                                 CheckpointFormatError, CorpusFormatError, ConfigError, UsageError, CoefficientError, \
                                 DimensionMismatchError

def run(capsys, argv):
    code = main(parse_args(argv))
    out = capsys.readouterr().out

    return code, json.loads(out) if out.strip() else None

def save(path, tensors, metadata=None):
    tensor_store.save_checkpoint(Checkpoint(tensors, metadata), str(path))

    return str(path)

@pytest.fixture
def worked_example(tmp_path):
    base = save(tmp_path / "base.st", {"w": np.array([0.0, 0.0])})
    a = save(tmp_path / "a.st", {"w": np.array([2.0, 0.0])})
    b = save(tmp_path / "b.st", {"w": np.array([0.0, 4.0])})

    return base, a, b

@pytest.fixture
def pivot_and_corpus(tmp_path, capsys, write_corpus, toy_dialogues):
    corpus = write_corpus(toy_dialogues)
    pivot = str(tmp_path / "pivot.st")
    code, _ = run(capsys, ["init-pivot", "--corpus", corpus, "--dim", "4", "--seed", "3", "--out", pivot])

    assert code == 0

    teacher_dir = str(tmp_path / "teacher")
    code, _ = run(capsys, ["gen-dists", "--pivot", pivot, "--corpus", corpus, "--out-dir", teacher_dir,
                           "--kind", "random", "--seed", "1"])

    assert code == 0

    return pivot, corpus, teacher_dir

def test_merge_varm(tmp_path, capsys, worked_example):
    base, a, b = worked_example
    out = str(tmp_path / "merged.st")
    code, report = run(capsys, ["merge", "--method", "varm", "--granularity", "matrix", "--base", base,
                                "--targets", a, "--targets", b, "--out", out])

    assert code == 0
    assert report["out"] == out
    assert report["units"] == [{"unit": "w", "weights": [pytest.approx(0.2), pytest.approx(0.8)]}]
    npt.assert_allclose(tensor_store.load_checkpoint(out)["w"], [0.4, 3.2], rtol=0.0, atol=1e-12)

def test_merge_usage_errors(tmp_path, capsys, worked_example):
    _, a, b = worked_example
    out = str(tmp_path / "merged.st")

    code, report = run(capsys, ["merge", "--method", "varm", "--targets", a, "--targets", b, "--out", out])

    assert code == constants.EXIT_USAGE
    assert report is None
    assert not os.path.exists(out)

    with pytest.raises(SystemExit) as e:
        parse_args(["merge", "--no-such-flag"])

    assert e.value.code == constants.EXIT_USAGE

    with pytest.raises(SystemExit) as e:
        parse_args(["merge", "--method", "average"])

    assert e.value.code == constants.EXIT_USAGE

    code, _ = run(capsys, ["merge", "--method", "linear", "--coeffs", "0.5", "0.6", "--targets", a, "--targets", b,
                           "--out", out])

    assert code == constants.EXIT_USAGE

def test_merge_incompatible(tmp_path, capsys, worked_example):
    base, a, _ = worked_example
    other = save(tmp_path / "other.st", {"w": np.array([1.0, 2.0, 3.0])})
    code, _ = run(capsys, ["merge", "--base", base, "--targets", a, "--targets", other,
                           "--out", str(tmp_path / "merged.st")])

    assert code == constants.EXIT_INCOMPATIBLE

def test_merge_io_errors(tmp_path, capsys, worked_example):
    base, a, _ = worked_example
    out = str(tmp_path / "merged.st")

    code, _ = run(capsys, ["merge", "--base", base, "--targets", a, "--targets", str(tmp_path / "missing.st"),
                           "--out", out])

    assert code == constants.EXIT_IO

    broken = tmp_path / "broken.st"

    broken.write_bytes(b"\x04\x00\x00\x00\x00\x00\x00\x00{}")

    code, _ = run(capsys, ["merge", "--base", base, "--targets", a, "--targets", str(broken), "--out", out])

    assert code == constants.EXIT_IO

def test_merge_other_methods(tmp_path, capsys, worked_example):
    base, a, b = worked_example
    expected = {"linear": [1.0, 2.0], "task_arithmetic": [2.0, 4.0], "slerp": None}

    for method, values in expected.items():
        out = str(tmp_path / f"{method}.st")
        argv = ["merge", "--method", method, "--targets", a, "--targets", b, "--out", out]

        if method == "task_arithmetic":
            argv += ["--base", base]

        code, report = run(capsys, argv)

        assert code == 0
        assert report["method"] == method
        assert "config" in report

        if values is not None:
            npt.assert_allclose(tensor_store.load_checkpoint(out)["w"], values, rtol=0.0, atol=1e-12)

def test_config_file(tmp_path, capsys, worked_example):
    base, a, b = worked_example
    config = tmp_path / "config.json"

    config.write_text(json.dumps({"bogus": 1}), encoding="utf-8")

    code, _ = run(capsys, ["merge", "--config", str(config), "--base", base, "--targets", a,
                           "--out", str(tmp_path / "merged.st")])

    assert code == constants.EXIT_USAGE

    out = str(tmp_path / "merged.st")

    config.write_text(json.dumps({"method": "linear", "targets": [a, b], "out": out}), encoding="utf-8")

    code, report = run(capsys, ["merge", "--config", str(config), "--method", "varm", "--base", base])

    assert code == 0
    assert report["method"] == "varm"
    assert report["out"] == out
    assert report["notargets"] == 2

def test_sweep(tmp_path, capsys, worked_example):
    base, a, b = worked_example
    out_dir = str(tmp_path / "sweep")
    code, report = run(capsys, ["sweep", "--base", base, "--targets", a, "--targets", b, "--out-dir", out_dir])

    assert code == 0
    assert sorted(report["granularities"]) == sorted(constants.GRANULARITIES)
    assert sorted(os.listdir(out_dir)) == sorted(f"{g}{constants.CKPT_SUFFIX}" for g in constants.GRANULARITIES)
    assert report["granularities"]["parameter"]["nounits"] == 2
    assert report["granularities"]["model"]["nounits"] == 1

    # Parameter level: each scalar was changed by a single target
    npt.assert_allclose(tensor_store.load_checkpoint(report["granularities"]["parameter"]["out"])["w"], [2.0, 4.0],
                        rtol=0.0, atol=1e-12)

def test_inspect(tmp_path, capsys, worked_example):
    base, a, b = worked_example

    code, report = run(capsys, ["inspect", "--ckpt", a])

    assert code == 0
    assert report["tensors"] == [{"name": "w", "dtype": "F64", "shape": [2]}]
    assert report["noscalars"] == 2
    assert "delta" not in report

    code, report = run(capsys, ["inspect", "--ckpt", a, "--delta-against", a])

    assert report["delta"]["units"]["w"]["mean_sq"] == 0.0

    mean_sq = []

    for path in (a, b):
        code, report = run(capsys, ["inspect", "--ckpt", path, "--delta-against", base])

        assert code == 0
        assert report["delta"]["granularity"] == constants.DEFAULT_GRANULARITY

        mean_sq.append(report["delta"]["units"]["w"]["mean_sq"])

    assert mean_sq == [2.0, 8.0]

    empty = save(tmp_path / "empty.st", {})
    code, report = run(capsys, ["inspect", "--ckpt", empty])

    assert code == 0
    assert report["tensors"] == []
    assert report["noscalars"] == 0

    code, _ = run(capsys, ["inspect", "--ckpt", str(tmp_path / "missing.st")])

    assert code == constants.EXIT_IO

def _write_json(path, value):
    path.write_text(json.dumps(value), encoding="utf-8")

    return str(path)

def test_align_identity(tmp_path, capsys, dist_factory, rng):
    vocab = ["<unk>", "a", "b"]
    tokens = ["a", "b", "a", "b"]
    dist = dist_factory(rng, len(tokens), len(vocab))
    source_dist = str(tmp_path / "source.dist")

    dist_utils.store(dist, source_dist, metadata={"vocab": json.dumps(vocab)})

    out = str(tmp_path / "projected.dist")
    code, report = run(capsys, ["align", "--source-dist", source_dist,
                                "--source-tokens", _write_json(tmp_path / "source_tokens.json", tokens),
                                "--pivot-tokens", _write_json(tmp_path / "pivot_tokens.json", tokens),
                                "--pivot-vocab", _write_json(tmp_path / "pivot_vocab.json", vocab), "--out", out])

    assert code == 0
    assert report["pairs"] == [[idx, idx] for idx in range(len(tokens))]
    assert report["nomapped_tokens"] == len(vocab)

    projected, row_tokens, gold, _ = dist_utils.load(out)

    npt.assert_allclose(projected, dist, rtol=0.0, atol=1e-12)
    assert row_tokens == ["b", "a", "b", ""]
    assert gold == [2, 1, 2, constants.UNK_ID]

def test_align_split_token(tmp_path, capsys):
    source_vocab = ["<unk>", "hel", "lo"]
    source_dist = str(tmp_path / "source.dist")

    dist_utils.store(np.array([[0.0, 0.2, 0.8], [0.5, 0.25, 0.25]]), source_dist)

    out = str(tmp_path / "projected.dist")
    argv = ["align", "--source-dist", source_dist,
            "--source-tokens", _write_json(tmp_path / "source_tokens.json", ["hel", "lo"]),
            "--pivot-tokens", _write_json(tmp_path / "pivot_tokens.json", ["hello"]),
            "--pivot-vocab", _write_json(tmp_path / "pivot_vocab.json", ["<unk>", "hello"]), "--out", out]

    code, _ = run(capsys, argv)

    # No vocab metadata and no --source-vocab
    assert code == constants.EXIT_USAGE

    code, report = run(capsys, argv + ["--source-vocab", _write_json(tmp_path / "source_vocab.json", source_vocab)])

    assert code == 0
    assert report["pairs"] == [[0, 0]]
    assert report["nosource"] == 2
    assert report["nopivot"] == 1

    projected = dist_utils.load(out)[0]

    # Only '<unk>' is shared; source row 0 has no mass on it, so the row falls back to the gold one-hot
    assert projected.tolist() == [[1.0, 0.0]]

def test_align_empty_tokens(tmp_path, capsys):
    source_dist = str(tmp_path / "source.dist")

    dist_utils.store(np.array([[1.0]]), source_dist, metadata={"vocab": json.dumps(["<unk>"])})

    code, _ = run(capsys, ["align", "--source-dist", source_dist,
                           "--source-tokens", _write_json(tmp_path / "source_tokens.json", []),
                           "--pivot-tokens", _write_json(tmp_path / "pivot_tokens.json", ["a"]),
                           "--pivot-vocab", _write_json(tmp_path / "pivot_vocab.json", ["<unk>", "a"]),
                           "--out", str(tmp_path / "projected.dist")])

    assert code == constants.EXIT_USAGE

def test_init_pivot_and_gen_dists(tmp_path, capsys, pivot_and_corpus):
    pivot, corpus, teacher_dir = pivot_and_corpus
    ckpt = tensor_store.load_checkpoint(pivot)
    vocab = json.loads(ckpt.metadata["vocab"])

    assert vocab[0] == constants.UNK_TOKEN
    assert ckpt["embed"].shape == (len(vocab), 4)
    assert ckpt["out"].shape == (4, len(vocab))

    files = sorted(os.listdir(teacher_dir))

    assert len(files) == 30
    assert files[0] == f"{0:06d}{constants.TEACHER_DIST_SUFFIX}"

    vocab_file = _write_json(tmp_path / "vocab.json", ["<unk>", "x", "y"])
    code, report = run(capsys, ["init-pivot", "--vocab", vocab_file, "--out", str(tmp_path / "small.st")])

    assert code == 0
    assert report["vocab_size"] == 3
    assert report["dim"] == constants.DEFAULT_DIM

    code, _ = run(capsys, ["init-pivot", "--out", str(tmp_path / "none.st")])

    assert code == constants.EXIT_USAGE

def test_fuse_train(tmp_path, capsys, pivot_and_corpus):
    pivot, corpus, teacher_dir = pivot_and_corpus
    out = str(tmp_path / "target.st")
    argv = ["fuse-train", "--pivot", pivot, "--teacher-dir", teacher_dir, "--corpus", corpus, "--epochs", "3",
            "--lr", "0.5", "--out", out]

    code, log = run(capsys, argv)

    assert code == 0
    assert log["nosamples"] == 30
    assert len(log["train_losses"]) == 3
    assert log["train_log"] == f"{out}.train.json"
    assert os.path.isfile(log["train_log"])

    with open(out, "rb") as f:
        first = f.read()

    code, _ = run(capsys, argv)

    with open(out, "rb") as f:
        assert f.read() == first

    code, clm_only = run(capsys, argv[:-1] + [str(tmp_path / "clm.st"), "--lambda", "1.0"])

    assert code == 0
    assert clm_only["final_loss"] != log["final_loss"]
    assert clm_only["config"]["lambda"] == 1.0

def test_fuse_train_without_epochs(tmp_path, capsys, pivot_and_corpus):
    pivot, corpus, teacher_dir = pivot_and_corpus
    out = str(tmp_path / "target.st")
    code, _ = run(capsys, ["fuse-train", "--pivot", pivot, "--teacher-dir", teacher_dir, "--corpus", corpus,
                           "--epochs", "0", "--out", out])

    assert code == 0

    trained = tensor_store.load_checkpoint(out)
    original = tensor_store.load_checkpoint(pivot)

    for name in ("embed", "out"):
        npt.assert_array_equal(trained[name], original[name])

    assert trained.metadata["vocab"] == original.metadata["vocab"]

def test_fuse_train_errors(tmp_path, capsys, pivot_and_corpus):
    pivot, corpus, teacher_dir = pivot_and_corpus
    argv = ["fuse-train", "--pivot", pivot, "--corpus", corpus, "--out", str(tmp_path / "target.st")]

    code, _ = run(capsys, argv + ["--teacher-dir", str(tmp_path / "missing")])

    assert code == constants.EXIT_IO

    os.remove(os.path.join(teacher_dir, f"{5:06d}{constants.TEACHER_DIST_SUFFIX}"))

    code, _ = run(capsys, argv + ["--teacher-dir", teacher_dir])

    assert code == constants.EXIT_IO

    code, _ = run(capsys, argv + ["--teacher-dir", teacher_dir, "--lambda", "1.5"])

    assert code == constants.EXIT_USAGE

def test_evaluate(tmp_path, capsys, pivot_and_corpus):
    pivot, corpus, teacher_dir = pivot_and_corpus

    code, report = run(capsys, ["evaluate", "--ckpt", pivot, "--corpus", corpus])

    assert code == 0
    assert report["ckpt"] == "pivot.st"
    assert report["fusion_loss"] is None
    assert report["finite"]

    code, report = run(capsys, ["evaluate", "--ckpt", pivot, "--corpus", corpus, "--teacher-dir", teacher_dir,
                                "--lambda", "0.5"])

    assert code == 0
    assert report["lambda"] == 0.5
    assert report["combined_loss"] == pytest.approx(0.5 * report["clm_loss"] + 0.5 * report["fusion_loss"])

def test_exit_codes():
    assert exit_code(NonFiniteLossError("nan")) == constants.EXIT_NON_FINITE_LOSS
    assert exit_code(IncompatibleCheckpointsError("x")) == constants.EXIT_INCOMPATIBLE
    assert exit_code(DimensionMismatchError("x")) == constants.EXIT_INCOMPATIBLE
    assert exit_code(CheckpointFormatError("x")) == constants.EXIT_IO
    assert exit_code(CorpusFormatError("x")) == constants.EXIT_IO
    assert exit_code(MissingTeacherFileError("x")) == constants.EXIT_IO
    assert exit_code(FileNotFoundError("x")) == constants.EXIT_IO
    assert exit_code(ConfigError("x")) == constants.EXIT_USAGE
    assert exit_code(UsageError("x")) == constants.EXIT_USAGE
    assert exit_code(CoefficientError("x")) == constants.EXIT_USAGE
    assert exit_code(ValueError("x")) == constants.EXIT_USAGE
    assert exit_code(RuntimeError("x")) is None

def test_fuse_train_with_several_teachers(tmp_path, capsys, pivot_and_corpus):
    pivot, corpus, teacher_dir = pivot_and_corpus
    other_dir = str(tmp_path / "teacher-char-pair")
    code, _ = run(capsys, ["gen-dists", "--pivot", pivot, "--corpus", corpus, "--out-dir", other_dir,
                           "--kind", "char-pair", "--seed", "2"])

    assert code == 0

    argv = ["fuse-train", "--pivot", pivot, "--corpus", corpus, "--epochs", "2", "--lr", "0.5"]
    code, multi = run(capsys, argv + ["--teacher-dir", teacher_dir, "--teacher-dir", other_dir,
                                      "--out", str(tmp_path / "multi.st")])

    assert code == 0
    assert multi["noteachers"] == 2
    assert tensor_store.load_checkpoint(multi["out"]).metadata["noteachers"] == "2"

    code, single = run(capsys, argv + ["--teacher-dir", teacher_dir, "--out", str(tmp_path / "single.st")])

    assert code == 0
    assert single["noteachers"] == 1

    code, _ = run(capsys, argv + ["--teacher-dir", teacher_dir, "--teacher-dir", str(tmp_path / "missing"),
                                  "--out", str(tmp_path / "none.st")])

    assert code == constants.EXIT_IO

def test_align_dimension_mismatch(tmp_path, capsys):
    vocab = ["<unk>", "a", "b"]
    source_dist = str(tmp_path / "source.dist")

    dist_utils.store(np.full((3, 3), 1.0 / 3.0), source_dist, metadata={"vocab": json.dumps(vocab)})

    argv = ["align", "--source-dist", source_dist,
            "--pivot-tokens", _write_json(tmp_path / "pivot_tokens.json", ["a", "b"]),
            "--pivot-vocab", _write_json(tmp_path / "pivot_vocab.json", vocab),
            "--out", str(tmp_path / "projected.dist")]

    # 3 rows for 2 source tokens
    code, _ = run(capsys, argv + ["--source-tokens", _write_json(tmp_path / "two.json", ["a", "b"])])

    assert code == constants.EXIT_USAGE

    # 3 columns for a 2-entry source vocabulary
    code, _ = run(capsys, argv + ["--source-tokens", _write_json(tmp_path / "three.json", ["a", "b", "a"]),
                                  "--source-vocab", _write_json(tmp_path / "source_vocab.json", ["<unk>", "a"])])

    assert code == constants.EXIT_USAGE
