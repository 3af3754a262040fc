import math
import json

import numpy as np
import numpy.testing as npt

import fusemerge.tensor_store as tensor_store
from fusemerge.fusemerge import main, parse_args

def run(capsys, argv):
    assert main(parse_args(argv)) == 0

    return json.loads(capsys.readouterr().out)

def test_fuse_then_merge(tmp_path, capsys, write_corpus, toy_dialogues):
    corpus = write_corpus(toy_dialogues)
    pivot = str(tmp_path / "pivot.st")

    run(capsys, ["init-pivot", "--corpus", corpus, "--dim", "6", "--seed", "11", "--out", pivot])

    targets = []

    for kind, seed in (("random", "1"), ("char-pair", "2")):
        teacher_dir = str(tmp_path / f"teacher-{kind}")
        target = str(tmp_path / f"target-{kind}.st")

        report = run(capsys, ["gen-dists", "--pivot", pivot, "--corpus", corpus, "--out-dir", teacher_dir,
                              "--kind", kind, "--seed", seed])

        assert report["nofiles"] == 30

        log = run(capsys, ["fuse-train", "--pivot", pivot, "--teacher-dir", teacher_dir, "--corpus", corpus,
                           "--epochs", "5", "--lr", "0.5", "--out", target])

        assert math.isfinite(log["final_loss"])
        assert log["final_loss"] < log["train_losses"][0]

        targets.append(target)

    stats = [run(capsys, ["inspect", "--ckpt", target, "--delta-against", pivot])["delta"]["units"]
             for target in targets]

    assert sorted(stats[0]) == ["embed", "out"]
    assert stats[0] != stats[1]
    assert all(unit["mean_sq"] > 0.0 for s in stats for unit in s.values())

    merged_path = str(tmp_path / "merged.st")
    report = run(capsys, ["merge", "--method", "varm", "--granularity", "matrix", "--base", pivot,
                          "--targets", targets[0], "--targets", targets[1], "--out", merged_path])

    assert [unit["unit"] for unit in report["units"]] == ["embed", "out"]

    base = tensor_store.load_checkpoint(pivot)
    t1, t2 = (tensor_store.load_checkpoint(target) for target in targets)
    merged = tensor_store.load_checkpoint(merged_path)

    assert merged.metadata["vocab"] == base.metadata["vocab"]

    for name in ("embed", "out"):
        d1 = (t1[name] - base[name]).reshape(-1)
        d2 = (t2[name] - base[name]).reshape(-1)
        m1 = math.fsum(d1 * d1) / d1.size
        m2 = math.fsum(d2 * d2) / d2.size
        w1 = m1 / (m1 + m2)
        w2 = m2 / (m1 + m2)

        npt.assert_array_equal(merged[name], w1 * t1[name] + w2 * t2[name])
        assert np.all(merged[name] >= np.minimum(t1[name], t2[name]) - 1e-12)
        assert np.all(merged[name] <= np.maximum(t1[name], t2[name]) + 1e-12)

    evaluation = run(capsys, ["evaluate", "--ckpt", merged_path, "--corpus", corpus,
                              "--teacher-dir", str(tmp_path / "teacher-random")])

    assert evaluation["finite"]
    assert evaluation["rows_stochastic"]
    assert evaluation["nosamples"] == 30
