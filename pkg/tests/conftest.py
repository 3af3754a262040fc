import json

import numpy as np
import pytest

from fusemerge.tensor_store import Checkpoint
from fusemerge.ingest import DialogueSample

def _random_shape(rng, size):
    if size > 1 and rng.random() < 0.5:
        for rows in range(2, size + 1):
            if size % rows == 0:
                return (rows, size // rows)

    return (size,)

def make_checkpoint(rng, notensors=None, max_tensor_size=4, dtype=np.float64, metadata=None, scale=1.0):
    """Random checkpoint with layer-style names ('blk.<layer>.<param>')
    """
    notensors = int(rng.integers(1, 17)) if notensors is None else notensors
    tensors = {}

    for idx in range(notensors):
        size = int(rng.integers(1, max_tensor_size + 1))
        shape = _random_shape(rng, size)
        tensors[f"blk.{idx % 3}.p{idx}"] = (rng.normal(0.0, scale, size=shape)).astype(dtype)

    return Checkpoint(tensors, metadata)

def make_target(base, rng, scale=0.1):
    """Same names, shapes and dtypes as base, every value moved by Gaussian noise
    """
    return Checkpoint({name: (tensor.astype(np.float64) + rng.normal(0.0, scale, size=tensor.shape)).astype(tensor.dtype)
                       for name, tensor in base}, base.metadata)

def random_dist(rng, norows, vocab_size):
    return rng.dirichlet(np.ones(vocab_size), size=norows)

@pytest.fixture
def rng():
    return np.random.default_rng(1234)

@pytest.fixture
def checkpoint_factory():
    return make_checkpoint

@pytest.fixture
def target_factory():
    return make_target

@pytest.fixture
def dist_factory():
    return random_dist

@pytest.fixture
def write_corpus(tmp_path):
    """Write dialogues (lists of (role, text) turns) as a line-delimited JSON corpus
    """
    def _write(dialogues, name="corpus.jsonl"):
        path = tmp_path / name

        with open(path, "w", encoding="utf-8") as f:
            for turns in dialogues:
                f.write(json.dumps({"turns": [{"role": role, "text": text} for role, text in turns]}) + "\n")

        return str(path)

    return _write

@pytest.fixture
def toy_dialogues():
    rng = np.random.default_rng(7)
    alphabet = list("abcdef ")
    dialogues = []

    for _ in range(30):
        user = "".join(rng.choice(alphabet, size=int(rng.integers(3, 8))))
        assistant = "".join(rng.choice(alphabet, size=int(rng.integers(4, 10))))

        dialogues.append([("user", user), ("assistant", assistant)])

    return dialogues

@pytest.fixture
def toy_samples():
    return [DialogueSample([1, 2, 3, 4, 2], [False, False, True, True, True]),
            DialogueSample([3, 1, 1, 2], [False, True, True, True]),
            DialogueSample([4, 4, 2, 1, 3, 2], [False, False, False, True, True, True])]
