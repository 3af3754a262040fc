
import json
import logging

import numpy as np

from fusemerge import constants
import fusemerge.tensor_store as tensor_store
from fusemerge.exceptions import DimensionMismatchError

def load(path, check_stochastic=True, atol=1e-9):
    """Load a distribution file: returns (dist matrix, row tokens, gold ids, metadata)
    """
    ckpt = tensor_store.load_checkpoint(path)

    if constants.DIST_TENSOR_NAME not in ckpt:
        raise DimensionMismatchError(f"'{path}' has no '{constants.DIST_TENSOR_NAME}' tensor")

    dist = np.asarray(ckpt[constants.DIST_TENSOR_NAME], dtype=np.float64)

    if dist.ndim != 2:
        raise DimensionMismatchError(f"'{path}': the distribution tensor has shape {dist.shape}")

    tokens = json.loads(ckpt.metadata.get("tokens", "null"))
    gold = json.loads(ckpt.metadata.get("gold", "null"))

    for label, values in (("tokens", tokens), ("gold", gold)):
        if values is not None and len(values) != dist.shape[0]:
            raise DimensionMismatchError(f"'{path}': {len(values)} {label} for {dist.shape[0]} rows")

    if check_stochastic:
        sums = dist.sum(axis=1)

        if np.any(dist < 0.0) or np.any(np.abs(sums - 1.0) > atol):
            logging.warning(f"'{path}': rows are not stochastic (sums in [{sums.min() if len(sums) else 0}, {sums.max() if len(sums) else 0}])")

    return dist, tokens, gold, dict(ckpt.metadata)

def store(dist, path, tokens=None, gold=None, metadata=None):
    dist = np.asarray(dist, dtype=np.float64)

    if dist.ndim != 2:
        raise DimensionMismatchError(f"unexpected shape ({dist.shape})")

    meta = {} if metadata is None else dict(metadata)

    if tokens is not None:
        meta["tokens"] = json.dumps(list(tokens), ensure_ascii=False)
    if gold is not None:
        meta["gold"] = json.dumps([int(g) for g in gold])

    tensor_store.save_checkpoint(tensor_store.Checkpoint({constants.DIST_TENSOR_NAME: dist}, meta), path)
