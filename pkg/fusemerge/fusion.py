
import logging

import numpy as np
from scipy import special

from fusemerge import constants
from fusemerge.levenshtein import monotone_alignment
from fusemerge.exceptions import DimensionMismatchError

class GoldLabels:
    """Gold token id of every row plus the rows that contribute to the loss
    """

    def __init__(self, token_ids, loss_mask=None):
        self.token_ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        self.loss_mask = np.ones(len(self.token_ids), dtype=bool) if loss_mask is None else \
                         np.asarray(loss_mask, dtype=bool).reshape(-1)

        if len(self.token_ids) != len(self.loss_mask):
            raise DimensionMismatchError(f"{len(self.token_ids)} gold tokens but {len(self.loss_mask)} mask values")

    def __len__(self):
        return len(self.token_ids)

class AlignmentMap:
    """Monotone row alignment between a source and the pivot sequence, plus the source id -> pivot id vocabulary map
    """

    def __init__(self, pairs, vocab_map, nosource, nopivot):
        self.pairs = [(int(s), int(p)) for s, p in pairs]
        self.vocab_map = {int(k): int(v) for k, v in vocab_map.items()}
        self.nosource = nosource
        self.nopivot = nopivot

        for (s0, p0), (s1, p1) in zip(self.pairs, self.pairs[1:]):
            if not (s1 > s0 and p1 > p0):
                raise ValueError(f"alignment pairs must be strictly increasing: {(s0, p0)} -> {(s1, p1)}")

    def to_dict(self):
        return {"pairs": [list(p) for p in self.pairs],
                "vocab_map": {str(k): v for k, v in sorted(self.vocab_map.items())},
                "nosource": self.nosource, "nopivot": self.nopivot}

def as_dist_matrix(P):
    P = np.asarray(P, dtype=np.float64)

    if P.ndim != 2:
        raise DimensionMismatchError(f"a distribution matrix has 2 dimensions, got {P.ndim}")

    return P

def is_row_stochastic(P, atol=1e-9):
    P = np.asarray(P, dtype=np.float64)

    return bool(np.all(P >= 0.0) and np.all(np.abs(P.sum(axis=1) - 1.0) <= atol))

def _mask(mask, norows):
    if mask is None:
        return np.ones(norows, dtype=bool)

    if isinstance(mask, GoldLabels):
        mask = mask.loss_mask

    mask = np.asarray(mask, dtype=bool).reshape(-1)

    if len(mask) != norows:
        raise DimensionMismatchError(f"mask of length {len(mask)} for {norows} rows")

    return mask

def _check_gold(P, gold):
    if P.shape[0] != len(gold):
        raise DimensionMismatchError(f"{P.shape[0]} rows but {len(gold)} gold labels")

    if len(gold) and (np.any(gold.token_ids < 0) or np.any(gold.token_ids >= P.shape[1])):
        raise DimensionMismatchError(f"gold token ids out of the vocabulary range [0, {P.shape[1]})")

def row_cross_entropy(P, gold, clamp_min=constants.DEFAULT_CLAMP_MIN):
    """-log P[i, gold_i] for every row (masked-out rows included)
    """
    P = as_dist_matrix(P)

    _check_gold(P, gold)

    picked = P[np.arange(P.shape[0]), gold.token_ids]

    return -np.log(np.maximum(picked, clamp_min))

def cross_entropy(P, gold, clamp_min=constants.DEFAULT_CLAMP_MIN):
    ce = row_cross_entropy(P, gold, clamp_min=clamp_min)
    mask = gold.loss_mask

    if not np.any(mask):
        return 0.0

    return float(np.sum(ce[mask]) / np.sum(mask))

def kl_divergence(Q, P, mask=None, clamp_min=constants.DEFAULT_CLAMP_MIN):
    """Mean over masked-in rows of KL(P || Q): the loss that pulls Q towards P
    """
    Q = as_dist_matrix(Q)
    P = as_dist_matrix(P)

    if Q.shape != P.shape:
        raise DimensionMismatchError(f"shapes {Q.shape} and {P.shape}")

    mask = _mask(mask, Q.shape[0])

    if not np.any(mask):
        return 0.0

    # rel_entr(0, q) == 0, which gives the 0 * log 0 = 0 convention
    rows = np.sum(special.rel_entr(P[mask], np.maximum(Q[mask], clamp_min)), axis=1)

    return float(np.sum(rows) / np.sum(mask))

def fusion_loss(Q, P_fused, mask=None, clamp_min=constants.DEFAULT_CLAMP_MIN):
    return kl_divergence(Q, P_fused, mask=mask, clamp_min=clamp_min)

def combined_loss(l_clm, l_fusion, lam):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1]: {lam}")

    return lam * l_clm + (1.0 - lam) * l_fusion

def fuse_mince_many(P_pivot, P_sources, gold, granularity=constants.DEFAULT_MINCE_GRANULARITY,
                    clamp_min=constants.DEFAULT_CLAMP_MIN):
    """MinCE over the pivot and any number of sources. At equal cross-entropy the earliest matrix wins
       (the pivot first); at token granularity masked-out rows always come from the pivot
    """
    if granularity not in constants.MINCE_GRANULARITIES:
        raise ValueError(f"unknown MinCE granularity: '{granularity}'")

    matrices = [as_dist_matrix(P_pivot)] + [as_dist_matrix(P) for P in P_sources]

    for idx, P in enumerate(matrices[1:], 1):
        if P.shape != matrices[0].shape:
            raise DimensionMismatchError(f"source #{idx} has shape {P.shape}, pivot has {matrices[0].shape}")

    if granularity == "sequence":
        ce = [cross_entropy(P, gold, clamp_min=clamp_min) for P in matrices]
        # Whole matrix; its masked-out rows never reach a loss
        return matrices[int(np.argmin(ce))].copy()

    ce = np.stack([row_cross_entropy(P, gold, clamp_min=clamp_min) for P in matrices], axis=0)
    best = np.argmin(ce, axis=0)
    best[~gold.loss_mask] = 0
    fused = matrices[0].copy()

    for idx in range(1, len(matrices)):
        rows = best == idx
        fused[rows] = matrices[idx][rows]

    return fused

def fuse_mince(P_pivot, P_source, gold, granularity=constants.DEFAULT_MINCE_GRANULARITY,
               clamp_min=constants.DEFAULT_CLAMP_MIN):
    return fuse_mince_many(P_pivot, [P_source], gold, granularity=granularity, clamp_min=clamp_min)

def align_tokens(source_tokens, pivot_tokens, source_vocab=None, pivot_vocab=None):
    """Monotone alignment of two tokenizations of the same text.

       Vocabularies are lists of token strings indexed by id; when not provided, the sorted distinct
       tokens of each sequence are used
    """
    source_tokens = list(source_tokens)
    pivot_tokens = list(pivot_tokens)
    source_vocab = sorted(set(source_tokens)) if source_vocab is None else list(source_vocab)
    pivot_vocab = sorted(set(pivot_tokens)) if pivot_vocab is None else list(pivot_vocab)

    if len(source_tokens) == 0 or len(pivot_tokens) == 0:
        return AlignmentMap([], {}, len(source_tokens), len(pivot_tokens))

    pairs, cost = monotone_alignment(source_tokens, pivot_tokens)
    pivot_ids = {token: idx for idx, token in enumerate(pivot_vocab)}
    vocab_map = {idx: pivot_ids[token] for idx, token in enumerate(source_vocab) if token in pivot_ids}

    logging.debug(f"Token alignment: {len(pairs)} pairs (cost {cost}), {len(vocab_map)} shared vocabulary entries")

    return AlignmentMap(pairs, vocab_map, len(source_tokens), len(pivot_tokens))

def project_distribution(P_source, alignment, pivot_V, top_k=constants.DEFAULT_TOP_K, gold=None):
    """Map source rows onto the pivot rows and vocabulary. Unmapped probability mass is dropped and the
       row renormalized; pivot rows without an aligned source row (or without surviving mass) become
       one-hot on the gold token when gold ids are given, uniform otherwise
    """
    if top_k < 1:
        raise ValueError(f"top_k must be at least 1: {top_k}")

    P_source = as_dist_matrix(P_source)
    nopivot = alignment.nopivot

    if gold is not None:
        gold = np.asarray(gold.token_ids if isinstance(gold, GoldLabels) else gold, dtype=np.int64)

        if len(gold) != nopivot:
            raise DimensionMismatchError(f"{len(gold)} gold ids for {nopivot} pivot rows")

    projected = np.zeros((nopivot, pivot_V), dtype=np.float64)
    filled = np.zeros(nopivot, dtype=bool)

    for s, p in alignment.pairs:
        if not (0 <= s < P_source.shape[0] and 0 <= p < nopivot):
            raise IndexError(f"alignment pair {(s, p)} out of range ({P_source.shape[0]} source rows, {nopivot} pivot rows)")

        row = P_source[s]
        top = np.argsort(-row, kind="stable")[:top_k]

        for token_id in top:
            pivot_id = alignment.vocab_map.get(int(token_id))

            if pivot_id is not None and 0 <= pivot_id < pivot_V:
                projected[p, pivot_id] += row[token_id]

        mass = projected[p].sum()

        if mass > 0.0:
            projected[p] /= mass
            filled[p] = True
        else:
            logging.debug(f"No probability mass of source row {s} survived the projection onto pivot row {p}")

    for p in np.flatnonzero(~filled):
        if gold is not None and 0 <= gold[p] < pivot_V:
            projected[p, gold[p]] = 1.0
        else:
            projected[p] = 1.0 / pivot_V

    return projected
