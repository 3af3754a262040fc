
import os
import json
import math
import logging

import numpy as np
from scipy import special

import fusemerge.utils.dist_utils as dist_utils
import fusemerge.tensor_store as tensor_store
from fusemerge.tensor_store import Checkpoint
from fusemerge.fusion import GoldLabels, cross_entropy, kl_divergence, combined_loss, fuse_mince_many
from fusemerge.exceptions import CheckpointFormatError, ConfigError, DimensionMismatchError, MissingTeacherFileError, \
                                 NonFiniteLossError
from fusemerge import constants

class TrainConfig:

    FIELDS = {
        "lambda": constants.DEFAULT_LAMBDA,
        "lr": constants.DEFAULT_LR,
        "epochs": constants.DEFAULT_EPOCHS,
        "batch": constants.DEFAULT_BATCH,
        "seed": constants.DEFAULT_SEED,
        "block_len": constants.DEFAULT_BLOCK_LEN,
        "mince_granularity": constants.DEFAULT_MINCE_GRANULARITY,
        "lr_schedule": constants.DEFAULT_LR_SCHEDULE,
        "warmup_ratio": constants.DEFAULT_WARMUP_RATIO,
        "clamp_min": constants.DEFAULT_CLAMP_MIN,
    }

    def __init__(self, **kwargs):
        unknown = set(kwargs) - set(self.FIELDS)

        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")

        values = dict(self.FIELDS)
        values.update(kwargs)

        # 'lambda' is a keyword
        self.lam = values["lambda"]
        self.lr = values["lr"]
        self.epochs = values["epochs"]
        self.batch = values["batch"]
        self.seed = values["seed"]
        self.block_len = values["block_len"]
        self.mince_granularity = values["mince_granularity"]
        self.lr_schedule = values["lr_schedule"]
        self.warmup_ratio = values["warmup_ratio"]
        self.clamp_min = values["clamp_min"]

        self.validate()

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def validate(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must be in [0, 1]: {self.lam}")
        if not self.lr > 0.0:
            raise ConfigError(f"lr must be positive: {self.lr}")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError(f"epochs must be a non-negative integer: {self.epochs}")
        if not isinstance(self.batch, int) or self.batch < 0:
            raise ConfigError(f"batch must be a non-negative integer: {self.batch}")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer: {self.seed}")
        if not isinstance(self.block_len, int) or self.block_len < 2:
            raise ConfigError(f"block_len must be an integer >= 2: {self.block_len}")
        if self.mince_granularity not in constants.MINCE_GRANULARITIES:
            raise ConfigError(f"unknown MinCE granularity: '{self.mince_granularity}'")
        if self.lr_schedule not in constants.LR_SCHEDULES:
            raise ConfigError(f"unknown lr schedule: '{self.lr_schedule}'")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError(f"warmup_ratio must be in [0, 1): {self.warmup_ratio}")

    def to_dict(self):
        return {"lambda": self.lam, "lr": self.lr, "epochs": self.epochs, "batch": self.batch, "seed": self.seed,
                "block_len": self.block_len, "mince_granularity": self.mince_granularity,
                "lr_schedule": self.lr_schedule, "warmup_ratio": self.warmup_ratio, "clamp_min": self.clamp_min}

class ToyLM:
    """Embedding + linear + softmax language model: row i of forward() is softmax(embed[token_i] @ out)
    """

    def __init__(self, params):
        if "embed" not in params or "out" not in params:
            raise DimensionMismatchError("a toy model needs 'embed' and 'out' tensors")

        self.params = params
        self.embed = np.asarray(params["embed"], dtype=np.float64)
        self.out = np.asarray(params["out"], dtype=np.float64)

        if self.embed.ndim != 2 or self.out.shape != (self.embed.shape[1], self.embed.shape[0]):
            raise DimensionMismatchError(f"embed {self.embed.shape} and out {self.out.shape} do not form a V x d / d x V pair")

        self.vocab_size, self.dim = self.embed.shape
        self.vocab = json.loads(params.metadata["vocab"]) if "vocab" in params.metadata else None

def init_toy_lm(vocab, dim=constants.DEFAULT_DIM, seed=constants.DEFAULT_SEED, scale=constants.DEFAULT_INIT_SCALE):
    """vocab: list of token strings (index = id) or the vocabulary size
    """
    vocab_size = vocab if isinstance(vocab, int) else len(vocab)
    rng = np.random.default_rng(seed)
    embed = rng.normal(0.0, scale, size=(vocab_size, dim))
    out = rng.normal(0.0, scale, size=(dim, vocab_size))
    metadata = {"architecture": "toy-embed-linear-softmax", "seed": str(seed)}

    if not isinstance(vocab, int):
        metadata["vocab"] = json.dumps(list(vocab), ensure_ascii=False)

    return ToyLM(Checkpoint({"embed": embed, "out": out}, metadata))

def _with_params(model, embed, out, metadata=None):
    meta = dict(model.params.metadata) if metadata is None else metadata

    return ToyLM(Checkpoint({"embed": embed, "out": out}, meta))

def forward(model, token_ids):
    token_ids = np.asarray(token_ids, dtype=np.int64)

    if np.any(token_ids < 0) or np.any(token_ids >= model.vocab_size):
        raise IndexError(f"token ids out of range [0, {model.vocab_size})")

    logits = model.embed[token_ids] @ model.out

    return special.softmax(logits, axis=1)

def sample_gold(sample):
    """Row i predicts token i+1; the final row has no target and is masked out
    """
    if len(sample) == 0:
        return GoldLabels([], [])

    token_ids = sample.token_ids[1:] + [constants.UNK_ID]
    loss_mask = sample.role_mask[1:] + [False]

    return GoldLabels(token_ids, loss_mask)

def sequence_loss_and_grads(model, token_ids, gold, P_fused, lam, clamp_min=constants.DEFAULT_CLAMP_MIN):
    """Combined CLM/fusion loss of one sequence and its closed-form gradients. P_fused=None is pure CLM
    """
    token_ids = np.asarray(token_ids, dtype=np.int64)
    Q = forward(model, token_ids)
    norows = Q.shape[0]

    if len(gold) != norows:
        raise DimensionMismatchError(f"{len(gold)} gold labels for {norows} rows")
    if P_fused is not None:
        P_fused = np.asarray(P_fused, dtype=np.float64)

        if P_fused.shape != Q.shape:
            raise DimensionMismatchError(f"fused distribution {P_fused.shape} vs model output {Q.shape}")

    mask = gold.loss_mask
    nomasked = int(np.sum(mask))
    grad_logits = np.zeros_like(Q)

    l_clm = cross_entropy(Q, gold, clamp_min=clamp_min)

    if nomasked:
        rows = np.flatnonzero(mask)
        gold_ids = gold.token_ids[rows]
        # Where the gold probability is clamped the CE term is constant
        active = Q[rows, gold_ids] >= clamp_min
        grad_ce = Q[rows].copy()
        grad_ce[np.arange(len(rows)), gold_ids] -= 1.0
        grad_ce[~active] = 0.0
        grad_ce /= nomasked

    if P_fused is None:
        loss = l_clm

        if nomasked:
            grad_logits[rows] = grad_ce
    else:
        l_fusion = kl_divergence(Q, P_fused, mask=mask, clamp_min=clamp_min)
        loss = combined_loss(l_clm, l_fusion, lam)

        if nomasked:
            active = Q[rows] >= clamp_min
            P_eff = np.where(active, P_fused[rows], 0.0)
            # Rows of P_fused sum to 1: the unclamped mass is 1 minus the clamped one
            mass = 1.0 - np.where(active, 0.0, P_fused[rows]).sum(axis=1, keepdims=True)
            grad_kl = (Q[rows] * mass - P_eff) / nomasked
            grad_logits[rows] = lam * grad_ce + (1.0 - lam) * grad_kl

    hidden = model.embed[token_ids]
    grad_out = hidden.T @ grad_logits
    grad_embed = np.zeros_like(model.embed)

    np.add.at(grad_embed, token_ids, grad_logits @ model.out.T)

    return float(loss), Checkpoint({"embed": grad_embed, "out": grad_out})

def loss_and_grads(model, sample, P_fused, lam, clamp_min=constants.DEFAULT_CLAMP_MIN):
    return sequence_loss_and_grads(model, sample.token_ids, sample_gold(sample), P_fused, lam, clamp_min=clamp_min)

def teacher_dist_path(teacher_dir, idx):
    return os.path.join(teacher_dir, f"{idx:06d}{constants.TEACHER_DIST_SUFFIX}")

def load_teacher_dists(teacher_dir, nosamples):
    paths = [teacher_dist_path(teacher_dir, idx) for idx in range(nosamples)]

    for path in paths:
        if not os.path.isfile(path):
            raise MissingTeacherFileError(path)

    return paths

def teacher_matrix(teacher):
    if isinstance(teacher, str):
        if not os.path.isfile(teacher):
            raise MissingTeacherFileError(teacher)

        return dist_utils.load(teacher)[0]

    return np.asarray(teacher, dtype=np.float64)

def learning_rate(config, step, nosteps):
    if config.lr_schedule == "constant":
        return config.lr

    nowarmup = int(math.ceil(config.warmup_ratio * nosteps))

    if step < nowarmup:
        return config.lr * (step + 1) / nowarmup

    progress = (step - nowarmup) / max(1, nosteps - nowarmup)

    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))

def _batch_loss_and_grads(model, corpus, fused, idxs, lam, clamp_min, epoch):
    total_loss = 0.0
    grad_embed = np.zeros_like(model.embed)
    grad_out = np.zeros_like(model.out)

    for idx in idxs:
        loss, grads = loss_and_grads(model, corpus[idx], fused[idx], lam, clamp_min=clamp_min)

        if not math.isfinite(loss):
            raise NonFiniteLossError(f"loss of sample #{idx} is {loss} at epoch {epoch}")

        total_loss += loss
        grad_embed += grads["embed"]
        grad_out += grads["out"]

    n = len(idxs)

    return total_loss / n, grad_embed / n, grad_out / n

def teacher_sets(teacher_dists):
    """One teacher (an entry per sample) or a list of such teachers -> list of teachers
    """
    if len(teacher_dists) > 0 and all(isinstance(teacher, (list, tuple)) for teacher in teacher_dists):
        return [list(teacher) for teacher in teacher_dists]

    return [list(teacher_dists)]

def fuse_distributions(pivot, teacher_dists, corpus, granularity=constants.DEFAULT_MINCE_GRANULARITY,
                       clamp_min=constants.DEFAULT_CLAMP_MIN):
    """MinCE of the pivot's own distributions and those of one or more teachers, one fused matrix per sample
    """
    teachers = teacher_sets(teacher_dists)

    for t, teacher in enumerate(teachers):
        if len(teacher) != len(corpus):
            raise DimensionMismatchError(f"{len(teacher)} distributions of teacher #{t} for {len(corpus)} samples")

    fused = []

    for idx, sample in enumerate(corpus):
        P_pivot = forward(pivot, sample.token_ids)
        P_teachers = []

        for t, teacher in enumerate(teachers):
            P_teacher = teacher_matrix(teacher[idx])

            if P_teacher.shape != P_pivot.shape:
                raise DimensionMismatchError(f"distribution #{idx} of teacher #{t} has shape {P_teacher.shape}, "
                                             f"expected {P_pivot.shape} (projected to the pivot vocabulary?)")

            P_teachers.append(P_teacher)

        fused.append(fuse_mince_many(P_pivot, P_teachers, sample_gold(sample), granularity=granularity,
                                     clamp_min=clamp_min))

    return fused

def corpus_loss(model, corpus, fused, lam, clamp_min=constants.DEFAULT_CLAMP_MIN):
    losses = [loss_and_grads(model, sample, P, lam, clamp_min=clamp_min)[0] for sample, P in zip(corpus, fused)]

    return float(np.mean(losses)) if losses else 0.0

def pairwise_fuse(pivot, teacher_dists, corpus, config):
    """Fine-tune a copy of the pivot towards the MinCE fusion of its own and one teacher's distributions.
       teacher_dists may also be a list of teachers: all of them are fused at once (the multi-source baseline).

       Returns the trained parameters; the per-epoch losses are stored in the 'train_losses' metadata entry
    """
    if len(corpus) == 0:
        raise ValueError("the corpus is empty")

    fused = fuse_distributions(pivot, teacher_dists, corpus, granularity=config.mince_granularity,
                               clamp_min=config.clamp_min)
    embed = pivot.embed.copy()
    out = pivot.out.copy()
    model = _with_params(pivot, embed, out)
    rng = np.random.default_rng(config.seed)
    full_batch = config.batch == 0 or config.batch >= len(corpus)
    nobatches = 1 if full_batch else int(math.ceil(len(corpus) / config.batch))
    nosteps = config.epochs * nobatches
    losses = []
    step = 0

    logging.info(f"Pairwise fusion: {len(corpus)} samples, {config.epochs} epochs, lambda {config.lam}, "
                 f"{'full batch' if full_batch else f'batch {config.batch}'}, MinCE at {config.mince_granularity} level")

    for epoch in range(config.epochs):
        order = np.arange(len(corpus)) if full_batch else rng.permutation(len(corpus))
        epoch_loss = 0.0

        for b in range(nobatches):
            idxs = order if full_batch else order[b * config.batch:(b + 1) * config.batch]
            loss, grad_embed, grad_out = _batch_loss_and_grads(model, corpus, fused, idxs, config.lam,
                                                               config.clamp_min, epoch)
            lr = learning_rate(config, step, nosteps)

            embed = embed - lr * grad_embed
            out = out - lr * grad_out
            model = _with_params(pivot, embed, out)
            epoch_loss += loss * len(idxs)
            step += 1

        losses.append(epoch_loss / len(corpus))

        logging.info(f"Epoch {epoch + 1}/{config.epochs}: loss {losses[-1]}")

    final_loss = corpus_loss(model, corpus, fused, config.lam, clamp_min=config.clamp_min)

    if not math.isfinite(final_loss):
        raise NonFiniteLossError(f"final loss is {final_loss}")

    metadata = {k: v for k, v in pivot.params.metadata.items() if k in constants.INHERITED_METADATA_KEYS}
    metadata.update({
        "train_config": json.dumps(config.to_dict(), sort_keys=True),
        "noteachers": str(len(teacher_sets(teacher_dists))),
        "train_losses": json.dumps(losses),
        "final_loss": repr(final_loss),
    })

    return Checkpoint({"embed": embed, "out": out}, metadata)

def load_toy_lm(path, require_vocab=True):
    model = ToyLM(tensor_store.load_checkpoint(path))

    if require_vocab and model.vocab is None:
        raise CheckpointFormatError(f"'{path}' has no 'vocab' metadata entry")

    return model
