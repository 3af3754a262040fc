#!/usr/bin/env python3

import os
import logging
import argparse

import numpy as np

import fusemerge.utils.utils as utils
import fusemerge.utils.dist_utils as dist_utils
import fusemerge.utils.tokenizers as tokenizers
import fusemerge.ingest as ingest
import fusemerge.trainer as trainer
from fusemerge.fusion import align_tokens, project_distribution
from fusemerge.exceptions import DimensionMismatchError
from fusemerge import constants

DEFAULT_VALUES = {
    "mix": 0.5,
    "dim": constants.DEFAULT_DIM,
    "scale": 1.0,
    "top_k": constants.DEFAULT_TOP_K,
}

def teacher_distributions(model, corpus):
    """Teacher-forced distribution matrix of every sample (row i predicts token i+1)
    """
    return [trainer.forward(model, sample.token_ids) for sample in corpus]

def _gold_one_hot(sample, vocab_size):
    gold = trainer.sample_gold(sample)
    one_hot = np.zeros((len(sample), vocab_size), dtype=np.float64)

    one_hot[np.arange(len(sample)), gold.token_ids] = 1.0

    return one_hot

def synthesize_teacher(corpus, vocab_size, seed, mix=DEFAULT_VALUES["mix"], dim=DEFAULT_VALUES["dim"],
                       scale=DEFAULT_VALUES["scale"]):
    """Distributions of a seeded random model mixed with a one-hot on the gold token:
       (1 - mix) * random + mix * gold. Different seeds give divergent teachers
    """
    if not 0.0 <= mix <= 1.0:
        raise ValueError(f"mix must be in [0, 1]: {mix}")

    model = trainer.init_toy_lm(vocab_size, dim=dim, seed=seed, scale=scale)
    dists = []

    for sample, P in zip(corpus, teacher_distributions(model, corpus)):
        dists.append((1.0 - mix) * P + mix * _gold_one_hot(sample, vocab_size))

    logging.info(f"Synthesized a teacher (seed {seed}, mix {mix}) for {len(corpus)} samples")

    return dists

def decode(token_ids, vocab):
    return "".join("" if idx == constants.UNK_ID else vocab[idx] for idx in token_ids)

def synthesize_char_pair_teacher(corpus, pivot_vocab, seed, mix=DEFAULT_VALUES["mix"], dim=DEFAULT_VALUES["dim"],
                                 scale=DEFAULT_VALUES["scale"], top_k=DEFAULT_VALUES["top_k"]):
    """Teacher with its own tokenization (character pairs plus the pivot's single characters), projected
       back onto the pivot rows and vocabulary through align_tokens/project_distribution
    """
    texts = [decode(sample.token_ids, pivot_vocab) for sample in corpus]
    pair_tokens = set(tokenizers.build_vocab(texts, tokenize=tokenizers.char_pair_tokenize)[1:])
    source_vocab = [constants.UNK_TOKEN] + sorted(pair_tokens | set(pivot_vocab[1:]))
    source_index = tokenizers.vocab_index(source_vocab)
    model = trainer.init_toy_lm(len(source_vocab), dim=dim, seed=seed, scale=scale)
    dists = []

    for sample, text in zip(corpus, texts):
        pivot_tokens = [pivot_vocab[idx] for idx in sample.token_ids]
        source_tokens = tokenizers.char_pair_tokenize(text)

        if len(source_tokens) == 0:
            dists.append(_gold_one_hot(sample, len(pivot_vocab)))
            continue

        source_ids = tokenizers.encode(source_tokens, source_index)
        source_sample = ingest.DialogueSample(source_ids, [True] * len(source_ids))
        P_source = trainer.forward(model, source_ids)
        P_source = (1.0 - mix) * P_source + mix * _gold_one_hot(source_sample, len(source_vocab))
        alignment = align_tokens(source_tokens, pivot_tokens, source_vocab=source_vocab, pivot_vocab=pivot_vocab)

        dists.append(project_distribution(P_source, alignment, len(pivot_vocab), top_k=top_k,
                                          gold=trainer.sample_gold(sample)))

    logging.info(f"Synthesized a character-pair teacher (seed {seed}, {len(source_vocab)} source tokens) "
                 f"for {len(corpus)} samples")

    return dists

def write_teacher_dir(dists, teacher_dir, corpus=None, vocab=None, metadata=None):
    """One DistMatrix file per sample, named {index:06d}.dist
    """
    if corpus is not None and len(corpus) != len(dists):
        raise DimensionMismatchError(f"{len(dists)} distributions for {len(corpus)} samples")

    os.makedirs(teacher_dir, exist_ok=True)

    paths = []

    for idx, dist in enumerate(dists):
        tokens = None
        gold = None

        if corpus is not None:
            gold = trainer.sample_gold(corpus[idx]).token_ids

            if vocab is not None:
                tokens = [vocab[g] for g in gold[:-1]] + [""] if len(gold) else []

        path = trainer.teacher_dist_path(teacher_dir, idx)

        dist_utils.store(dist, path, tokens=tokens, gold=gold, metadata=metadata)
        paths.append(path)

    logging.info(f"Wrote {len(paths)} distribution files to '{teacher_dir}'")

    return paths

def main(args):
    pivot = trainer.load_toy_lm(args.pivot)

    corpus = ingest.ingest_dialogues(args.corpus, pivot.vocab, block_len=args.block_len)

    if args.kind == "pivot":
        dists = teacher_distributions(pivot, corpus)
    elif args.kind == "random":
        dists = synthesize_teacher(corpus, pivot.vocab_size, args.seed, mix=args.mix, dim=args.dim)
    elif args.kind == "char-pair":
        dists = synthesize_char_pair_teacher(corpus, pivot.vocab, args.seed, mix=args.mix, dim=args.dim,
                                             top_k=args.top_k)
    else:
        raise Exception(f"unknown teacher kind: '{args.kind}'")

    return write_teacher_dir(dists, args.out_dir, corpus=corpus, vocab=pivot.vocab, metadata={"teacher": args.kind})

def add_arguments(parser):
    parser.add_argument('--pivot', required=True, metavar='PATH',
                        help='Pivot checkpoint (its "vocab" metadata defines the target vocabulary)')
    parser.add_argument('--corpus', required=True, metavar='PATH',
                        help='Line-delimited JSON dialogue corpus')
    parser.add_argument('--out-dir', required=True, metavar='PATH',
                        help='Directory where one distribution file per sample will be stored')
    parser.add_argument('--kind', choices=["pivot", "random", "char-pair"], default="random",
                        help='Teacher: the pivot itself, a seeded random model or a seeded random model with a '
                             'character-pair tokenizer (projected onto the pivot vocabulary). Default is random')
    parser.add_argument('--seed', type=int, default=constants.DEFAULT_SEED, metavar='N',
                        help=f'Seed of the synthetic teacher. Default is {constants.DEFAULT_SEED}')
    parser.add_argument('--mix', type=float, default=DEFAULT_VALUES["mix"], metavar='F',
                        help=f'Weight of the gold one-hot component. Default is {DEFAULT_VALUES["mix"]}')
    parser.add_argument('--dim', type=int, default=DEFAULT_VALUES["dim"], metavar='N',
                        help=f'Hidden size of the synthetic teacher. Default is {DEFAULT_VALUES["dim"]}')
    parser.add_argument('--top-k', type=int, default=DEFAULT_VALUES["top_k"], metavar='N',
                        help=f'Source probabilities kept per row when projecting. Default is {DEFAULT_VALUES["top_k"]}')
    parser.add_argument('--block-len', type=int, default=constants.DEFAULT_BLOCK_LEN, metavar='N',
                        help=f'Max. tokens per block. Default is {constants.DEFAULT_BLOCK_LEN}')

if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Generate teacher distribution files for a dialogue corpus')

    add_arguments(parser)

    parser.add_argument('--logging-level', metavar='N', type=int, default=constants.DEFAULT_LOGGING_LEVEL,
                        help=f'Logging level. Default value is {constants.DEFAULT_LOGGING_LEVEL}')

    args = parser.parse_args()

    utils.set_up_logging(level=args.logging_level)

    main(args)
