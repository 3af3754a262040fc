#!/usr/bin/env python3

import os
import math
import logging
import argparse

import numpy as np

import fusemerge.utils.utils as utils
import fusemerge.ingest as ingest
import fusemerge.trainer as trainer
from fusemerge.fusion import cross_entropy, fusion_loss, combined_loss, is_row_stochastic
from fusemerge import constants

def evaluate_checkpoint(ckpt, corpus, teacher_dists=None, lam=constants.DEFAULT_LAMBDA,
                        clamp_min=constants.DEFAULT_CLAMP_MIN):
    """Held-out losses of a toy checkpoint. Losses are averaged over samples; without teacher
       distributions only the CLM loss is computed (and the combined loss equals it)
    """
    model = ckpt if isinstance(ckpt, trainer.ToyLM) else trainer.ToyLM(ckpt)

    if teacher_dists is not None and len(teacher_dists) != len(corpus):
        raise ValueError(f"{len(teacher_dists)} teacher distributions for {len(corpus)} samples")

    clm_losses = []
    fusion_losses = []
    stochastic = True

    for idx, sample in enumerate(corpus):
        Q = trainer.forward(model, sample.token_ids)
        gold = trainer.sample_gold(sample)
        stochastic = stochastic and is_row_stochastic(Q)

        clm_losses.append(cross_entropy(Q, gold, clamp_min=clamp_min))

        if teacher_dists is not None:
            P = trainer.teacher_matrix(teacher_dists[idx])

            fusion_losses.append(fusion_loss(Q, P, mask=gold, clamp_min=clamp_min))

    clm = float(np.mean(clm_losses)) if clm_losses else 0.0
    fusion = float(np.mean(fusion_losses)) if fusion_losses else None
    combined = clm if fusion is None else combined_loss(clm, fusion, lam)
    report = {
        "nosamples": len(corpus),
        "clm_loss": clm,
        "fusion_loss": fusion,
        "combined_loss": combined,
        "lambda": lam if fusion is not None else None,
        "perplexity": math.exp(clm) if clm < 700.0 else math.inf,
        "rows_stochastic": bool(stochastic),
        "finite": bool(math.isfinite(combined)),
    }

    logging.info(f"Evaluation on {len(corpus)} samples: CLM {clm}, fusion {fusion}, combined {combined}")

    return report

def main(args):
    model = trainer.load_toy_lm(args.ckpt)

    corpus = ingest.ingest_dialogues(args.corpus, model.vocab, block_len=args.block_len)
    teacher_dists = None

    if args.teacher_dir:
        teacher_dists = trainer.load_teacher_dists(args.teacher_dir, len(corpus))

    report = evaluate_checkpoint(model, corpus, teacher_dists=teacher_dists, lam=args.lam)
    report["ckpt"] = os.path.basename(args.ckpt)

    return report

if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Held-out evaluation of a toy checkpoint')

    parser.add_argument('ckpt',
        help='Path to the checkpoint')
    parser.add_argument('corpus',
        help='Path to the held-out dialogue corpus')

    parser.add_argument('--teacher-dir', default=None, metavar='PATH',
        help='Directory with one distribution file per sample. If not provided, only the CLM loss is computed')
    parser.add_argument('--lambda', dest='lam', type=float, default=constants.DEFAULT_LAMBDA, metavar='F',
        help=f'Weight of the CLM loss in the combined loss. Default value is {constants.DEFAULT_LAMBDA}')
    parser.add_argument('--block-len', type=int, default=constants.DEFAULT_BLOCK_LEN, metavar='N',
        help=f'Max. tokens per block. Default value is {constants.DEFAULT_BLOCK_LEN}')
    parser.add_argument('--logging-level', metavar='N', type=int, default=constants.DEFAULT_LOGGING_LEVEL,
        help=f'Logging level. Default value is {constants.DEFAULT_LOGGING_LEVEL}')

    args = parser.parse_args()

    utils.set_up_logging(level=args.logging_level)

    utils.print_json(main(args))
