#!/usr/bin/env python3

import sys
import json
import logging
import argparse

import numpy as np

sys.path.append(f"{__file__.rsplit('/', 1)[0]}/..")

import fusemerge.utils.utils as utils
from fusemerge import constants

DEFAULT_ALPHABET = "abcdefgh"

def random_text(rng, alphabet, min_words, max_words):
    nowords = int(rng.integers(min_words, max_words + 1))
    words = ["".join(rng.choice(list(alphabet), size=int(rng.integers(1, 5)))) for _ in range(nowords)]

    return " ".join(words)

def synthesize(nodialogues, seed, alphabet=DEFAULT_ALPHABET, noturns=2, min_words=1, max_words=4):
    """Seeded user/assistant dialogues over a small alphabet
    """
    rng = np.random.default_rng(seed)
    dialogues = []

    for _ in range(nodialogues):
        turns = []

        for idx in range(noturns):
            role = "user" if idx % 2 == 0 else "assistant"

            turns.append({"role": role, "text": random_text(rng, alphabet, min_words, max_words)})

        dialogues.append({"turns": turns})

    return dialogues

def main(args):
    dialogues = synthesize(args.nodialogues, args.seed, alphabet=args.alphabet, noturns=args.noturns)

    with open(args.output, "w", encoding="utf-8") as f:
        for dialogue in dialogues:
            f.write(json.dumps(dialogue, ensure_ascii=False) + "\n")

    logging.info(f"{len(dialogues)} dialogues written to '{args.output}'")

if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Generate a synthetic dialogue corpus (line-delimited JSON)')

    # Mandatory
    parser.add_argument('output',
                        help='Path of the corpus')

    # Other
    parser.add_argument('--nodialogues', type=int, default=30, metavar='N',
                        help='Number of dialogues. The default value is 30')
    parser.add_argument('--noturns', type=int, default=2, metavar='N',
                        help='Turns per dialogue, alternating user and assistant. The default value is 2')
    parser.add_argument('--alphabet', default=DEFAULT_ALPHABET,
                        help=f'Characters the words are made of. The default value is {DEFAULT_ALPHABET}')
    parser.add_argument('--seed', type=int, default=constants.DEFAULT_SEED, metavar='N',
                        help=f'Seed. The default value is {constants.DEFAULT_SEED}')
    parser.add_argument('--logging-level', metavar='N', type=int, default=constants.DEFAULT_LOGGING_LEVEL,
                        help=f'Logging level. Default value is {constants.DEFAULT_LOGGING_LEVEL}')

    args = parser.parse_args()

    utils.set_up_logging(level=args.logging_level)

    main(args)
