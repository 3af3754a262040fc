#!/usr/bin/env python3

import sys
import json
import logging
import argparse

import fusemerge.utils.utils as utils
import fusemerge.utils.tokenizers as tokenizers
from fusemerge.exceptions import CorpusFormatError, EmptyCorpusError
from fusemerge import constants

class DialogueSample:
    """Token ids of a block and its role mask (True for assistant tokens, which bear the loss)
    """

    def __init__(self, token_ids, role_mask):
        if len(token_ids) != len(role_mask):
            raise ValueError(f"{len(token_ids)} tokens but {len(role_mask)} mask values")

        self.token_ids = [int(t) for t in token_ids]
        self.role_mask = [bool(m) for m in role_mask]

    def __len__(self):
        return len(self.token_ids)

    def to_dict(self):
        return {"token_ids": self.token_ids, "role_mask": self.role_mask}

    def __repr__(self):
        return f"DialogueSample(len={len(self)}, loss_bearing={sum(self.role_mask)})"

def read_dialogues(path):
    """List of dialogues, each one a list of (role, text) turns
    """
    dialogues = []

    with open(path, "r", encoding="utf-8") as f:
        for idx, line in enumerate(f):
            line = line.strip()

            if not line:
                continue

            try:
                entry = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusFormatError(f"line #{idx + 1} is not valid JSON ({str(e)})") from e

            if not isinstance(entry, dict) or not isinstance(entry.get("turns"), list):
                raise CorpusFormatError(f"line #{idx + 1} has no 'turns' list")

            turns = []

            for turn in entry["turns"]:
                if (not isinstance(turn, dict) or turn.get("role") not in ("user", "assistant") or
                    not isinstance(turn.get("text"), str)):
                    raise CorpusFormatError(f"line #{idx + 1} has a malformed turn: {turn}")

                turns.append((turn["role"], turn["text"]))

            dialogues.append(turns)

    if len(dialogues) == 0:
        raise EmptyCorpusError(path)

    return dialogues

def tokenize_dialogue(turns, vocab, tokenize=tokenizers.char_tokenize):
    token_ids = []
    role_mask = []

    for role, text in turns:
        ids = [vocab.get(token, constants.UNK_ID) for token in tokenize(text)]

        token_ids.extend(ids)
        role_mask.extend([role == "assistant"] * len(ids))

    return token_ids, role_mask

def split_blocks(token_ids, role_mask, block_len):
    """Blocks of at most block_len tokens; blocks without loss-bearing tokens are dropped
    """
    samples = []
    dropped = 0

    for start in range(0, len(token_ids), block_len):
        ids = token_ids[start:start + block_len]
        mask = role_mask[start:start + block_len]

        if not any(mask):
            dropped += 1
            continue

        samples.append(DialogueSample(ids, mask))

    return samples, dropped

def ingest_dialogues(path, vocab, block_len=constants.DEFAULT_BLOCK_LEN, tokenize=tokenizers.char_tokenize):
    if block_len < 2:
        raise ValueError(f"block_len must be at least 2: {block_len}")

    if isinstance(vocab, (list, tuple)):
        vocab = tokenizers.vocab_index(vocab)

    samples = []
    dropped = 0

    for turns in read_dialogues(path):
        token_ids, role_mask = tokenize_dialogue(turns, vocab, tokenize=tokenize)
        blocks, nodropped = split_blocks(token_ids, role_mask, block_len)

        samples.extend(blocks)
        dropped += nodropped

    if dropped:
        logging.warning(f"{dropped} blocks without assistant tokens were dropped")

    logging.info(f"Ingested {len(samples)} samples from '{path}' (block length {block_len})")

    return samples

if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Tokenize and block a dialogue corpus (one JSON sample per output line)')

    parser.add_argument('corpus', help='Line-delimited JSON corpus: {"turns": [{"role": ..., "text": ...}, ...]}')

    parser.add_argument('--vocab', default=None, metavar='PATH',
                        help='JSON list of token strings (index = token id). By default a character vocabulary is built from the corpus')
    parser.add_argument('--block-len', type=int, default=constants.DEFAULT_BLOCK_LEN, metavar='N',
                        help=f'Max. tokens per block. The default value is {constants.DEFAULT_BLOCK_LEN}')
    parser.add_argument('--logging-level', metavar='N', type=int, default=constants.DEFAULT_LOGGING_LEVEL,
                        help=f'Logging level. Default value is {constants.DEFAULT_LOGGING_LEVEL}')

    args = parser.parse_args()

    utils.set_up_logging(level=args.logging_level)

    if args.vocab:
        vocab = utils.read_json_file(args.vocab)
    else:
        vocab = tokenizers.build_char_vocab(text for turns in read_dialogues(args.corpus) for _, text in turns)

    for sample in ingest_dialogues(args.corpus, vocab, block_len=args.block_len):
        sys.stdout.write(json.dumps(sample.to_dict()) + "\n")
