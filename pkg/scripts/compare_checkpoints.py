#!/usr/bin/env python3

import sys
import logging
import argparse

import numpy as np

sys.path.append(f"{__file__.rsplit('/', 1)[0]}/..")

import fusemerge.utils.utils as utils
import fusemerge.tensor_store as tensor_store
from fusemerge import constants

def compare(ckpt1, ckpt2):
    """Max. absolute difference of every shared tensor (None when the shapes mismatch)
    """
    result = {}

    for name in sorted(set(ckpt1.names()) | set(ckpt2.names())):
        if name not in ckpt1 or name not in ckpt2:
            logging.warning(f"Tensor '{name}' is only in one of the checkpoints")

            result[name] = None
        elif ckpt1[name].shape != ckpt2[name].shape:
            logging.warning(f"Shapes mismatch for '{name}': {ckpt1[name].shape} vs {ckpt2[name].shape}")

            result[name] = None
        else:
            diff = np.abs(ckpt1[name].astype(np.float64) - ckpt2[name].astype(np.float64))
            result[name] = float(diff.max()) if diff.size else 0.0

            logging.debug(f"Tensor '{name}': max. abs. difference {result[name]}")

    return result

def identical(path1, path2):
    with open(path1, "rb") as f1, open(path2, "rb") as f2:
        return f1.read() == f2.read()

def main(args):
    ckpt1 = tensor_store.load_checkpoint(args.ckpt_1)
    ckpt2 = tensor_store.load_checkpoint(args.ckpt_2)

    utils.print_json({
        "identical_files": identical(args.ckpt_1, args.ckpt_2),
        "identical_tensors": ckpt1.names() == ckpt2.names() and all(np.array_equal(ckpt1[n], ckpt2[n]) for n in ckpt1.names()),
        "max_abs_diff": compare(ckpt1, ckpt2),
    })

if __name__ == '__main__':
    parser = argparse.ArgumentParser(description='Utility to compare two checkpoints tensor by tensor')

    # Mandatory
    parser.add_argument('ckpt_1', metavar='ckpt-1',
                        help='Path to the 1st checkpoint')
    parser.add_argument('ckpt_2', metavar='ckpt-2',
                        help='Path to the 2nd checkpoint')

    # Other
    parser.add_argument('--logging-level', metavar='N', type=int, default=constants.DEFAULT_LOGGING_LEVEL,
                        help=f'Logging level. Default value is {constants.DEFAULT_LOGGING_LEVEL}')

    args = parser.parse_args()

    utils.set_up_logging(level=args.logging_level)

    main(args)
