#!/usr/bin/env python3

import os
import sys
import json
import logging
import argparse

import fusemerge.utils.utils as utils
import fusemerge.utils.dist_utils as dist_utils
import fusemerge.utils.tokenizers as tokenizers
import fusemerge.tensor_store as tensor_store
import fusemerge.merge as merge
import fusemerge.ingest as ingest
import fusemerge.trainer as trainer
import fusemerge.evaluate as evaluate
import fusemerge.generate_distributions as generate_distributions
from fusemerge.fusion import align_tokens, project_distribution
from fusemerge.exceptions import CheckpointFormatError, IncompatibleCheckpointsError, UnitMismatchError, \
                                 MissingUnitWeightError, CoefficientError, DimensionMismatchError, CorpusFormatError, \
                                 EmptyCorpusError, NonFiniteLossError, ConfigError, UsageError
from fusemerge import constants

__all__ = ["main", "parse_args", "main_wrapper", "load_cli_config"]

PATH_KEYS = ("base", "targets", "out", "out_dir", "pivot", "teacher_dir", "corpus", "ckpt", "delta_against",
             "source_dist", "source_tokens", "pivot_tokens", "pivot_vocab", "source_vocab")
# Config keys whose argparse destination differs
CONFIG_DESTS = {
    "lambda": "lam",
}
METHODS_WITH_BASE = ("varm", "task_arithmetic", "ties", "dare")

class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with code 1
    """

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(constants.EXIT_USAGE, f"{self.prog}: error: {message}\n")

def config_keys():
    return set(merge.MergeConfig.FIELDS) | set(trainer.TrainConfig.FIELDS) | set(PATH_KEYS)

def load_cli_config(path):
    """JSON document with merge, training and path keys; unknown keys are rejected
    """
    try:
        cli_config = utils.read_json_file(path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"'{path}' is not valid JSON ({str(e)})") from e

    if not isinstance(cli_config, dict):
        raise ConfigError(f"'{path}' does not contain a JSON object")

    unknown = set(cli_config) - config_keys()

    if unknown:
        raise ConfigError(f"unknown keys in '{path}': {sorted(unknown)}")

    return cli_config

def apply_cli_config(args):
    """Fill the flags which were not provided with the values of the config file (flags win)
    """
    if not getattr(args, "config_file", None):
        return

    cli_config = load_cli_config(args.config_file)

    for key, value in cli_config.items():
        dest = CONFIG_DESTS.get(key, key)

        if hasattr(args, dest) and getattr(args, dest) is None:
            setattr(args, dest, value)

def _require(args, *dests):
    for dest in dests:
        value = getattr(args, dest, None)

        if value is None or (isinstance(value, list) and len(value) == 0):
            raise UsageError(f"--{dest.replace('_', '-')} is required")

def _check_inputs(*paths):
    for path in paths:
        if path is not None:
            utils.expand_and_real_path_and_exists(path, raise_exception=True)

def _collect(args, fields):
    values = {}

    for key in fields:
        value = getattr(args, CONFIG_DESTS.get(key, key), None)

        if value is not None:
            values[key] = value

    return values

def _makedirs_for(path):
    dirname = os.path.dirname(os.path.abspath(path))

    os.makedirs(dirname, exist_ok=True)

def cmd_merge(args):
    config = merge.MergeConfig.from_dict(_collect(args, merge.MergeConfig.FIELDS))

    _require(args, "targets", "out")

    if config.method in METHODS_WITH_BASE and args.base is None:
        raise UsageError(f"--base is required by the '{config.method}' method")

    _check_inputs(args.base, *args.targets)

    base = tensor_store.load_checkpoint(args.base) if args.base is not None else None
    targets = [tensor_store.load_checkpoint(path) for path in args.targets]
    merged, report = merge.merge(config, base, targets)

    _makedirs_for(args.out)
    tensor_store.save_checkpoint(merged, args.out)

    report["out"] = args.out

    utils.print_json(report)

def cmd_sweep(args):
    _require(args, "base", "targets", "out_dir")
    _check_inputs(args.base, *args.targets)

    base = tensor_store.load_checkpoint(args.base)
    targets = [tensor_store.load_checkpoint(path) for path in args.targets]
    values = _collect(args, ("weight_mode", "temperature", "layer_pattern", "name_filter"))
    report = {}

    os.makedirs(args.out_dir, exist_ok=True)

    for granularity in constants.GRANULARITIES:
        config = merge.MergeConfig(method="varm", granularity=granularity, **values)
        merged, merge_report = merge.merge(config, base, targets)
        path = os.path.join(args.out_dir, f"{granularity}{constants.CKPT_SUFFIX}")

        tensor_store.save_checkpoint(merged, path)

        report[granularity] = {"out": path, "nounits": len(merge_report["units"]), "units": merge_report["units"]}

        logging.info(f"Sweep: {granularity} granularity stored in '{path}'")

    utils.print_json({"method": "varm", "notargets": len(targets), "granularities": report})

def cmd_fuse_train(args):
    config = trainer.TrainConfig.from_dict(_collect(args, trainer.TrainConfig.FIELDS))

    _require(args, "pivot", "teacher_dir", "corpus", "out")
    _check_inputs(args.pivot, args.corpus)

    teacher_dirs = [args.teacher_dir] if isinstance(args.teacher_dir, str) else list(args.teacher_dir)

    for teacher_dir in teacher_dirs:
        utils.expand_and_real_path_and_exists(teacher_dir, raise_exception=True, func_check_exists=os.path.isdir)

    pivot = trainer.load_toy_lm(args.pivot)
    corpus = ingest.ingest_dialogues(args.corpus, pivot.vocab, block_len=config.block_len)
    teachers = [trainer.load_teacher_dists(teacher_dir, len(corpus)) for teacher_dir in teacher_dirs]
    # Several teachers: multi-source fusion of all of them at once
    teacher_dists = teachers[0] if len(teachers) == 1 else teachers
    trained = trainer.pairwise_fuse(pivot, teacher_dists, corpus, config)

    _makedirs_for(args.out)
    tensor_store.save_checkpoint(trained, args.out)

    train_log = {
        "out": args.out,
        "nosamples": len(corpus),
        "noteachers": len(teachers),
        "config": config.to_dict(),
        "train_losses": json.loads(trained.metadata["train_losses"]),
        "final_loss": float(trained.metadata["final_loss"]),
    }
    train_log_path = args.train_log if args.train_log else f"{args.out}.train.json"

    utils.write_json_file(train_log, train_log_path)

    train_log["train_log"] = train_log_path

    utils.print_json(train_log)

def cmd_inspect(args):
    _require(args, "ckpt")
    _check_inputs(args.ckpt, args.delta_against)

    ckpt = tensor_store.load_checkpoint(args.ckpt)
    report = {
        "tensors": [{"name": name, "dtype": tensor_store.dtype_name(tensor), "shape": list(tensor.shape)}
                    for name, tensor in ckpt],
        "noscalars": ckpt.noscalars(),
        "metadata": dict(ckpt.metadata),
    }

    if args.delta_against:
        base = tensor_store.load_checkpoint(args.delta_against)
        compatibility = tensor_store.validate_compatible([base, ckpt])

        if not compatibility.compatible:
            raise IncompatibleCheckpointsError(json.dumps(compatibility.to_dict(), sort_keys=True))

        granularity = args.granularity if args.granularity else constants.DEFAULT_GRANULARITY
        layer_pattern = args.layer_pattern if args.layer_pattern else constants.DEFAULT_LAYER_PATTERN
        partition = tensor_store.partition_units(base, granularity, layer_pattern=layer_pattern)
        stats = merge.delta_stats(base, ckpt, partition)

        report["delta"] = {"against": args.delta_against, "granularity": granularity, "units": stats.as_dict()}

    utils.print_json(report)

def cmd_align(args):
    _require(args, "source_dist", "source_tokens", "pivot_tokens", "pivot_vocab", "out")
    _check_inputs(args.source_dist, args.source_tokens, args.pivot_tokens, args.pivot_vocab, args.source_vocab)

    source_tokens = utils.read_json_file(args.source_tokens)
    pivot_tokens = utils.read_json_file(args.pivot_tokens)
    pivot_vocab = utils.read_json_file(args.pivot_vocab)

    if len(source_tokens) == 0 or len(pivot_tokens) == 0:
        raise UsageError("the source and pivot token lists must not be empty")

    dist, _, _, metadata = dist_utils.load(args.source_dist)

    if args.source_vocab:
        source_vocab = utils.read_json_file(args.source_vocab)
    elif "vocab" in metadata:
        source_vocab = json.loads(metadata["vocab"])
    else:
        raise UsageError(f"--source-vocab is required ('{args.source_dist}' has no 'vocab' metadata entry)")

    if dist.shape[0] != len(source_tokens):
        raise UsageError(f"{dist.shape[0]} distribution rows for {len(source_tokens)} source tokens")
    if dist.shape[1] != len(source_vocab):
        raise UsageError(f"{dist.shape[1]} distribution columns for {len(source_vocab)} source vocabulary entries")

    top_k = args.top_k if args.top_k is not None else constants.DEFAULT_TOP_K
    alignment = align_tokens(source_tokens, pivot_tokens, source_vocab=source_vocab, pivot_vocab=pivot_vocab)
    # Row i of the pivot predicts pivot token i+1
    gold = tokenizers.encode(pivot_tokens[1:], tokenizers.vocab_index(pivot_vocab)) + [constants.UNK_ID]
    projected = project_distribution(dist, alignment, len(pivot_vocab), top_k=top_k, gold=gold)

    _makedirs_for(args.out)
    dist_utils.store(projected, args.out, tokens=list(pivot_tokens[1:]) + [""], gold=gold,
                     metadata={"alignment": json.dumps(alignment.to_dict(), sort_keys=True),
                               "vocab": json.dumps(pivot_vocab, ensure_ascii=False)})

    utils.print_json({"out": args.out, "pairs": [list(p) for p in alignment.pairs], "nosource": alignment.nosource,
                      "nopivot": alignment.nopivot, "nomapped_tokens": len(alignment.vocab_map), "top_k": top_k})

def cmd_init_pivot(args):
    _require(args, "out")

    if args.vocab:
        _check_inputs(args.vocab)

        vocab = utils.read_json_file(args.vocab)
    elif args.corpus:
        _check_inputs(args.corpus)

        vocab = tokenizers.build_char_vocab(text for turns in ingest.read_dialogues(args.corpus) for _, text in turns)
    else:
        raise UsageError("either --vocab or --corpus is required")

    pivot = trainer.init_toy_lm(vocab, dim=args.dim, seed=args.seed if args.seed is not None else constants.DEFAULT_SEED,
                                scale=args.scale)

    _makedirs_for(args.out)
    tensor_store.save_checkpoint(pivot.params, args.out)

    utils.print_json({"out": args.out, "vocab_size": pivot.vocab_size, "dim": pivot.dim})

def cmd_gen_dists(args):
    _check_inputs(args.pivot, args.corpus)

    paths = generate_distributions.main(args)

    utils.print_json({"out_dir": args.out_dir, "kind": args.kind, "nofiles": len(paths)})

def cmd_evaluate(args):
    _require(args, "ckpt", "corpus")
    _check_inputs(args.ckpt, args.corpus)

    if args.lam is None:
        args.lam = constants.DEFAULT_LAMBDA
    if args.block_len is None:
        args.block_len = constants.DEFAULT_BLOCK_LEN

    utils.print_json(evaluate.main(args))

def exit_code(e):
    if isinstance(e, NonFiniteLossError):
        return constants.EXIT_NON_FINITE_LOSS
    if isinstance(e, (IncompatibleCheckpointsError, UnitMismatchError, MissingUnitWeightError, DimensionMismatchError)):
        return constants.EXIT_INCOMPATIBLE
    if isinstance(e, (CheckpointFormatError, CorpusFormatError, EmptyCorpusError, OSError)):
        return constants.EXIT_IO
    if isinstance(e, (ConfigError, CoefficientError, ValueError)):
        return constants.EXIT_USAGE

    return None

def main(args):
    utils.set_up_logging(filename=args.log_file, level=args.logging_level, display_when_file=args.log_display)

    try:
        apply_cli_config(args)
        args.func(args)
    except Exception as e:
        code = exit_code(e)

        if code is None:
            raise

        if code == constants.EXIT_USAGE:
            sys.stderr.write(args.usage)

        logging.error(str(e))

        return code

    return constants.EXIT_OK

def _add_merge_arguments(parser, with_method=True):
    if with_method:
        parser.add_argument('--method', choices=list(constants.MERGE_METHODS) + list(merge.METHOD_ALIASES), default=None,
                            help='Merging method. Default is varm')
        parser.add_argument('--granularity', choices=constants.GRANULARITIES, default=None,
                            help=f'Unit over which a single VaRM weight applies. Default is {constants.DEFAULT_GRANULARITY}')

    parser.add_argument('--base', default=None, metavar='PATH',
                        help='Base (pivot) checkpoint. Required by varm, ta, ties and dare')
    parser.add_argument('--targets', action='append', default=None, metavar='PATH',
                        help='Target checkpoint. Repeat the flag for every target')
    parser.add_argument('--weight-mode', choices=constants.WEIGHT_MODES, default=None,
                        help=f'How VaRM turns the variation statistics into weights. Default is {constants.DEFAULT_WEIGHT_MODE}')
    parser.add_argument('--temperature', type=float, default=None, metavar='F',
                        help=f'Temperature of the softmax weight mode. Default is {constants.DEFAULT_SOFTMAX_TEMPERATURE}')
    parser.add_argument('--layer-pattern', default=None, metavar='REGEX',
                        help='Regular expression whose first group is the layer index of a tensor name. '
                             f'Default is {constants.DEFAULT_LAYER_PATTERN}')
    parser.add_argument('--name-filter', default=None, metavar='REGEX',
                        help='Only tensors whose name matches are merged; the rest are copied from the base '
                             '(from the first target if there is no base)')

    if with_method:
        parser.add_argument('--coeffs', type=float, nargs='+', default=None, metavar='F',
                            help='Coefficients of the linear method (one per target, summing to 1). Default is uniform')
        parser.add_argument('--t', type=float, default=None, metavar='F',
                            help=f'Interpolation factor of slerp. Default is {constants.DEFAULT_SLERP_T}')
        parser.add_argument('--scale', type=float, default=None, metavar='F',
                            help=f'Task vector scale of ta, ties and dare. Default is {constants.DEFAULT_SCALE}')
        parser.add_argument('--density', type=float, default=None, metavar='F',
                            help=f'Fraction of task vector entries kept by ties. Default is {constants.DEFAULT_DENSITY}')
        parser.add_argument('--drop-rate', type=float, default=None, metavar='F',
                            help=f'Drop probability of dare. Default is {constants.DEFAULT_DROP_RATE}')
        parser.add_argument('--seed', type=int, default=None, metavar='N',
                            help=f'Seed of the dare drop stream. Default is {constants.DEFAULT_SEED}')

    parser.add_argument('--out' if with_method else '--out-dir', default=None, metavar='PATH',
                        help='Output checkpoint' if with_method else 'Directory for one checkpoint per granularity')

def parse_args(argv=None):
    common = argparse.ArgumentParser(add_help=False)

    common.add_argument('--config', dest='config_file', default=None, metavar='PATH',
                        help='JSON config file with merge, training and path keys. Flags take precedence')
    ## Logging
    common.add_argument('--logging-level', metavar='N', type=int, default=constants.DEFAULT_LOGGING_LEVEL,
                        help=f'Logging level. Default value is {constants.DEFAULT_LOGGING_LEVEL}')
    common.add_argument('--log-file', metavar='PATH', default=None,
                        help='Log file where all the log entries will be stored')
    common.add_argument('--log-display', action='store_true',
                        help='If you set --log-file, logging messages will still be stored but not displayed to standar error output. With this option, the messages will be stored in the log file and also will be displayed')

    parser = ArgumentParser(prog='fusemerge', description='Fuse-then-merge: pairwise distribution fusion of toy '
                            'language models and parameter-space merging of checkpoints')
    subparsers = parser.add_subparsers(dest='command', metavar='command', required=True)

    # merge
    sub = subparsers.add_parser('merge', parents=[common], help='Merge target checkpoints')

    _add_merge_arguments(sub)
    sub.set_defaults(func=cmd_merge, usage=sub.format_usage())

    # sweep
    sub = subparsers.add_parser('sweep', parents=[common], help='VaRM merge at every granularity')

    _add_merge_arguments(sub, with_method=False)
    sub.set_defaults(func=cmd_sweep, usage=sub.format_usage())

    # fuse-train
    sub = subparsers.add_parser('fuse-train', parents=[common], help='Pairwise fusion of the pivot with one teacher')

    sub.add_argument('--pivot', default=None, metavar='PATH', help='Pivot checkpoint')
    sub.add_argument('--teacher-dir', action='append', default=None, metavar='PATH',
                     help='Directory with one teacher distribution file per corpus sample. Repeat the flag to fuse '
                          'several teachers at once (multi-source baseline)')
    sub.add_argument('--corpus', default=None, metavar='PATH', help='Line-delimited JSON dialogue corpus')
    sub.add_argument('--out', default=None, metavar='PATH', help='Output (target) checkpoint')
    sub.add_argument('--train-log', default=None, metavar='PATH',
                     help='JSON training log. Default is <out>.train.json')
    sub.add_argument('--lambda', dest='lam', type=float, default=None, metavar='F',
                     help=f'Weight of the CLM loss in the combined loss. Default is {constants.DEFAULT_LAMBDA}')
    sub.add_argument('--lr', type=float, default=None, metavar='F',
                     help=f'Learning rate. Default is {constants.DEFAULT_LR}')
    sub.add_argument('--epochs', type=int, default=None, metavar='N',
                     help=f'Epochs. Default is {constants.DEFAULT_EPOCHS}')
    sub.add_argument('--batch', type=int, default=None, metavar='N',
                     help='Samples per gradient step; 0 means full batch. Default is 0')
    sub.add_argument('--seed', type=int, default=None, metavar='N',
                     help=f'Seed of the mini-batch order. Default is {constants.DEFAULT_SEED}')
    sub.add_argument('--block-len', type=int, default=None, metavar='N',
                     help=f'Max. tokens per block. Default is {constants.DEFAULT_BLOCK_LEN}')
    sub.add_argument('--mince-granularity', choices=constants.MINCE_GRANULARITIES, default=None,
                     help=f'MinCE fusion granularity. Default is {constants.DEFAULT_MINCE_GRANULARITY}')
    sub.add_argument('--lr-schedule', choices=constants.LR_SCHEDULES, default=None,
                     help=f'Learning rate schedule. Default is {constants.DEFAULT_LR_SCHEDULE}')
    sub.add_argument('--warmup-ratio', type=float, default=None, metavar='F',
                     help=f'Warm-up ratio of the cosine schedule. Default is {constants.DEFAULT_WARMUP_RATIO}')
    sub.add_argument('--clamp-min', type=float, default=None, metavar='F',
                     help=f'Probability clamp before the logarithm. Default is {constants.DEFAULT_CLAMP_MIN}')
    sub.set_defaults(func=cmd_fuse_train, usage=sub.format_usage())

    # inspect
    sub = subparsers.add_parser('inspect', parents=[common], help='Tensor names, shapes and dtypes of a checkpoint')

    sub.add_argument('--ckpt', default=None, metavar='PATH', help='Checkpoint')
    sub.add_argument('--delta-against', default=None, metavar='PATH',
                     help='Also report the per-unit variation statistics against this checkpoint')
    sub.add_argument('--granularity', choices=constants.GRANULARITIES, default=None,
                     help=f'Units of the variation statistics. Default is {constants.DEFAULT_GRANULARITY}')
    sub.add_argument('--layer-pattern', default=None, metavar='REGEX',
                     help=f'Layer pattern of the layer granularity. Default is {constants.DEFAULT_LAYER_PATTERN}')
    sub.set_defaults(func=cmd_inspect, usage=sub.format_usage())

    # align
    sub = subparsers.add_parser('align', parents=[common], help='Project a source distribution file onto the pivot tokenization')

    sub.add_argument('--source-dist', default=None, metavar='PATH', help='Source distribution file')
    sub.add_argument('--source-tokens', default=None, metavar='PATH', help='JSON list of the source token strings')
    sub.add_argument('--pivot-tokens', default=None, metavar='PATH', help='JSON list of the pivot token strings')
    sub.add_argument('--pivot-vocab', default=None, metavar='PATH', help='JSON list of the pivot vocabulary (index = id)')
    sub.add_argument('--source-vocab', default=None, metavar='PATH',
                     help='JSON list of the source vocabulary. Default is the "vocab" metadata entry of the source distribution file')
    sub.add_argument('--out', default=None, metavar='PATH', help='Output distribution file')
    sub.add_argument('--top-k', type=int, default=None, metavar='N',
                     help=f'Source probabilities kept per row. Default is {constants.DEFAULT_TOP_K}')
    sub.set_defaults(func=cmd_align, usage=sub.format_usage())

    # init-pivot
    sub = subparsers.add_parser('init-pivot', parents=[common], help='Initialize a toy pivot model')

    sub.add_argument('--corpus', default=None, metavar='PATH', help='Dialogue corpus the character vocabulary is built from')
    sub.add_argument('--vocab', default=None, metavar='PATH', help='JSON list of token strings (index = id)')
    sub.add_argument('--dim', type=int, default=constants.DEFAULT_DIM, metavar='N',
                     help=f'Hidden size. Default is {constants.DEFAULT_DIM}')
    sub.add_argument('--seed', type=int, default=None, metavar='N',
                     help=f'Initialization seed. Default is {constants.DEFAULT_SEED}')
    sub.add_argument('--scale', type=float, default=constants.DEFAULT_INIT_SCALE, metavar='F',
                     help=f'Standard deviation of the initialization. Default is {constants.DEFAULT_INIT_SCALE}')
    sub.add_argument('--out', default=None, metavar='PATH', help='Output checkpoint')
    sub.set_defaults(func=cmd_init_pivot, usage=sub.format_usage())

    # gen-dists
    sub = subparsers.add_parser('gen-dists', parents=[common], help='Generate teacher distribution files')

    generate_distributions.add_arguments(sub)
    sub.set_defaults(func=cmd_gen_dists, usage=sub.format_usage())

    # evaluate
    sub = subparsers.add_parser('evaluate', parents=[common], help='Held-out losses of a toy checkpoint')

    sub.add_argument('--ckpt', default=None, metavar='PATH', help='Checkpoint')
    sub.add_argument('--corpus', default=None, metavar='PATH', help='Held-out dialogue corpus')
    sub.add_argument('--teacher-dir', default=None, metavar='PATH',
                     help='Directory with one distribution file per sample. If not provided, only the CLM loss is computed')
    sub.add_argument('--lambda', dest='lam', type=float, default=None, metavar='F',
                     help=f'Weight of the CLM loss in the combined loss. Default is {constants.DEFAULT_LAMBDA}')
    sub.add_argument('--block-len', type=int, default=None, metavar='N',
                     help=f'Max. tokens per block. Default is {constants.DEFAULT_BLOCK_LEN}')
    sub.set_defaults(func=cmd_evaluate, usage=sub.format_usage())

    args = parser.parse_args(argv)

    return args

def main_wrapper():
    args = parse_args()

    sys.exit(main(args))

if __name__ == '__main__':
    main_wrapper()
