
import os
import sys
import json
import logging

import psutil

from fusemerge import constants

def expand_and_real_path_and_exists(path, rtn_path_if_doesnt_exist=False, func_check_exists=os.path.isfile,
                                    raise_exception=False, exception=FileNotFoundError):
    """Expand the provided path with real path and user information and handle exceptions if necessary
       based on the existence
    """
    p = os.path.realpath(os.path.expanduser(path))

    if not func_check_exists(p):
        if raise_exception:
            raise exception(p)

        if rtn_path_if_doesnt_exist:
            return path

    return p

def set_up_logging(filename=None, level=constants.DEFAULT_LOGGING_LEVEL, format=constants.DEFAULT_LOGGING_FORMAT, display_when_file=False):
    """It sets up the logging library
    """
    handlers = [
        logging.StreamHandler()
    ]

    if filename is not None:
        if display_when_file:
            # Logging messages will be stored and displayed
            handlers.append(logging.FileHandler(filename))
        else:
            # Logging messages will be stored and not displayed
            handlers[0] = logging.FileHandler(filename)

    logging.basicConfig(handlers=handlers, level=level,
                        format=format)

def get_nothreads():
    """Number of threads for per-tensor work: FUSEMERGE_THREADS if set, physical cores otherwise
    """
    cores = psutil.cpu_count(logical=False) or psutil.cpu_count() or 1
    value = os.environ.get(constants.THREADS_ENV_VAR)

    if value is None or value.strip() == "":
        return cores

    try:
        nothreads = int(value)
    except ValueError:
        logging.warning(f"Ignoring non-integer {constants.THREADS_ENV_VAR}='{value}' (using {cores} threads)")

        return cores

    return max(1, nothreads)

def read_json_file(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)

def write_json_file(obj, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")

def print_json(obj, file=None):
    """Machine output goes to stdout, everything else is logged to stderr
    """
    file = sys.stdout if file is None else file

    file.write(json.dumps(obj, sort_keys=True))
    file.write("\n")
    file.flush()
