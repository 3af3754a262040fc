
import logging

DEFAULT_LOGGING_LEVEL = logging.INFO
DEFAULT_LOGGING_FORMAT = "[%(asctime)s] [%(levelname)s] [%(module)s:%(lineno)d] %(message)s"

THREADS_ENV_VAR = "FUSEMERGE_THREADS"

# Checkpoint container
HEADER_LENGTH_NBYTES = 8
METADATA_KEY = "__metadata__"
DTYPES = {
    "F32": "<f4",
    "F64": "<f8",
}

# Merging
GRANULARITIES = ("model", "layer", "matrix", "parameter")
MERGE_METHODS = ("varm", "linear", "slerp", "task_arithmetic", "ties", "dare")
WEIGHT_MODES = ("square", "abs", "softmax")
DEFAULT_GRANULARITY = "matrix"
DEFAULT_WEIGHT_MODE = "square"
DEFAULT_LAYER_PATTERN = r"\.(\d+)\."
DEFAULT_SLERP_T = 0.5
DEFAULT_SCALE = 1.0
DEFAULT_DENSITY = 0.2
DEFAULT_DROP_RATE = 0.5
DEFAULT_SEED = 0
DEFAULT_SOFTMAX_TEMPERATURE = 1.0
SLERP_EPSILON = 1e-6 # sin(omega) below this -> linear interpolation
LINEAR_COEFFS_TOLERANCE = 1e-9
MODEL_UNIT_ID = "model"
UNASSIGNED_UNIT_ID = "unassigned"

# Distribution fusion
DEFAULT_CLAMP_MIN = 1e-12
MINCE_GRANULARITIES = ("sequence", "token")
DEFAULT_MINCE_GRANULARITY = "sequence"
DEFAULT_TOP_K = 10
DIST_TENSOR_NAME = "dist"

# Toy trainer
UNK_TOKEN = "<unk>"
UNK_ID = 0
DEFAULT_LAMBDA = 0.9
DEFAULT_LR = 0.05
DEFAULT_EPOCHS = 10
DEFAULT_BATCH = 0 # 0 means full batch
DEFAULT_BLOCK_LEN = 2048
DEFAULT_DIM = 8
DEFAULT_INIT_SCALE = 0.1
LR_SCHEDULES = ("constant", "cosine")
DEFAULT_LR_SCHEDULE = "constant"
DEFAULT_WARMUP_RATIO = 0.0
TEACHER_DIST_SUFFIX = ".dist"

# Hyperparameters of the large-scale runs, kept for reference (not used by the toy trainer)
REFERENCE_LR = 5e-6
REFERENCE_WARMUP_RATIO = 0.03
REFERENCE_EPOCHS = 3
REFERENCE_BATCH = 128

# Metadata keys merged checkpoints inherit from their reference input
INHERITED_METADATA_KEYS = ("vocab", "architecture")

# CLI exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INCOMPATIBLE = 2
EXIT_IO = 3
EXIT_NON_FINITE_LOSS = 4
CKPT_SUFFIX = ".st"
