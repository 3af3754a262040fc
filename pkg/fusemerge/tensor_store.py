
import re
import json
import math
import struct
import logging

import numpy as np

from fusemerge import constants
from fusemerge.exceptions import MalformedHeaderError, TruncatedPayloadError, NonFiniteValuesError, \
                                 DuplicateTensorNameError

_NUMPY_TO_DTYPE = {np.dtype(np.float32): "F32", np.dtype(np.float64): "F64"}
_NATIVE_DTYPES = {"F32": np.float32, "F64": np.float64}

class Checkpoint:
    """Ordered name -> tensor map plus free-form string metadata. Tensors are numpy arrays (float32 or float64)
       and are read-only once they are part of a checkpoint
    """

    def __init__(self, tensors=None, metadata=None):
        tensors = {} if tensors is None else tensors
        metadata = {} if metadata is None else metadata

        self.tensors = {}
        self.metadata = {str(k): str(v) for k, v in sorted(metadata.items())}

        for name in sorted(tensors):
            if not isinstance(name, str):
                raise ValueError(f"tensor names must be strings: {name!r}")
            if name == constants.METADATA_KEY:
                raise ValueError(f"'{constants.METADATA_KEY}' is reserved for the metadata header entry")

            tensor = tensors[name]
            # Plain sequences are taken as float64
            tensor = np.array(tensor, copy=True, dtype=None if isinstance(tensor, np.ndarray) else np.float64)

            if tensor.dtype not in _NUMPY_TO_DTYPE:
                raise ValueError(f"unsupported dtype for tensor '{name}': {tensor.dtype}")

            tensor.setflags(write=False)

            self.tensors[name] = tensor

    def names(self):
        return list(self.tensors.keys())

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    def __iter__(self):
        return iter(self.tensors.items())

    def noscalars(self):
        return sum(t.size for t in self.tensors.values())

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.metadata != other.metadata or self.names() != other.names():
            return False

        for name, tensor in self:
            o = other[name]

            if tensor.dtype != o.dtype or tensor.shape != o.shape or tensor.tobytes() != o.tobytes():
                return False

        return True

    def __repr__(self):
        return f"Checkpoint(tensors={len(self.tensors)}, scalars={self.noscalars()}, metadata={list(self.metadata)})"

class CompatibilityReport:

    def __init__(self, mismatches):
        self.mismatches = list(mismatches)
        self.compatible = len(self.mismatches) == 0

    def kinds(self):
        return sorted(set(kind for _, kind in self.mismatches))

    def to_dict(self):
        return {"compatible": self.compatible,
                "mismatches": [{"name": name, "kind": kind} for name, kind in self.mismatches]}

    def __repr__(self):
        return f"CompatibilityReport(compatible={self.compatible}, mismatches={self.mismatches})"

class UnitPartition:
    """Assignment of every scalar of a checkpoint to a merge unit.

       For model, layer and matrix granularity a whole tensor belongs to one unit (tensor_unit[name] is its id);
       for parameter granularity every scalar is its own unit, named '<tensor>[<flat index>]'
    """

    def __init__(self, granularity, unit_ids, tensor_unit, tensor_sizes, warnings=None):
        self.granularity = granularity
        self.unit_ids = list(unit_ids)
        self.tensor_unit = dict(tensor_unit)
        self.tensor_sizes = dict(tensor_sizes)
        self.warnings = [] if warnings is None else list(warnings)
        self.unit_index = {unit_id: idx for idx, unit_id in enumerate(self.unit_ids)}

        self._offsets = {}

        if granularity == "parameter":
            offset = 0

            for name in sorted(self.tensor_sizes):
                self._offsets[name] = offset
                offset += self.tensor_sizes[name]

    def unit_of(self, name, index=None):
        if name not in self.tensor_sizes:
            raise KeyError(f"tensor '{name}' is not part of the partition")

        if self.granularity == "parameter":
            if index is None or not 0 <= index < self.tensor_sizes[name]:
                raise KeyError(f"parameter granularity needs a valid flat index for '{name}' (got {index})")

            return parameter_unit_id(name, index)

        return self.tensor_unit[name]

    def positions(self, name):
        """Unit positions (indexes into unit_ids) of the scalars of a tensor: an int or a flat int array
        """
        if self.granularity == "parameter":
            offset = self._offsets[name]

            return np.arange(offset, offset + self.tensor_sizes[name])

        return self.unit_index[self.tensor_unit[name]]

    def members(self):
        """unit id -> list of tensor names (whole-tensor granularities only)
        """
        result = {unit_id: [] for unit_id in self.unit_ids}

        if self.granularity == "parameter":
            for name in sorted(self.tensor_sizes):
                for idx in range(self.tensor_sizes[name]):
                    result[parameter_unit_id(name, idx)].append(name)
        else:
            for name in sorted(self.tensor_unit):
                result[self.tensor_unit[name]].append(name)

        return result

    def __len__(self):
        return len(self.unit_ids)

def parameter_unit_id(name, index):
    return f"{name}[{index}]"

def numpy_dtype(dtype_name):
    return np.dtype(constants.DTYPES[dtype_name])

def dtype_name(tensor):
    return _NUMPY_TO_DTYPE[np.dtype(tensor.dtype)]

def _reject_duplicates(pairs):
    result = {}

    for k, v in pairs:
        if k in result:
            raise DuplicateTensorNameError(k)

        result[k] = v

    return result

def _parse_header(header, payload_nbytes):
    entries = []
    metadata = {}

    if not isinstance(header, dict):
        raise MalformedHeaderError("the header is not a JSON object")

    for name, info in header.items():
        if name == constants.METADATA_KEY:
            if not isinstance(info, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in info.items()):
                raise MalformedHeaderError(f"'{constants.METADATA_KEY}' must be a string -> string map")

            metadata = info

            continue

        if not isinstance(info, dict) or set(info.keys()) != {"dtype", "shape", "data_offsets"}:
            raise MalformedHeaderError(f"unexpected entry for tensor '{name}'")
        if info["dtype"] not in constants.DTYPES:
            raise MalformedHeaderError(f"unsupported dtype '{info['dtype']}' for tensor '{name}'")

        shape = info["shape"]
        offsets = info["data_offsets"]

        if (not isinstance(shape, list) or
            not all(isinstance(d, int) and not isinstance(d, bool) and d >= 0 for d in shape)):
            raise MalformedHeaderError(f"invalid shape for tensor '{name}': {shape}")
        if (not isinstance(offsets, list) or len(offsets) != 2 or
            not all(isinstance(o, int) and not isinstance(o, bool) and o >= 0 for o in offsets) or
            offsets[0] > offsets[1]):
            raise MalformedHeaderError(f"invalid data_offsets for tensor '{name}': {offsets}")

        expected_nbytes = math.prod(shape) * numpy_dtype(info["dtype"]).itemsize

        if offsets[1] - offsets[0] != expected_nbytes:
            raise MalformedHeaderError(f"data_offsets of tensor '{name}' span {offsets[1] - offsets[0]} bytes, "
                                       f"but dtype and shape need {expected_nbytes}")

        entries.append((name, info["dtype"], shape, offsets))

    # Payloads have to be contiguous and non-overlapping, starting at 0
    end = 0

    for name, _, _, (begin, finish) in sorted(entries, key=lambda e: (e[3][0], e[3][1])):
        if begin != end:
            raise MalformedHeaderError(f"data_offsets of tensor '{name}' overlap or leave a gap (begin {begin}, expected {end})")

        end = finish

    if end > payload_nbytes:
        raise TruncatedPayloadError(f"the header declares {end} bytes of payload, but only {payload_nbytes} are available")
    if end < payload_nbytes:
        raise MalformedHeaderError(f"{payload_nbytes - end} trailing bytes are not covered by any tensor")

    return entries, metadata

def deserialize_checkpoint(buffer):
    buffer = bytes(buffer)

    if len(buffer) < constants.HEADER_LENGTH_NBYTES:
        raise MalformedHeaderError(f"{len(buffer)} bytes are not enough for the header length")

    header_nbytes = struct.unpack("<Q", buffer[:constants.HEADER_LENGTH_NBYTES])[0]
    header_end = constants.HEADER_LENGTH_NBYTES + header_nbytes

    if header_end > len(buffer):
        raise MalformedHeaderError(f"header length ({header_nbytes}) exceeds the size of the container")

    try:
        header = json.loads(buffer[constants.HEADER_LENGTH_NBYTES:header_end].decode("utf-8"),
                            object_pairs_hook=_reject_duplicates)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeaderError(f"could not decode the JSON header ({str(e)})") from e

    payload = buffer[header_end:]
    entries, metadata = _parse_header(header, len(payload))
    tensors = {}

    for name, dtype, shape, (begin, end) in entries:
        tensor = np.frombuffer(payload[begin:end], dtype=numpy_dtype(dtype)).reshape(shape)
        tensor = tensor.astype(_NATIVE_DTYPES[dtype])

        if not np.all(np.isfinite(tensor)):
            raise NonFiniteValuesError(f"tensor '{name}' contains NaN or Inf")

        tensors[name] = tensor

    return Checkpoint(tensors, metadata)

def serialize_checkpoint(ckpt):
    """Canonical container bytes: names sorted, offsets in name order, fixed key order, no padding
    """
    header = {}
    payloads = []
    offset = 0

    if ckpt.metadata:
        header[constants.METADATA_KEY] = {k: ckpt.metadata[k] for k in sorted(ckpt.metadata)}

    for name in sorted(ckpt.tensors):
        tensor = ckpt.tensors[name]
        dtype = dtype_name(tensor)
        data = np.ascontiguousarray(tensor, dtype=numpy_dtype(dtype)).tobytes()

        header[name] = {"dtype": dtype,
                        "shape": [int(d) for d in tensor.shape],
                        "data_offsets": [offset, offset + len(data)]}
        payloads.append(data)
        offset += len(data)

    header_bytes = json.dumps(header, separators=(",", ":"), ensure_ascii=False).encode("utf-8")

    return struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(payloads)

def load_checkpoint(path):
    with open(path, "rb") as f:
        buffer = f.read()

    try:
        ckpt = deserialize_checkpoint(buffer)
    except Exception as e:
        logging.error(f"Could not load checkpoint '{path}': {str(e)}")
        raise

    logging.debug(f"Loaded checkpoint '{path}': {len(ckpt)} tensors, {ckpt.noscalars()} scalars")

    return ckpt

def save_checkpoint(ckpt, path):
    data = serialize_checkpoint(ckpt)

    with open(path, "wb") as f:
        f.write(data)

    logging.debug(f"Stored checkpoint '{path}' ({len(data)} bytes)")

def validate_compatible(ckpts):
    if len(ckpts) == 0:
        raise ValueError("at least one checkpoint is needed to check compatibility")

    mismatches = []
    reference = ckpts[0]
    all_names = sorted(set(name for ckpt in ckpts for name in ckpt.names()))

    for name in all_names:
        if not all(name in ckpt for ckpt in ckpts):
            mismatches.append((name, "missing"))
            continue

        shapes = set(ckpt[name].shape for ckpt in ckpts)
        dtypes = set(np.dtype(ckpt[name].dtype) for ckpt in ckpts)

        if len(shapes) != 1:
            mismatches.append((name, "shape"))
        if len(dtypes) != 1:
            mismatches.append((name, "dtype"))

    if mismatches:
        logging.debug(f"Incompatible checkpoints ({len(mismatches)} mismatches, reference has {len(reference)} tensors)")

    return CompatibilityReport(mismatches)

def partition_units(ckpt, granularity, layer_pattern=constants.DEFAULT_LAYER_PATTERN):
    if granularity not in constants.GRANULARITIES:
        raise ValueError(f"unknown granularity: '{granularity}'")

    names = ckpt.names()
    sizes = {name: int(ckpt[name].size) for name in names}
    tensor_unit = {}
    warnings = []

    if granularity == "model":
        unit_ids = [constants.MODEL_UNIT_ID]
        tensor_unit = {name: constants.MODEL_UNIT_ID for name in names}
    elif granularity == "matrix":
        unit_ids = list(names)
        tensor_unit = {name: name for name in names}
    elif granularity == "layer":
        regex = re.compile(layer_pattern)
        layers = set()
        unassigned = False

        for name in names:
            match = regex.search(name)
            layer = None

            if match:
                try:
                    layer = int(match.group(1) if match.groups() else match.group(0))
                except ValueError:
                    layer = None

            if layer is None:
                tensor_unit[name] = constants.UNASSIGNED_UNIT_ID
                unassigned = True
            else:
                tensor_unit[name] = f"layer{layer}"
                layers.add(layer)

        unit_ids = [f"layer{layer}" for layer in sorted(layers)]

        if unassigned:
            unit_ids.append(constants.UNASSIGNED_UNIT_ID)

        if len(names) != 0 and len(layers) == 0:
            msg = f"layer pattern '{layer_pattern}' matched no tensor name: every tensor goes to the '{constants.UNASSIGNED_UNIT_ID}' unit"

            logging.warning(msg)
            warnings.append(msg)
    else:
        unit_ids = [parameter_unit_id(name, idx) for name in names for idx in range(sizes[name])]
        tensor_unit = {name: None for name in names}

    return UnitPartition(granularity, unit_ids, tensor_unit, sizes, warnings=warnings)
